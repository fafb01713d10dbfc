//! Visual and text encoders, projection heads, and global pooling.

use crate::config::ModelDims;
use crate::corpus::text::tokenize;
use crate::corpus::vocab::{BOS, EOS, PAD};
use crate::corpus::{Batch, Study, Vocabulary};
use crate::layers::*;
use crate::params::ParamStore;
use crate::rng::Rng64;
use crate::tensor::nn::mask_bias;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::ModelError;

/// `(out_channels, stride)` of each 3×3 conv block.
const CONV_BLOCKS: [(usize, usize); 3] = [(16, 1), (32, 2), (64, 2)];

/// Parameter-name prefixes owned by the encoders.
pub const PREFIXES: [&str; 3] = ["vis.", "txt.", "proj."];

pub fn init_encoders(store: &mut ParamStore, dims: &ModelDims, vocab_len: usize, rng: &mut Rng64) {
    let mut c_in = 1;
    for (i, &(c, _)) in CONV_BLOCKS.iter().enumerate() {
        let c = if i + 1 == CONV_BLOCKS.len() {
            dims.d1
        } else {
            c
        };
        store.init_normal(&format!("vis.conv{i}.w"), &[c, c_in, 3, 3], c_in * 9, rng);
        store.init_const(&format!("vis.conv{i}.b"), &[c], 0.0);
        c_in = c;
    }
    store.init_normal("vis.pos", &[dims.p(), dims.d1], dims.d1, rng);
    init_layer_norm(store, "vis.ln", dims.d1);

    store.init_normal("txt.embed", &[vocab_len, dims.d2], dims.d2, rng);
    store.init_normal("txt.pos", &[dims.max_text_len, dims.d2], dims.d2, rng);
    for l in 0..dims.text_layers {
        init_attention(store, &format!("txt.{l}.attn"), dims.d2, dims.d2, rng);
        init_layer_norm(store, &format!("txt.{l}.ln1"), dims.d2);
        init_ffn(
            store,
            &format!("txt.{l}.ffn"),
            dims.d2,
            dims.d2 * dims.ffn_mult,
            dims.d2,
            rng,
        );
        init_layer_norm(store, &format!("txt.{l}.ln2"), dims.d2);
    }

    init_ffn(store, "proj.vis", dims.d1, dims.d1, dims.d, rng);
    init_ffn(store, "proj.txt", dims.d2, dims.d2, dims.d, rng);
}

/// Per-view feature maps `[M_imgs, p, d1]`, views in study order.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatures {
    pub per_view: Var,
}

/// Stacks every view of the batch into `[M_imgs, 1, H, W]`.
pub fn stack_views(batch: &Batch, dims: &ModelDims) -> Result<Tensor, ModelError> {
    let n = dims.image_size;
    let mut data = Vec::with_capacity(batch.m_imgs() * n * n);
    for s in &batch.studies {
        for (vi, v) in s.views.iter().enumerate() {
            if v.shape() != [n, n] {
                return Err(ModelError::ImageSize {
                    study: s.study_id.clone(),
                    view: vi,
                    expected: [n, n],
                    found: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
    }
    Ok(Tensor::new(vec![batch.m_imgs(), 1, n, n], data)?)
}

/// Conv net over every view, flattened to `p` layer-normed positions of
/// `d1` channels.
pub fn encode_views(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    batch: &Batch,
) -> Result<VisualFeatures, ModelError> {
    let images = stack_views(batch, dims)?;
    let mut h = g.constant(images);
    for (i, &(_, stride)) in CONV_BLOCKS.iter().enumerate() {
        let w = g.param(store, &format!("vis.conv{i}.w"))?;
        let b = g.param(store, &format!("vis.conv{i}.b"))?;
        h = g.conv2d(h, w, b, stride, 1)?;
        h = g.gelu(h);
    }
    let s = g.shape(h).to_vec();
    let (m, c, p) = (s[0], s[1], s[2] * s[3]);
    let h = g.reshape(h, &[m, c, p])?;
    let h = g.permute(h, &[0, 2, 1])?;
    let pos = g.param(store, "vis.pos")?;
    let h = g.add_broadcast(h, pos)?;
    let per_view = apply_layer_norm(g, store, "vis.ln", h)?;
    Ok(VisualFeatures { per_view })
}

/// Unit-norm mean of each view's positions, `[M_imgs, d1]`.
pub fn view_globals(g: &mut Graph, v: &VisualFeatures) -> Result<Var, TensorError> {
    let s = g.shape(v.per_view).to_vec();
    let pooled = g.masked_mean(v.per_view, &vec![true; s[0] * s[1]])?;
    Ok(g.l2_normalize(pooled))
}

/// Padded token ids for the text encoder. Every row is `BOS, tokens…, EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<u32>,
    pub b: usize,
    pub l: usize,
    /// True for BOS, content, and EOS positions.
    pub mask: Vec<bool>,
    /// True for content positions only.
    pub content: Vec<bool>,
}

impl TextBatch {
    /// Content beyond `max_len - 2` tokens is truncated.
    pub fn new(seqs: &[Vec<u32>], max_len: usize) -> Self {
        let keep = max_len.saturating_sub(2);
        let l = seqs
            .iter()
            .map(|s| s.len().min(keep) + 2)
            .max()
            .unwrap_or(2);
        let b = seqs.len();
        let mut ids = vec![PAD; b * l];
        let mut mask = vec![false; b * l];
        let mut content = vec![false; b * l];
        for (i, s) in seqs.iter().enumerate() {
            let n = s.len().min(keep);
            let row = i * l;
            ids[row] = BOS;
            ids[row + 1..row + 1 + n].copy_from_slice(&s[..n]);
            ids[row + 1 + n] = EOS;
            mask[row..row + n + 2].iter_mut().for_each(|m| *m = true);
            content[row + 1..row + 1 + n]
                .iter_mut()
                .for_each(|m| *m = true);
        }
        Self {
            ids,
            b,
            l,
            mask,
            content,
        }
    }

    /// Bias `[b, l, l]` blocking attention to padding keys.
    pub fn key_bias(&self) -> Tensor {
        let (b, l) = (self.b, self.l);
        let disallowed: Vec<bool> = (0..b * l * l)
            .map(|i| !self.mask[(i / (l * l)) * l + i % l])
            .collect();
        mask_bias(&[b, l, l], &disallowed).expect("sized")
    }
}

pub fn serialization_ids(study: &Study, vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode(&tokenize(&study.factual_serialization.join(" ")))
}

pub fn indication_ids(indication: &str, vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode(&tokenize(indication))
}

#[derive(Clone, Debug)]
pub struct TextFeatures {
    /// `[b, l, d2]`
    pub tokens: Var,
    pub mask: Vec<bool>,
    pub content: Vec<bool>,
    pub b: usize,
    pub l: usize,
}

/// Post-norm transformer encoder over a [`TextBatch`].
pub fn encode_text(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    text: &TextBatch,
) -> Result<TextFeatures, TensorError> {
    let table = g.param(store, "txt.embed")?;
    let pos = g.param(store, "txt.pos")?;
    let h = embed(g, table, &text.ids, text.b, text.l)?;
    let mut h = add_positions(g, h, pos, text.l)?;
    let bias = text.key_bias();
    for l in 0..dims.text_layers {
        let a = apply_attention(g, store, &format!("txt.{l}.attn"), h, h, Some(&bias))?;
        let r = g.add(h, a)?;
        h = apply_layer_norm(g, store, &format!("txt.{l}.ln1"), r)?;
        let f = apply_ffn(g, store, &format!("txt.{l}.ffn"), h)?;
        let r = g.add(h, f)?;
        h = apply_layer_norm(g, store, &format!("txt.{l}.ln2"), r)?;
    }
    Ok(TextFeatures {
        tokens: h,
        mask: text.mask.clone(),
        content: text.content.clone(),
        b: text.b,
        l: text.l,
    })
}

/// Projected token features and their unit-norm global vectors.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedPair {
    /// `[B, p, d]`
    pub vis: Var,
    /// `[B, l, d]`
    pub txt: Var,
    /// `[B, d]`
    pub vis_global: Var,
    /// `[B, d]`
    pub txt_global: Var,
}

pub fn project_and_pool(
    g: &mut Graph,
    store: &ParamStore,
    fused: Var,
    text: &TextFeatures,
) -> Result<ProjectedPair, TensorError> {
    let vis = apply_ffn(g, store, "proj.vis", fused)?;
    let txt = apply_ffn(g, store, "proj.txt", text.tokens)?;
    let s = g.shape(vis).to_vec();
    let vis_pooled = g.masked_mean(vis, &vec![true; s[0] * s[1]])?;
    let txt_pooled = g.masked_mean(txt, &text.mask)?;
    Ok(ProjectedPair {
        vis,
        txt,
        vis_global: g.l2_normalize(vis_pooled),
        txt_global: g.l2_normalize(txt_pooled),
    })
}
