//! Stage-1 objective: multi-positive contrastive loss across views,
//! multi-view fusion, and instance- and token-level cross-modal alignment.

use serde_json::json;

use crate::config::ModelDims;
use crate::corpus::{Batch, Vocabulary};
use crate::encoders::{self, ProjectedPair, TextBatch, TextFeatures, VisualFeatures};
use crate::layers::{apply_layer_norm, init_layer_norm};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::nn::{mask_bias, scaled_dot_attention};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::ModelError;

pub fn init_fusion(store: &mut ParamStore, dims: &ModelDims) {
    init_layer_norm(store, "fuse.ln", dims.d1);
}

/// Fuses each study's views into `[B, p, d1]`.
///
/// For a multi-view study, anchor position `j` attends over position `j` of
/// every auxiliary view; the result is added to the anchor and layer-normed.
/// Single-view studies pass their anchor through unchanged.
pub fn multi_view_fuse(
    g: &mut Graph,
    store: &ParamStore,
    v: &VisualFeatures,
    batch: &Batch,
) -> Result<Var, TensorError> {
    let s = g.shape(v.per_view).to_vec();
    let (p, d1) = (s[1], s[2]);
    let offsets = batch.view_offsets();
    let mut parts = Vec::with_capacity(batch.b());
    for (study, &off) in batch.studies.iter().zip(&offsets) {
        let anchor = g.select(v.per_view, &[off + study.anchor_index])?;
        if !study.is_multi_view() {
            parts.push(anchor);
            continue;
        }
        let aux_rows: Vec<usize> = study.auxiliary_indices().map(|i| off + i).collect();
        let n_aux = aux_rows.len();
        let aux = g.select(v.per_view, &aux_rows)?;
        let kv = g.permute(aux, &[1, 0, 2])?;
        let q = g.reshape(anchor, &[p, 1, d1])?;
        let attended = scaled_dot_attention(g, q, kv, kv, None)?;
        let attended = g.reshape(attended, &[1, p, d1])?;
        debug_assert_eq!(g.shape(kv), [p, n_aux, d1]);
        let r = g.add(anchor, attended)?;
        parts.push(apply_layer_norm(g, store, "fuse.ln", r)?);
    }
    g.concat(&parts)
}

/// Cross-view softmax `q` and multi-positive target `p`, both `[K, K-1]`.
#[derive(Clone, Debug)]
pub struct MpcDistributions {
    pub q: Var,
    pub p: Tensor,
    /// `(study, view)` of each row.
    pub rows: Vec<(usize, usize)>,
}

/// Builds the view-contrast distributions over views of multi-view studies.
/// Returns `None` when fewer than two such views exist.
///
/// `globals` holds one unit-norm vector per view, in batch order.
pub fn mpc_distributions(
    g: &mut Graph,
    globals: Var,
    batch: &Batch,
    tau1: f64,
) -> Result<Option<MpcDistributions>, TensorError> {
    let mut rows = Vec::new();
    let mut flat = Vec::new();
    for ((si, vi), fi) in batch.view_index().into_iter().zip(0..) {
        if batch.studies[si].is_multi_view() {
            rows.push((si, vi));
            flat.push(fi);
        }
    }
    let k = rows.len();
    if k < 2 {
        return Ok(None);
    }
    let sel = g.select(globals, &flat)?;
    let selt = g.transpose(sel)?;
    let sims = g.matmul(sel, selt)?;
    let mut index = Vec::with_capacity(k * (k - 1));
    let mut target = Vec::with_capacity(k * (k - 1));
    for (i, &(si, _)) in rows.iter().enumerate() {
        let w = 1.0 / (batch.studies[si].view_count() - 1) as f64;
        for (j, &(sj, _)) in rows.iter().enumerate() {
            if j != i {
                index.push(i * k + j);
                target.push(if sj == si { w } else { 0.0 });
            }
        }
    }
    let logits = g.gather(sims, index, &[k, k - 1])?;
    let q = g.softmax_rows(logits, tau1)?;
    Ok(Some(MpcDistributions {
        q,
        p: Tensor::new(vec![k, k - 1], target)?,
        rows,
    }))
}

/// `-(1/K) Σ_i p_i · log q_i`.
pub fn mpc_loss(g: &mut Graph, d: &MpcDistributions) -> Result<Var, TensorError> {
    g.cross_entropy_rows(&d.p, d.q)
}

#[derive(Clone, Debug)]
pub struct AlignmentDistributions {
    pub q_v2t: Var,
    pub q_t2v: Var,
    pub p_g: Tensor,
}

/// Target spreading each row uniformly over studies with an identical
/// report.
pub fn report_targets(reports: &[&str]) -> Tensor {
    let b = reports.len();
    let mut data = vec![0.0; b * b];
    for i in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| reports[j] == reports[i]).collect();
        let w = 1.0 / same.len() as f64;
        for j in same {
            data[i * b + j] = w;
        }
    }
    Tensor::new(vec![b, b], data).expect("square")
}

/// Symmetric image↔text contrastive loss over unit-norm globals `[B, d]`.
pub fn instance_alignment_loss(
    g: &mut Graph,
    vis_global: Var,
    txt_global: Var,
    reports: &[&str],
    tau2: f64,
) -> Result<(Var, AlignmentDistributions), TensorError> {
    let tt = g.transpose(txt_global)?;
    let sims = g.matmul(vis_global, tt)?;
    let q_v2t = g.softmax_rows(sims, tau2)?;
    let simt = g.transpose(sims)?;
    let q_t2v = g.softmax_rows(simt, tau2)?;
    let p_g = report_targets(reports);
    let a = g.cross_entropy_rows(&p_g, q_v2t)?;
    let b = g.cross_entropy_rows(&p_g, q_t2v)?;
    let loss = g.add(a, b)?;
    Ok((loss, AlignmentDistributions { q_v2t, q_t2v, p_g }))
}

/// Per-token InfoNCE between unit-norm tokens `[B, L, d]` and their
/// contexts `[B, L, d]`. Negatives for token `j` of study `b` are the other
/// content tokens of study `b`. Studies with fewer than two content tokens
/// are skipped; the loss is the mean over the remaining tokens, or 0.
pub fn token_infonce(
    g: &mut Graph,
    tokens: Var,
    contexts: Var,
    content: &[bool],
    tau2: f64,
) -> Result<Var, TensorError> {
    let s = g.shape(tokens).to_vec();
    let (b, l) = (s[0], s[1]);
    let mut picks = Vec::new();
    for bi in 0..b {
        let idx: Vec<usize> = (0..l).filter(|&j| content[bi * l + j]).collect();
        if idx.len() >= 2 {
            picks.extend(idx.into_iter().map(|j| (bi * l + j) * l + j));
        }
    }
    if picks.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let ct = g.transpose(contexts)?;
    let sims = g.matmul(tokens, ct)?;
    let logits = g.scale(sims, 1.0 / tau2);
    let disallowed: Vec<bool> = (0..b * l * l)
        .map(|i| !content[(i / (l * l)) * l + i % l])
        .collect();
    let bias = g.constant(mask_bias(&[b, l, l], &disallowed)?);
    let logits = g.add_broadcast(logits, bias)?;
    let logp = g.log_softmax_rows(logits)?;
    let w = -1.0 / picks.len() as f64;
    g.pick_sum(logp, picks.into_iter().map(|i| (i, w)).collect())
}

/// Each content token attends over its study's projected visual tokens;
/// tokens and contexts are unit-normed before the InfoNCE.
pub fn token_alignment_loss(
    g: &mut Graph,
    pp: &ProjectedPair,
    text: &TextFeatures,
    tau2: f64,
) -> Result<Var, TensorError> {
    let t = g.l2_normalize(pp.txt);
    let v = g.l2_normalize(pp.vis);
    let c = scaled_dot_attention(g, t, v, v, None)?;
    let c = g.l2_normalize(c);
    token_infonce(g, t, c, &text.content, tau2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub mpc: f64,
    pub inst: f64,
    pub tok: f64,
    pub total: f64,
}

pub struct Stage1Output {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub mpc: Option<MpcDistributions>,
    pub align: AlignmentDistributions,
}

/// Builds the full Stage-1 loss for one batch.
pub fn stage1_forward(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    vocab: &Vocabulary,
    batch: &Batch,
    tau1: f64,
    tau2: f64,
) -> Result<Stage1Output, ModelError> {
    let v = encoders::encode_views(g, store, dims, batch)?;
    let globals = encoders::view_globals(g, &v)?;
    let mpc = mpc_distributions(g, globals, batch, tau1)?;
    let mpc_var = match &mpc {
        Some(d) => mpc_loss(g, d)?,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let fused = multi_view_fuse(g, store, &v, batch)?;
    let seqs: Vec<Vec<u32>> = batch
        .studies
        .iter()
        .map(|s| encoders::serialization_ids(s, vocab))
        .collect();
    let text = encoders::encode_text(g, store, dims, &TextBatch::new(&seqs, dims.max_text_len))?;
    let pp = encoders::project_and_pool(g, store, fused, &text)?;
    let reports: Vec<&str> = batch.studies.iter().map(|s| s.report.as_str()).collect();
    let (inst_var, align) =
        instance_alignment_loss(g, pp.vis_global, pp.txt_global, &reports, tau2)?;
    let tok_var = token_alignment_loss(g, &pp, &text, tau2)?;
    let sum = g.add(mpc_var, inst_var)?;
    let total = g.add(sum, tok_var)?;
    let breakdown = LossBreakdown {
        mpc: g.value(mpc_var).item(),
        inst: g.value(inst_var).item(),
        tok: g.value(tok_var).item(),
        total: g.value(total).item(),
    };
    Ok(Stage1Output {
        total,
        breakdown,
        mpc,
        align,
    })
}

fn rows_json(t: &Tensor) -> serde_json::Value {
    json!({ "shape": t.shape(), "data": t.data() })
}

/// JSON dump of every Stage-1 distribution, for numerical-abort reports.
pub fn dump_distributions(g: &Graph, out: &Stage1Output) -> String {
    let mut v = json!({
        "breakdown": out.breakdown,
        "q_v2t": rows_json(g.value(out.align.q_v2t)),
        "q_t2v": rows_json(g.value(out.align.q_t2v)),
        "p_g": rows_json(&out.align.p_g),
    });
    if let Some(m) = &out.mpc {
        v["q"] = rows_json(g.value(m.q));
        v["p"] = rows_json(&m.p);
    }
    serde_json::to_string_pretty(&v).expect("serializable")
}

/// One forward, backward, and AdamW update on the Stage-1 objective.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    store: &mut ParamStore,
    opt: &mut AdamW,
    dims: &ModelDims,
    vocab: &Vocabulary,
    batch: &Batch,
    tau1: f64,
    tau2: f64,
    lr: f64,
) -> Result<LossBreakdown, ModelError> {
    let mut g = Graph::new();
    let out = stage1_forward(&mut g, store, dims, vocab, batch, tau1, tau2)?;
    if !out.breakdown.total.is_finite() {
        return Err(ModelError::NonFinite {
            what: "stage-1 loss".into(),
            dump: dump_distributions(&g, &out),
        });
    }
    g.backward(out.total)?;
    opt.step(store, &g.param_grads(), |_| lr);
    Ok(out.breakdown)
}

/// Initializes every Stage-1 tensor.
pub fn init_stage1(dims: &ModelDims, vocab_len: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::Rng64::fork(seed, 1);
    encoders::init_encoders(&mut store, dims, vocab_len, &mut rng);
    init_fusion(&mut store, dims);
    store
}
