//! Stage-2 generation: the indication bridge, a memory-augmented decoder,
//! the LM loss, and greedy/beam decoding.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{LearningRates, ModelDims};
use crate::corpus::text::tokenize;
use crate::corpus::vocab::{BOS, EOS};
use crate::corpus::{Batch, Study, Vocabulary};
use crate::encoders::{self, TextBatch, TextFeatures};
use crate::layers::*;
use crate::mvcl;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::rng::Rng64;
use crate::tensor::nn::{causal_bias, scaled_dot_attention, MASKED};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::ModelError;

pub fn init_stage2(store: &mut ParamStore, dims: &ModelDims, vocab_len: usize, seed: u64) {
    let mut rng = Rng64::fork(seed, 2);
    for blk in 0..dims.bridge_blocks {
        let name = format!("bridge.{blk}");
        store.init_normal(
            &format!("{name}.keys"),
            &[dims.n_b, dims.d_attn],
            dims.d_attn,
            &mut rng,
        );
        store.init_const(&format!("{name}.values"), &[dims.n_b, dims.d1], 0.0);
        init_linear(
            store,
            &format!("{name}.q"),
            dims.d1,
            dims.d_attn,
            false,
            &mut rng,
        );
        init_linear(
            store,
            &format!("{name}.k"),
            dims.d2,
            dims.d_attn,
            false,
            &mut rng,
        );
        // Zero values keep both the bank and the indication path an identity
        // at initialization.
        store.init_const(&format!("{name}.v.w"), &[dims.d2, dims.d1], 0.0);
        init_layer_norm(store, &format!("{name}.ln"), dims.d1);
    }
    store.init_normal("dec.embed", &[vocab_len, dims.d1], dims.d1, &mut rng);
    store.init_normal("dec.pos", &[dims.max_gen, dims.d1], dims.d1, &mut rng);
    if dims.memory_rows > 0 {
        store.init_normal(
            "dec.memory",
            &[dims.memory_rows, dims.d1],
            dims.d1,
            &mut rng,
        );
    }
    for l in 0..dims.dec_layers {
        init_attention(store, &format!("dec.{l}.self"), dims.d1, dims.d1, &mut rng);
        init_layer_norm(store, &format!("dec.{l}.ln1"), dims.d1);
        init_attention(store, &format!("dec.{l}.cross"), dims.d1, dims.d1, &mut rng);
        init_layer_norm(store, &format!("dec.{l}.ln2"), dims.d1);
        init_ffn(
            store,
            &format!("dec.{l}.ffn"),
            dims.d1,
            dims.d1 * dims.ffn_mult,
            dims.d1,
            &mut rng,
        );
        init_layer_norm(store, &format!("dec.{l}.ln3"), dims.d1);
    }
    init_linear(store, "dec.out", dims.d1, vocab_len, true, &mut rng);
}

/// Encoded indications for a batch; `present[i]` is false where study `i`
/// has none, and its token positions are then ignored.
pub struct IndicationFeatures {
    pub text: TextFeatures,
    pub present: Vec<bool>,
}

/// Runs the shared text encoder over the batch's indications. Returns
/// `None` when no study in the batch has one.
pub fn encode_indications(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    vocab: &Vocabulary,
    batch: &Batch,
) -> Result<Option<IndicationFeatures>, TensorError> {
    let present: Vec<bool> = batch
        .studies
        .iter()
        .map(|s| s.indication.is_some())
        .collect();
    if !present.contains(&true) {
        return Ok(None);
    }
    let seqs: Vec<Vec<u32>> = batch
        .studies
        .iter()
        .map(|s| {
            s.indication
                .as_deref()
                .map(|i| encoders::indication_ids(i, vocab))
                .unwrap_or_default()
        })
        .collect();
    let text = encoders::encode_text(g, store, dims, &TextBatch::new(&seqs, dims.max_text_len))?;
    Ok(Some(IndicationFeatures { text, present }))
}

/// One bridge block: fused tokens query the bridge bank, plus the study's
/// indication tokens when present, then residual and layer norm.
pub fn bridge_block(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    fused: Var,
    ind: Option<&IndicationFeatures>,
) -> Result<Var, TensorError> {
    let s = g.shape(fused).to_vec();
    let (b, p) = (s[0], s[1]);
    let bank_k = g.param(store, &format!("{name}.keys"))?;
    let bank_v = g.param(store, &format!("{name}.values"))?;
    let q = apply_linear(g, store, &format!("{name}.q"), fused)?;
    let attended = match ind {
        None => scaled_dot_attention(g, q, bank_k, bank_v, None)?,
        Some(ind) => {
            let (l, n_b) = (ind.text.l, g.shape(bank_k)[0]);
            let ik = apply_linear(g, store, &format!("{name}.k"), ind.text.tokens)?;
            let iv = apply_linear(g, store, &format!("{name}.v"), ind.text.tokens)?;
            let (da, d1) = (g.shape(ik)[2], g.shape(iv)[2]);
            let ik = g.reshape(ik, &[b * l, da])?;
            let iv = g.reshape(iv, &[b * l, d1])?;
            let mut ks = Vec::with_capacity(b);
            let mut vs = Vec::with_capacity(b);
            for i in 0..b {
                let rows: Vec<usize> = (i * l..(i + 1) * l).collect();
                let ki = g.select(ik, &rows)?;
                let vi = g.select(iv, &rows)?;
                let kc = g.concat(&[bank_k, ki])?;
                let vc = g.concat(&[bank_v, vi])?;
                ks.push(g.reshape(kc, &[1, n_b + l, da])?);
                vs.push(g.reshape(vc, &[1, n_b + l, d1])?);
            }
            let k = g.concat(&ks)?;
            let v = g.concat(&vs)?;
            let width = n_b + l;
            let mut bias = vec![0.0; b * p * width];
            for i in 0..b {
                for j in 0..l {
                    if !(ind.present[i] && ind.text.mask[i * l + j]) {
                        for r in 0..p {
                            bias[(i * p + r) * width + n_b + j] = MASKED;
                        }
                    }
                }
            }
            let bias = Tensor::new(vec![b, p, width], bias)?;
            scaled_dot_attention(g, q, k, v, Some(&bias))?
        }
    };
    let r = g.add(fused, attended)?;
    apply_layer_norm(g, store, &format!("{name}.ln"), r)
}

/// Stacked bridge blocks; output shape equals `fused`'s.
pub fn bridge_forward(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    fused: Var,
    ind: Option<&IndicationFeatures>,
) -> Result<Var, TensorError> {
    let mut h = fused;
    for blk in 0..dims.bridge_blocks {
        h = bridge_block(g, store, &format!("bridge.{blk}"), h, ind)?;
    }
    Ok(h)
}

/// Visual knowledge `[B, p, d1]` for the decoder: encode, fuse, bridge.
pub fn knowledge(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    vocab: &Vocabulary,
    batch: &Batch,
) -> Result<Var, ModelError> {
    let v = encoders::encode_views(g, store, dims, batch)?;
    let fused = mvcl::multi_view_fuse(g, store, &v, batch)?;
    let ind = encode_indications(g, store, dims, vocab, batch)?;
    Ok(bridge_forward(g, store, dims, fused, ind.as_ref())?)
}

/// Decoder logits `[B, T, V]` for equal-length `inputs` (each starting with
/// BOS) over `knowledge: [B, p, d1]`.
pub fn decoder_logits(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    knowledge: Var,
    inputs: &[Vec<u32>],
) -> Result<Var, ModelError> {
    let b = inputs.len();
    let t = inputs.first().map_or(0, Vec::len);
    if t > dims.max_gen {
        return Err(ModelError::PrefixTooLong {
            len: t,
            max: dims.max_gen,
        });
    }
    if inputs.iter().any(|s| s.first() != Some(&BOS)) {
        return Err(ModelError::MissingBos);
    }
    assert!(
        inputs.iter().all(|s| s.len() == t),
        "decoder inputs must share a length"
    );
    let ks = g.shape(knowledge).to_vec();
    let (p, d1) = (ks[1], ks[2]);
    let memory = if dims.memory_rows > 0 {
        let mem = g.param(store, "dec.memory")?;
        let flat = g.reshape(knowledge, &[b * p, d1])?;
        let mut parts = Vec::with_capacity(b);
        for i in 0..b {
            let rows: Vec<usize> = (i * p..(i + 1) * p).collect();
            let ki = g.select(flat, &rows)?;
            let c = g.concat(&[ki, mem])?;
            parts.push(g.reshape(c, &[1, p + dims.memory_rows, d1])?);
        }
        g.concat(&parts)?
    } else {
        knowledge
    };

    let ids: Vec<u32> = inputs.concat();
    let table = g.param(store, "dec.embed")?;
    let pos = g.param(store, "dec.pos")?;
    let h = embed(g, table, &ids, b, t)?;
    let mut h = add_positions(g, h, pos, t)?;
    let causal = causal_bias(t);
    for l in 0..dims.dec_layers {
        let a = apply_attention(g, store, &format!("dec.{l}.self"), h, h, Some(&causal))?;
        let r = g.add(h, a)?;
        h = apply_layer_norm(g, store, &format!("dec.{l}.ln1"), r)?;
        let c = apply_attention(g, store, &format!("dec.{l}.cross"), h, memory, None)?;
        let r = g.add(h, c)?;
        h = apply_layer_norm(g, store, &format!("dec.{l}.ln2"), r)?;
        let f = apply_ffn(g, store, &format!("dec.{l}.ffn"), h)?;
        let r = g.add(h, f)?;
        h = apply_layer_norm(g, store, &format!("dec.{l}.ln3"), r)?;
    }
    Ok(apply_linear(g, store, "dec.out", h)?)
}

/// Next-token logits `[B, V]` after each prefix.
pub fn decode_step(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    knowledge: Var,
    prefixes: &[Vec<u32>],
) -> Result<Var, ModelError> {
    let logits = decoder_logits(g, store, dims, knowledge, prefixes)?;
    let s = g.shape(logits).to_vec();
    let (b, t, v) = (s[0], s[1], s[2]);
    let index: Vec<usize> = (0..b)
        .flat_map(|i| ((i * t + t - 1) * v)..((i * t + t) * v))
        .collect();
    Ok(g.gather(logits, index, &[b, v])?)
}

/// Report ids followed by EOS, truncated so the whole target fits in
/// `max_gen` tokens.
pub fn target_ids(report: &str, vocab: &Vocabulary, max_gen: usize) -> Vec<u32> {
    let mut ids = vocab.encode(&tokenize(report));
    ids.truncate(max_gen.saturating_sub(1));
    ids.push(EOS);
    ids
}

/// Per-study summed negative log-likelihood of `targets` under teacher
/// forcing, as graph nodes. Empty targets contribute 0.
pub fn sequence_nll(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    knowledge: Var,
    targets: &[Vec<u32>],
) -> Result<Vec<Var>, ModelError> {
    let t = targets.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let inputs: Vec<Vec<u32>> = targets
        .iter()
        .map(|tg| {
            let mut x = vec![BOS];
            x.extend(tg.iter().take(t - 1));
            x.resize(t, crate::corpus::vocab::PAD);
            x
        })
        .collect();
    let logits = decoder_logits(g, store, dims, knowledge, &inputs)?;
    let v = g.shape(logits)[2];
    let logp = g.log_softmax_rows(logits)?;
    let mut out = Vec::with_capacity(targets.len());
    for (i, tg) in targets.iter().enumerate() {
        let picks = tg
            .iter()
            .enumerate()
            .map(|(j, &w)| ((i * t + j) * v + w as usize, -1.0))
            .collect();
        out.push(g.pick_sum(logp, picks)?);
    }
    Ok(out)
}

/// Mean over studies of the per-study summed report NLL, plus each study's
/// term.
pub fn lm_loss(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    vocab: &Vocabulary,
    batch: &Batch,
) -> Result<(Var, Vec<f64>), ModelError> {
    let k = knowledge(g, store, dims, vocab, batch)?;
    let targets: Vec<Vec<u32>> = batch
        .studies
        .iter()
        .map(|s| target_ids(&s.report, vocab, dims.max_gen))
        .collect();
    let terms = sequence_nll(g, store, dims, k, &targets)?;
    let values = terms.iter().map(|&v| g.value(v).item()).collect();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((g.scale(total, 1.0 / terms.len() as f64), values))
}

/// Learning rate for a parameter during Stage 2.
pub fn stage2_lr(name: &str, pretrained: &BTreeSet<String>, lr: &LearningRates) -> f64 {
    if pretrained.contains(name) {
        lr.stage2_pretrained
    } else {
        lr.stage2_fresh
    }
}

/// One forward, backward, and two-group AdamW update on the LM loss.
pub fn finetune_step(
    store: &mut ParamStore,
    opt: &mut AdamW,
    dims: &ModelDims,
    vocab: &Vocabulary,
    batch: &Batch,
    pretrained: &BTreeSet<String>,
    lr: &LearningRates,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let (loss, terms) = lm_loss(&mut g, store, dims, vocab, batch)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        let dump = serde_json::json!({
            "study_ids": batch.studies.iter().map(|s| &s.study_id).collect::<Vec<_>>(),
            "per_study_nll": terms,
        });
        return Err(ModelError::NonFinite {
            what: "stage-2 loss".into(),
            dump: dump.to_string(),
        });
    }
    g.backward(loss)?;
    opt.step(store, &g.param_grads(), |n| stage2_lr(n, pretrained, lr));
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "greedy" {
            return Ok(Self::Greedy);
        }
        match s.strip_prefix("beam:").map(str::parse::<usize>) {
            Some(Ok(k)) if k >= 1 => Ok(Self::Beam(k)),
            _ => Err(format!(
                "expected `greedy` or `beam:K` with K >= 1, got `{s}`"
            )),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Greedy => f.write_str("greedy"),
            Self::Beam(k) => write!(f, "beam:{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutput {
    /// Generated ids, ending with EOS when `stopped_by` is `Eos`.
    pub token_ids: Vec<u32>,
    pub token_logprobs: Vec<f64>,
    pub stopped_by: StopReason,
}

impl GenerationOutput {
    pub fn logprob_sum(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }

    pub fn text(&self, vocab: &Vocabulary) -> String {
        vocab.decode(&self.token_ids).join(" ")
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Knowledge tensor for one study, computed once per generation.
pub fn study_knowledge(
    store: &ParamStore,
    dims: &ModelDims,
    vocab: &Vocabulary,
    study: &Study,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let batch = Batch::from_studies(std::slice::from_ref(study));
    let k = knowledge(&mut g, store, dims, vocab, &batch)?;
    Ok(g.value(k).clone())
}

fn step_logprobs(
    store: &ParamStore,
    dims: &ModelDims,
    know: &Tensor,
    prefixes: &[Vec<u32>],
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut g = Graph::new();
    let mut shape = know.shape().to_vec();
    shape[0] = prefixes.len();
    let data = know.data().repeat(prefixes.len());
    let k = g.constant(Tensor::new(shape, data)?);
    let logits = decode_step(&mut g, store, dims, k, prefixes)?;
    Ok(g.value(logits).rows().map(log_softmax).collect())
}

/// Autoregressive decoding for one study, up to `dims.max_gen` tokens.
pub fn generate(
    store: &ParamStore,
    dims: &ModelDims,
    vocab: &Vocabulary,
    study: &Study,
    mode: DecodeMode,
) -> Result<GenerationOutput, ModelError> {
    let know = study_knowledge(store, dims, vocab, study)?;
    match mode {
        DecodeMode::Greedy => greedy(store, dims, &know),
        DecodeMode::Beam(k) => beam(store, dims, &know, k),
    }
}

fn greedy(
    store: &ParamStore,
    dims: &ModelDims,
    know: &Tensor,
) -> Result<GenerationOutput, ModelError> {
    let mut prefix = vec![BOS];
    let mut out = GenerationOutput {
        token_ids: Vec::new(),
        token_logprobs: Vec::new(),
        stopped_by: StopReason::MaxLen,
    };
    while out.token_ids.len() < dims.max_gen {
        let lp = step_logprobs(store, dims, know, std::slice::from_ref(&prefix))?.remove(0);
        // First maximum wins ties.
        let (tok, &best) =
            lp.iter().enumerate().fold(
                (0, &lp[0]),
                |acc, (i, x)| if *x > *acc.1 { (i, x) } else { acc },
            );
        out.token_ids.push(tok as u32);
        out.token_logprobs.push(best);
        if tok as u32 == EOS {
            out.stopped_by = StopReason::Eos;
            break;
        }
        prefix.push(tok as u32);
    }
    Ok(out)
}

#[derive(Clone)]
struct Hyp {
    ids: Vec<u32>,
    logprobs: Vec<f64>,
    score: f64,
}

fn beam(
    store: &ParamStore,
    dims: &ModelDims,
    know: &Tensor,
    k: usize,
) -> Result<GenerationOutput, ModelError> {
    let mut alive = vec![Hyp {
        ids: Vec::new(),
        logprobs: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..dims.max_gen {
        let prefixes: Vec<Vec<u32>> = alive
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.ids.iter().copied()).collect())
            .collect();
        let lps = step_logprobs(store, dims, know, &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, lp) in lps.iter().enumerate() {
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            cands.extend(
                order
                    .into_iter()
                    .take(k)
                    .map(|t| (alive[hi].score + lp[t], hi, t)),
            );
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (score, hi, t) in cands.into_iter().take(k) {
            let mut h = alive[hi].clone();
            h.ids.push(t as u32);
            h.logprobs.push(lps[hi][t]);
            h.score = score;
            if t as u32 == EOS {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
        let best_finished = finished
            .iter()
            .map(|h| h.score)
            .fold(f64::NEG_INFINITY, f64::max);
        if alive.is_empty() || alive.iter().all(|h| h.score <= best_finished) {
            break;
        }
    }
    let pick = |pool: &[Hyp]| {
        pool.iter()
            .enumerate()
            .max_by(|a, b| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)))
            .map(|(_, h)| h.clone())
    };
    let (best, stopped_by) = match pick(&finished) {
        Some(h) => (h, StopReason::Eos),
        None => (
            pick(&alive).expect("beam keeps at least one hypothesis"),
            StopReason::MaxLen,
        ),
    };
    Ok(GenerationOutput {
        token_ids: best.ids,
        token_logprobs: best.logprobs,
        stopped_by,
    })
}

/// Teacher-forced log-probability of each id in `ids` for one study.
pub fn score_sequence(
    store: &ParamStore,
    dims: &ModelDims,
    vocab: &Vocabulary,
    study: &Study,
    ids: &[u32],
) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new();
    let batch = Batch::from_studies(std::slice::from_ref(study));
    let k = knowledge(&mut g, store, dims, vocab, &batch)?;
    let mut input = vec![BOS];
    input.extend_from_slice(&ids[..ids.len().saturating_sub(1)]);
    let logits = decoder_logits(&mut g, store, dims, k, &[input])?;
    let v = g.shape(logits)[2];
    let lv = g.value(logits);
    Ok(ids
        .iter()
        .enumerate()
        .map(|(t, &w)| log_softmax(&lv.data()[t * v..(t + 1) * v])[w as usize])
        .collect())
}
