//! Composite layers built from tape primitives.

use super::{Graph, Tensor, TensorError, Var};

/// Score bias for disallowed attention positions.
pub const MASKED: f64 = -1e9;

/// Additive score bias with [`MASKED`] wherever `disallowed` is true.
pub fn mask_bias(shape: &[usize], disallowed: &[bool]) -> Result<Tensor, TensorError> {
    let data = disallowed
        .iter()
        .map(|&d| if d { MASKED } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// `[len, len]` bias that blocks attention to later positions.
pub fn causal_bias(len: usize) -> Tensor {
    let disallowed: Vec<bool> = (0..len * len).map(|i| i % len > i / len).collect();
    mask_bias(&[len, len], &disallowed).expect("square")
}

/// Attention weights `softmax(q·kᵀ/√d + bias)`, shaped `[.., Lq, Lk]`.
///
/// `bias` must match the trailing dimensions of the score tensor.
pub fn attention_weights(
    g: &mut Graph,
    q: Var,
    k: Var,
    bias: Option<&Tensor>,
) -> Result<Var, TensorError> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sk.len() < 2 || sk[sk.len() - 2] == 0 {
        return Err(TensorError::EmptyKeys);
    }
    if sq.last() != sk.last() {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: sq,
            right: sk,
        });
    }
    let d = *sq.last().unwrap_or(&1) as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / d.sqrt());
    if let Some(bias) = bias {
        let b = g.constant(bias.clone());
        scores = g.add_broadcast(scores, b)?;
    }
    g.softmax_rows(scores, 1.0)
}

/// Scaled dot-product attention `softmax(q·kᵀ/√d + bias)·v`.
///
/// `q: [.., Lq, d]`, `k: [.., Lk, d]`, `v: [.., Lk, dv]`. An empty key set is
/// an error; callers route around it.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<&Tensor>,
) -> Result<Var, TensorError> {
    let w = attention_weights(g, q, k, bias)?;
    g.matmul(w, v)
}

/// `x·w + b` with `w: [in, out]` shared across leading axes.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_broadcast(y, b),
        None => Ok(y),
    }
}
