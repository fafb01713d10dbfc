//! Parameterized building blocks shared by the encoders and the decoder.

use crate::params::ParamStore;
use crate::rng::Rng64;
use crate::tensor::nn::{linear, scaled_dot_attention};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut Rng64,
) {
    store.init_normal(&format!("{name}.w"), &[d_in, d_out], d_in, rng);
    if bias {
        store.init_const(&format!("{name}.b"), &[d_out], 0.0);
    }
}

pub fn apply_linear(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let w = g.param(store, &format!("{name}.w"))?;
    let bname = format!("{name}.b");
    let b = if store.contains(&bname) {
        Some(g.param(store, &bname)?)
    } else {
        None
    };
    linear(g, x, w, b)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.init_const(&format!("{name}.g"), &[d], 1.0);
    store.init_const(&format!("{name}.b"), &[d], 0.0);
}

pub fn apply_layer_norm(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let gain = g.param(store, &format!("{name}.g"))?;
    let bias = g.param(store, &format!("{name}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Single-head attention with query/key/value/output projections.
pub fn init_attention(
    store: &mut ParamStore,
    name: &str,
    d_model: usize,
    d_kv: usize,
    rng: &mut Rng64,
) {
    init_linear(store, &format!("{name}.q"), d_model, d_model, false, rng);
    init_linear(store, &format!("{name}.k"), d_kv, d_model, false, rng);
    init_linear(store, &format!("{name}.v"), d_kv, d_model, false, rng);
    init_linear(store, &format!("{name}.o"), d_model, d_model, true, rng);
}

/// `x: [.., Lq, d_model]`, `kv: [.., Lk, d_kv]`; `bias` must match the
/// trailing dims of the `[.., Lq, Lk]` scores.
pub fn apply_attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    kv: Var,
    bias: Option<&Tensor>,
) -> Result<Var, TensorError> {
    let q = apply_linear(g, store, &format!("{name}.q"), x)?;
    let k = apply_linear(g, store, &format!("{name}.k"), kv)?;
    let v = apply_linear(g, store, &format!("{name}.v"), kv)?;
    let a = scaled_dot_attention(g, q, k, v, bias)?;
    apply_linear(g, store, &format!("{name}.o"), a)
}

pub fn init_ffn(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    hidden: usize,
    d_out: usize,
    rng: &mut Rng64,
) {
    init_linear(store, &format!("{name}.1"), d, hidden, true, rng);
    init_linear(store, &format!("{name}.2"), hidden, d_out, true, rng);
}

/// Affine, GELU, affine.
pub fn apply_ffn(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let h = apply_linear(g, store, &format!("{name}.1"), x)?;
    let h = g.gelu(h);
    apply_linear(g, store, &format!("{name}.2"), h)
}

/// Looks up rows of an embedding table: `ids` of length `b * l` become
/// `[b, l, d]`.
pub fn embed(
    g: &mut Graph,
    table: Var,
    ids: &[u32],
    b: usize,
    l: usize,
) -> Result<Var, TensorError> {
    let d = g.shape(table)[1];
    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let e = g.select(table, &rows)?;
    g.reshape(e, &[b, l, d])
}

/// First `l` rows of a positional table, broadcast over the batch.
pub fn add_positions(g: &mut Graph, x: Var, table: Var, l: usize) -> Result<Var, TensorError> {
    let rows: Vec<usize> = (0..l).collect();
    let pos = g.select(table, &rows)?;
    g.add_broadcast(x, pos)
}
