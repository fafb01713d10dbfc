//! Define-by-run tape.
//!
//! Every op appends one node holding its output value and enough saved state
//! to run its adjoint. Nodes are appended in evaluation order, so walking the
//! tape backwards visits each node once, after all of its consumers.

use std::collections::HashMap;

use super::{Tensor, TensorError};
use crate::params::ParamStore;

/// Clamp applied before taking logs of probabilities.
pub const LOG_CLAMP: f64 = 1e-12;
/// Guard added to row norms in [`Graph::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` matches the trailing dimensions of `a`.
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    Softmax {
        x: Var,
        temperature: f64,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        counts: Vec<usize>,
    },
    CrossEntropy {
        target: Tensor,
        q: Var,
    },
    PickSum {
        x: Var,
        picks: Vec<(usize, f64)>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations plus accumulated leaf gradients.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, Var>,
    validate: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            validate: cfg!(debug_assertions),
        }
    }

    /// Enables the row-stochastic checks in [`Graph::cross_entropy_rows`].
    pub fn with_validation(mut self, on: bool) -> Self {
        self.validate = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a named parameter once per graph; repeated lookups return
    /// the same leaf so fan-out gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every parameter registered through [`Graph::param`].
    pub fn param_grads(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.grad(v).map(|g| (name.clone(), g)))
            .collect()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape matches value")
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let period = bv.numel().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % period])
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `out.flat[i] = src.flat[index[i]]`, shaped `shape`.
    pub fn gather(
        &mut self,
        src: Var,
        index: Vec<usize>,
        shape: &[usize],
    ) -> Result<Var, TensorError> {
        let sv = self.value(src);
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(TensorError::InvalidShape {
                op: "gather",
                reason: format!("{} indices for output shape {shape:?}", index.len()),
            });
        }
        let n = sv.numel();
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            if i >= n {
                return Err(TensorError::IndexOutOfRange { index: i, len: n });
            }
            data.push(sv.data()[i]);
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::Gather { src, index }, rg))
    }

    /// Selects entries along the first axis.
    pub fn select(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "select",
                reason: "scalar has no rows".into(),
            });
        }
        let stride: usize = shape[1..].iter().product();
        let mut index = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= shape[0] {
                return Err(TensorError::IndexOutOfRange {
                    index: r,
                    len: shape[0],
                });
            }
            index.extend(r * stride..(r + 1) * stride);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.gather(a, index, &out_shape)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(TensorError::InvalidShape {
                op: "permute",
                reason: format!("axes {axes:?} for shape {shape:?}"),
            });
        }
        let rank = shape.len();
        let mut in_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let numel: usize = shape.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut coord = vec![0usize; rank];
        for _ in 0..numel {
            index.push(
                coord
                    .iter()
                    .zip(axes)
                    .map(|(&c, &ax)| c * in_strides[ax])
                    .sum(),
            );
            for d in (0..rank).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(a, index, &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                reason: format!("rank {rank} < 2"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != *tail {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    // ---------------------------------------------------------------- products

    /// Matrix product over the last two axes. Leading (batch) axes must be
    /// equal, or one operand may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (batch_shape, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), true, true)
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(shape_err("matmul", &sa, &sb));
        };
        let batch: usize = batch_shape.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for t in 0..batch {
                let ao = if a_batched { t * m * k } else { 0 };
                let bo = if b_batched { t * k * n } else { 0 };
                mm(
                    &ad[ao..ao + m * k],
                    &bd[bo..bo + k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
            rg,
        ))
    }

    /// 2-D convolution. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sb != [sw[0]] || stride == 0 {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let geo = ConvGeometry::new(&sx, &sw, stride, pad)?;
        let mut out = vec![0.0; geo.n * geo.o * geo.ho * geo.wo];
        {
            let (xd, wd, bd) = (
                self.value(x).data(),
                self.value(w).data(),
                self.value(b).data(),
            );
            let (ckk, hw) = (geo.c * geo.kh * geo.kw, geo.ho * geo.wo);
            let mut cols = vec![0.0; ckk * hw];
            for n in 0..geo.n {
                geo.im2col(xd, n, &mut cols);
                mm(
                    wd,
                    &cols,
                    &mut out[n * geo.o * hw..(n + 1) * geo.o * hw],
                    geo.o,
                    ckk,
                    hw,
                );
            }
            for (i, o) in out.iter_mut().enumerate() {
                *o += bd[(i / hw) % geo.o];
            }
        }
        let shape = vec![geo.n, geo.o, geo.ho, geo.wo];
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- normalizers

    /// Row-wise `softmax(x / temperature)` over the last axis.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var, TensorError> {
        if temperature.is_nan() || temperature <= 0.0 || !temperature.is_finite() {
            return Err(TensorError::InvalidParameter {
                op: "softmax_rows",
                reason: format!("temperature must be positive, got {temperature}"),
            });
        }
        let xv = self.value(x);
        if xv.rank() == 0 || xv.last_dim() == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax_rows",
                reason: format!("empty last axis in {:?}", xv.shape()),
            });
        }
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut z = 0.0;
            for &v in row {
                let e = ((v - max) / temperature).exp();
                z += e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|e| *e /= z);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, temperature }, rg))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.rank() == 0 || xv.last_dim() == 0 {
            return Err(TensorError::InvalidShape {
                op: "log_softmax_rows",
                reason: format!("empty last axis in {:?}", xv.shape()),
            });
        }
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(TensorError::InvalidParameter {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.numel() / d.max(1));
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales each row of the last axis to unit Euclidean norm. Zero rows stay
    /// zero.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                log::warn!("l2_normalize: zero-norm row left as zero");
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / (n + NORM_EPS)));
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over the middle axis of `x: [B, L, d]` restricted to positions
    /// where `mask` (length `B * L`) is true. Rows with no valid position
    /// pool to zero.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(TensorError::InvalidShape {
                op: "masked_mean",
                reason: format!("x {:?} with mask of length {}", s, mask.len()),
            });
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; b * d];
        let mut counts = vec![0; b];
        for i in 0..b {
            for j in 0..l {
                if mask[i * l + j] {
                    counts[i] += 1;
                    let src = &xv.data()[(i * l + j) * d..(i * l + j + 1) * d];
                    out[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(o, v)| *o += v);
                }
            }
            if counts[i] > 0 {
                let c = counts[i] as f64;
                out[i * d..(i + 1) * d].iter_mut().for_each(|o| *o /= c);
            }
        }
        let out = Tensor::new(vec![b, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                counts,
            },
            rg,
        ))
    }

    /// `-(1/n) Σ_i Σ_j p_ij log q_ij` for row-stochastic `target` (constant)
    /// and `q` of shape `[n, c]`.
    pub fn cross_entropy_rows(&mut self, target: &Tensor, q: Var) -> Result<Var, TensorError> {
        let qv = self.value(q);
        if target.shape() != qv.shape() || qv.rank() != 2 {
            return Err(shape_err("cross_entropy_rows", target.shape(), qv.shape()));
        }
        if self.validate {
            for (name, t) in [("target", target), ("prediction", qv)] {
                for (row, r) in t.rows().enumerate() {
                    let sum: f64 = r.iter().sum();
                    if (sum - 1.0).abs() > 1e-5 {
                        return Err(TensorError::NotStochastic {
                            op: "cross_entropy_rows",
                            which: name,
                            row,
                            sum,
                        });
                    }
                }
            }
        }
        let n = qv.shape()[0].max(1) as f64;
        let loss = -target
            .data()
            .iter()
            .zip(qv.data())
            .filter(|(p, _)| **p != 0.0)
            .map(|(p, qq)| p * qq.max(LOG_CLAMP).ln())
            .sum::<f64>()
            / n;
        let rg = self.rg(q);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                target: target.clone(),
                q,
            },
            rg,
        ))
    }

    /// `Σ w · x.flat[i]` over `(i, w)` picks.
    pub fn pick_sum(&mut self, x: Var, picks: Vec<(usize, f64)>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let mut s = 0.0;
        for &(i, w) in &picks {
            let v = xv.data().get(i).ok_or(TensorError::IndexOutOfRange {
                index: i,
                len: xv.numel(),
            })?;
            s += w * v;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::PickSum { x, picks }, rg))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates d`loss`/d`leaf` into every leaf that requires a gradient.
    /// Calling it again without [`Graph::zero_grad`] adds to the stored
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = local[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(g) => g.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gout),
                }
                continue;
            }
            self.propagate(i, &gout, &mut local);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = local[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                acc(*a, &mut |g| {
                    g.iter_mut()
                        .zip(gout)
                        .zip(bv)
                        .for_each(|((x, y), z)| *x += y * z)
                });
                acc(*b, &mut |g| {
                    g.iter_mut()
                        .zip(gout)
                        .zip(av)
                        .for_each(|((x, y), z)| *x += y * z)
                });
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| {
                    let p = g.len().max(1);
                    for (j, y) in gout.iter().enumerate() {
                        g[j % p] += y;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| {
                g.iter_mut().zip(gout).for_each(|(x, y)| *x += c * y)
            }),
            Op::Reshape(a) => acc(*a, &mut |g| add_into(g, gout)),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                acc(*a, &mut |g| {
                    for t in 0..*batch {
                        let ao = if *a_batched { t * m * k } else { 0 };
                        let bo = if *b_batched { t * k * n } else { 0 };
                        mm_a_bt(
                            &gout[t * m * n..(t + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut g[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for t in 0..*batch {
                        let ao = if *a_batched { t * m * k } else { 0 };
                        let bo = if *b_batched { t * k * n } else { 0 };
                        mm_at_b(
                            &av[ao..ao + m * k],
                            &gout[t * m * n..(t + 1) * m * n],
                            &mut g[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Gather { src, index } => acc(*src, &mut |g| {
                for (&ix, y) in index.iter().zip(gout) {
                    g[ix] += y;
                }
            }),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(*p, &mut |g| add_into(g, &gout[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Softmax { x, temperature } => {
                let y = &node.value;
                let d = y.last_dim();
                acc(*x, &mut |g| {
                    for (r, yr) in y.rows().enumerate() {
                        let gr = &gout[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            g[r * d + j] += yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                acc(*x, &mut |g| {
                    for (r, yr) in y.rows().enumerate() {
                        let gr = &gout[r * d..(r + 1) * d];
                        let total: f64 = gr.iter().sum();
                        for j in 0..d {
                            g[r * d + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.nodes[gain.0].value.data();
                acc(*x, &mut |g| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let o = r * d;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gout[o + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[o + j];
                        }
                        for j in 0..d {
                            let dh = gout[o + j] * gv[j];
                            g[o + j] += rs / d as f64 * (d as f64 * dh - s1 - xhat[o + j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (j, (y, h)) in gout.iter().zip(xhat).enumerate() {
                        g[j % d] += y * h;
                    }
                });
                acc(*bias, &mut |g| {
                    for (j, y) in gout.iter().enumerate() {
                        g[j % d] += y;
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let xv = &self.nodes[x.0].value;
                let d = xv.last_dim();
                acc(*x, &mut |g| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let s = nrm + NORM_EPS;
                        let xr = xv.row(r);
                        let gr = &gout[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            let mut v = gr[j] / s;
                            if nrm > 0.0 {
                                v -= xr[j] * dot / (nrm * s * s);
                            }
                            g[r * d + j] += v;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.nodes[a.0].value.data();
                acc(*a, &mut |g| {
                    g.iter_mut()
                        .zip(gout)
                        .zip(av)
                        .for_each(|((x, y), &z)| *x += y * gelu_grad(z))
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gout[0])),
            Op::Mean(a) => acc(*a, &mut |g| {
                let n = g.len().max(1) as f64;
                g.iter_mut().for_each(|x| *x += gout[0] / n)
            }),
            Op::MaskedMean { x, mask, counts } => {
                let s = self.nodes[x.0].value.shape();
                let (l, d) = (s[1], s[2]);
                acc(*x, &mut |g| {
                    for (pos, &on) in mask.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let b = pos / l;
                        let c = counts[b] as f64;
                        for j in 0..d {
                            g[pos * d + j] += gout[b * d + j] / c;
                        }
                    }
                });
            }
            Op::CrossEntropy { target, q } => {
                let qv = self.nodes[q.0].value.data();
                let n = self.nodes[q.0].value.shape()[0].max(1) as f64;
                acc(*q, &mut |g| {
                    for ((x, &p), &qq) in g.iter_mut().zip(target.data()).zip(qv) {
                        if p != 0.0 && qq > LOG_CLAMP {
                            *x -= gout[0] * p / (n * qq);
                        }
                    }
                });
            }
            Op::PickSum { x, picks } => acc(*x, &mut |g| {
                for &(ix, w) in picks {
                    g[ix] += gout[0] * w;
                }
            }),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (sx, sw) = (self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape());
                let geo = ConvGeometry::new(sx, sw, *stride, *pad).expect("validated on forward");
                let (xd, wd) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                let (ckk, hw) = (geo.c * geo.kh * geo.kw, geo.ho * geo.wo);
                let mut cols = vec![0.0; ckk * hw];
                acc(*x, &mut |g| {
                    for n in 0..geo.n {
                        cols.iter_mut().for_each(|v| *v = 0.0);
                        mm_at_b(
                            wd,
                            &gout[n * geo.o * hw..(n + 1) * geo.o * hw],
                            &mut cols,
                            geo.o,
                            ckk,
                            hw,
                        );
                        geo.col2im(&cols, n, g);
                    }
                });
                acc(*w, &mut |g| {
                    for n in 0..geo.n {
                        geo.im2col(xd, n, &mut cols);
                        mm_a_bt(
                            &gout[n * geo.o * hw..(n + 1) * geo.o * hw],
                            &cols,
                            g,
                            geo.o,
                            hw,
                            ckk,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for (i, y) in gout.iter().enumerate() {
                        g[(i / (geo.ho * geo.wo)) % geo.o] += y;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// `c += a · b` with `a: [m, k]`, `b: [k, n]`.
fn mm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut()
                .zip(brow)
                .for_each(|(cv, bv)| *cv += aip * bv);
        }
    }
}

/// `c += g · bᵀ` with `g: [m, n]`, `b: [k, n]`, `c: [m, k]`.
fn mm_a_bt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ · g` with `a: [m, k]`, `g: [m, n]`, `c: [k, n]`.
fn mm_at_b(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            c[p * n..(p + 1) * n]
                .iter_mut()
                .zip(grow)
                .for_each(|(cv, gv)| *cv += aip * gv);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<Self, TensorError> {
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", sx, sw));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Unfolds image `n` of `x` into `cols: [c * kh * kw, ho * wo]`, with
    /// zeros in the padding.
    fn im2col(&self, x: &[f64], n: usize, cols: &mut [f64]) {
        self.visit(n, |ci, xi| cols[ci] = xi.map_or(0.0, |i| x[i]));
    }

    /// Adjoint of [`Self::im2col`]: scatters `cols` back onto image `n`.
    fn col2im(&self, cols: &[f64], n: usize, g: &mut [f64]) {
        self.visit(n, |ci, xi| {
            if let Some(i) = xi {
                g[i] += cols[ci];
            }
        });
    }

    fn visit(&self, n: usize, mut f: impl FnMut(usize, Option<usize>)) {
        let hw = self.ho * self.wo;
        for ic in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ic * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let inside = iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w;
                            let xi = inside.then(|| {
                                ((n * self.c + ic) * self.h + iy as usize) * self.w + ix as usize
                            });
                            f(row * hw + oy * self.wo + ox, xi);
                        }
                    }
                }
            }
        }
    }
}
