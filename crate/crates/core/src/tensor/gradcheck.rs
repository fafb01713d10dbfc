//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward passes, so it stays independent
//! of every adjoint implemented on the tape.

use super::{Graph, Tensor, TensorError, Var};
use crate::params::ParamStore;
use crate::rng::Rng64;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so components whose
    /// true gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
    /// `(tensor, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.coords_checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((name.to_string(), idx, analytic, numeric));
        }
    }
}

fn coords(numel: usize, opts: &GradCheckOptions, rng: &mut Rng64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < numel => {
            let mut all: Vec<usize> = (0..numel).collect();
            rng.shuffle(&mut all);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => (0..numel).collect(),
    }
}

/// Checks d`f`/d`inputs` where `f` maps leaf variables to a scalar.
pub fn check_inputs<E, F>(
    inputs: &[Tensor],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new().with_validation(false);
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new().with_validation(false);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut rng = Rng64::new(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for t in 0..inputs.len() {
        for i in coords(inputs[t].numel(), opts, &mut rng) {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.record(
                &format!("input{t}"),
                i,
                analytic[t].data()[i],
                numeric,
                opts.floor,
            );
        }
    }
    Ok(report)
}

/// Checks d`f`/d(parameters) for a loss built from a [`ParamStore`].
/// Only parameters named in `names` are perturbed.
pub fn check_params<E, F>(
    store: &ParamStore,
    names: &[String],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new().with_validation(false);
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new().with_validation(false);
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let grads = g.param_grads();

    let mut rng = Rng64::new(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for name in names {
        let numel = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?
            .numel();
        for i in coords(numel, opts, &mut rng) {
            let orig = work.get(name).expect("present").data()[i];
            work.get_mut(name).expect("present").data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.get(name).map_or(0.0, |t| t.data()[i]);
            report.record(name, i, analytic, numeric, opts.floor);
        }
    }
    Ok(report)
}
