//! End-to-end acceptance checks, one line per criterion.
//!
//! Run a subset by passing criterion numbers: `cargo test --test acceptance -- 3 8`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use mvrg::config::RunConfig;
use mvrg::corpus::{self, synth_corpus, Batch, Study, SynthSpec};
use mvrg::encoders::{self, ProjectedPair, TextFeatures};
use mvrg::kgrg::{self, DecodeMode};
use mvrg::layers::LN_EPS;
use mvrg::metrics::{self, GreenCounts, ObservationLabels, OBSERVATIONS};
use mvrg::mvcl;
use mvrg::params::ParamStore;
use mvrg::rng::Rng64;
use mvrg::tensor::gradcheck::{check_inputs, check_params, GradCheckOptions, GradCheckReport};
use mvrg::tensor::nn::{causal_bias, scaled_dot_attention};
use mvrg::tensor::{Graph, Tensor, TensorError, Var};
use mvrg::train::{finetune, pretrain, FinetuneInit, TrainData, TRAIN_LOG, VAL_LOG};
use mvrg::ModelError;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($fmt)+)),
        }
    };
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradients),
        ("distribution contracts", distributions),
        ("closed-form loss oracles", closed_forms),
        ("fusion properties", fusion),
        ("bridge contract", bridge),
        ("end-to-end overfit", overfit),
        ("indication ablation direction", ablation),
        ("metric oracles", metric_oracles),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// ---------------------------------------------------------------- 1

fn randn(shape: &[usize], rng: &mut Rng64) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn stochastic(rows: usize, cols: usize, rng: &mut Rng64) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let r: Vec<f64> = (0..cols).map(|_| rng.uniform() + 0.05).collect();
        let s: f64 = r.iter().sum();
        data.extend(r.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Random weighted sum, so every output coordinate gets its own upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let w = g.constant(Tensor::randn(g.shape(y), 1.0, &mut Rng64::new(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>;

fn op_instance(op: &str, rng: &mut Rng64) -> (Vec<Tensor>, OpFn) {
    let seed = rng.next_u64();
    let (r, c) = (rng.range_inclusive(1, 4), rng.range_inclusive(2, 5));
    let unary = |f: fn(&mut Graph, Var) -> Result<Var, TensorError>| -> OpFn {
        Box::new(move |g, v| {
            let y = f(g, v[0])?;
            project(g, y, seed)
        })
    };
    match op {
        "add" | "sub" | "mul" => {
            let op = op.to_string();
            let f: OpFn = Box::new(move |g, v| {
                let y = match op.as_str() {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                project(g, y, seed)
            });
            (vec![randn(&[r, c], rng), randn(&[r, c], rng)], f)
        }
        "add_broadcast" => (
            vec![randn(&[2, r, c], rng), randn(&[r, c], rng)],
            Box::new(move |g, v| {
                let y = g.add_broadcast(v[0], v[1])?;
                project(g, y, seed)
            }),
        ),
        "scale" => (
            vec![randn(&[r, c], rng)],
            unary(|g, x| Ok(g.scale(x, -1.7))),
        ),
        "gelu" => (vec![randn(&[r, c], rng)], unary(|g, x| Ok(g.gelu(x)))),
        "reshape" => (
            vec![randn(&[2, 6], rng)],
            unary(|g, x| g.reshape(x, &[3, 4])),
        ),
        "transpose" => (vec![randn(&[r, c], rng)], unary(|g, x| g.transpose(x))),
        "permute" => (
            vec![randn(&[2, 3, 4], rng)],
            unary(|g, x| g.permute(x, &[2, 0, 1])),
        ),
        "select" => (
            vec![randn(&[4, c], rng)],
            unary(|g, x| g.select(x, &[3, 0, 3, 1])),
        ),
        "gather" => {
            let index: Vec<usize> = (0..6).map(|_| rng.below(r * c)).collect();
            (
                vec![randn(&[r, c], rng)],
                Box::new(move |g, v| {
                    let y = g.gather(v[0], index.clone(), &[2, 3])?;
                    project(g, y, seed)
                }),
            )
        }
        "concat" => (
            vec![randn(&[r, c], rng), randn(&[2, c], rng)],
            Box::new(move |g, v| {
                let y = g.concat(&[v[0], v[1]])?;
                project(g, y, seed)
            }),
        ),
        "matmul" => {
            let k = rng.range_inclusive(1, 4);
            (
                vec![randn(&[r, k], rng), randn(&[k, c], rng)],
                Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    project(g, y, seed)
                }),
            )
        }
        "matmul_batched" => {
            let k = rng.range_inclusive(1, 4);
            (
                vec![
                    randn(&[2, r, k], rng),
                    randn(&[2, k, c], rng),
                    randn(&[k, c], rng),
                ],
                Box::new(move |g, v| {
                    let a = g.matmul(v[0], v[1])?;
                    let b = g.matmul(v[0], v[2])?;
                    let y = g.add(a, b)?;
                    project(g, y, seed)
                }),
            )
        }
        "conv2d" => {
            let (stride, pad) = [(1, 1), (2, 1), (2, 0), (1, 0)][rng.below(4)];
            (
                vec![
                    randn(&[2, 2, 5, 5], rng),
                    randn(&[3, 2, 3, 3], rng),
                    randn(&[3], rng),
                ],
                Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                    project(g, y, seed)
                }),
            )
        }
        "softmax_rows" => {
            let tau = 0.3 + rng.uniform();
            (
                vec![randn(&[r, c], rng)],
                Box::new(move |g, v| {
                    let y = g.softmax_rows(v[0], tau)?;
                    project(g, y, seed)
                }),
            )
        }
        "log_softmax_rows" => (
            vec![randn(&[r, c], rng)],
            unary(|g, x| g.log_softmax_rows(x)),
        ),
        "layer_norm" => (
            vec![
                randn(&[r, c + 1], rng),
                randn(&[c + 1], rng),
                randn(&[c + 1], rng),
            ],
            Box::new(move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], LN_EPS)?;
                project(g, y, seed)
            }),
        ),
        "l2_normalize" => (
            vec![randn(&[r, c], rng)],
            unary(|g, x| Ok(g.l2_normalize(x))),
        ),
        "sum" => (vec![randn(&[r, c], rng)], Box::new(|g, v| Ok(g.sum(v[0])))),
        "mean" => (vec![randn(&[r, c], rng)], Box::new(|g, v| Ok(g.mean(v[0])))),
        "masked_mean" => {
            let mask: Vec<bool> = (0..2 * r).map(|_| rng.bernoulli(0.6)).collect();
            (
                vec![randn(&[2, r, c], rng)],
                Box::new(move |g, v| {
                    let y = g.masked_mean(v[0], &mask)?;
                    project(g, y, seed)
                }),
            )
        }
        "cross_entropy_rows" => {
            let p = stochastic(r, c, rng);
            (
                vec![randn(&[r, c], rng)],
                Box::new(move |g, v| {
                    let q = g.softmax_rows(v[0], 0.5)?;
                    g.cross_entropy_rows(&p, q)
                }),
            )
        }
        "pick_sum" => {
            let picks: Vec<(usize, f64)> =
                (0..3).map(|_| (rng.below(r * c), rng.normal())).collect();
            (
                vec![randn(&[r, c], rng)],
                Box::new(move |g, v| g.pick_sum(v[0], picks.clone())),
            )
        }
        "attention" => {
            let l = rng.range_inclusive(2, 4);
            let causal = rng.bernoulli(0.5);
            (
                vec![
                    randn(&[2, l, c], rng),
                    randn(&[2, l, c], rng),
                    randn(&[2, l, c], rng),
                ],
                Box::new(move |g, v| {
                    let bias = causal.then(|| causal_bias(l));
                    let y = scaled_dot_attention(g, v[0], v[1], v[2], bias.as_ref())?;
                    project(g, y, seed)
                }),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

const OPS: [&str; 25] = [
    "add",
    "sub",
    "mul",
    "add_broadcast",
    "scale",
    "gelu",
    "reshape",
    "transpose",
    "permute",
    "select",
    "gather",
    "concat",
    "matmul",
    "matmul_batched",
    "conv2d",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "l2_normalize",
    "sum",
    "mean",
    "masked_mean",
    "cross_entropy_rows",
    "pick_sum",
    "attention",
];

const INSTANCES: usize = 20;

fn composed_opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        floor: 1e-4,
        max_coords: Some(3),
        seed,
    }
}

fn with_indications(studies: &[Study], present: &[bool]) -> Vec<Study> {
    studies
        .iter()
        .zip(present)
        .map(|(s, &p)| Study {
            indication: p.then(|| format!("{}-year-old female with fever", 40 + s.study_id.len())),
            ..s.clone()
        })
        .collect()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng64::new(101);
    let per_op = GradCheckOptions::default();
    let mut worst_op = (0.0, "");
    for op in OPS {
        for _ in 0..INSTANCES {
            let (inputs, f) = op_instance(op, &mut rng);
            let r = check_inputs::<TensorError, _>(&inputs, f, &per_op)
                .map_err(|e| format!("{op}: {e}"))?;
            ensure!(
                r.max_rel_err < 1e-4,
                "{op}: rel err {:.2e} at {:?}",
                r.max_rel_err,
                r.worst
            );
            if r.max_rel_err > worst_op.0 {
                worst_op = (r.max_rel_err, op);
            }
        }
    }

    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, r: GradCheckReport| -> Result<(), String> {
        ensure!(
            r.max_rel_err < 1e-3,
            "{name}: rel err {:.2e} at {:?}",
            r.max_rel_err,
            r.worst
        );
        let w = worst.entry(name).or_default();
        *w = w.max(r.max_rel_err);
        Ok(())
    };
    let dims = tiny_dims();
    for i in 0..INSTANCES as u64 {
        let counts: Vec<usize> = (0..rng.range_inclusive(2, 4))
            .map(|_| rng.range_inclusive(1, 3))
            .collect();
        let mut studies: Vec<Study> = counts
            .iter()
            .enumerate()
            .map(|(j, &m)| blank_study(&format!("s{j}"), m, 4, "r"))
            .collect();
        if !studies.iter().any(Study::is_multi_view) {
            studies[0] = blank_study("s0", 2, 4, "r");
        }
        let batch = Batch::from_studies(&studies);
        let x = randn(&[batch.m_imgs(), 5], &mut rng);
        let r = check_inputs(
            &[x],
            |g, v| {
                let n = g.l2_normalize(v[0]);
                match mvcl::mpc_distributions(g, n, &batch, 0.5)? {
                    Some(d) => mvcl::mpc_loss(g, &d),
                    None => Ok(g.sum(n)),
                }
            },
            &GradCheckOptions {
                max_coords: None,
                ..composed_opts(i)
            },
        )
        .map_err(|e| e.to_string())?;
        note("L_MPC", r)?;

        let b = rng.range_inclusive(2, 4);
        let reports: Vec<String> = (0..b).map(|_| format!("r{}", rng.below(2))).collect();
        let refs: Vec<&str> = reports.iter().map(String::as_str).collect();
        let r = check_inputs(
            &[randn(&[b, 4], &mut rng), randn(&[b, 4], &mut rng)],
            |g, x| {
                let (a, c) = (g.l2_normalize(x[0]), g.l2_normalize(x[1]));
                Ok::<_, TensorError>(mvcl::instance_alignment_loss(g, a, c, &refs, 0.5)?.0)
            },
            &GradCheckOptions {
                max_coords: None,
                ..composed_opts(i)
            },
        )
        .map_err(|e| e.to_string())?;
        note("L_G", r)?;

        let l = 5;
        let content: Vec<bool> = (0..2 * l)
            .map(|j| j % l != 0 && rng.bernoulli(0.7))
            .collect();
        let r = check_inputs(
            &[randn(&[2, l, 4], &mut rng), randn(&[2, 3, 4], &mut rng)],
            |g, x| {
                let pp = ProjectedPair {
                    vis: x[1],
                    txt: x[0],
                    vis_global: x[1],
                    txt_global: x[0],
                };
                let text = TextFeatures {
                    tokens: x[0],
                    mask: content.clone(),
                    content: content.clone(),
                    b: 2,
                    l,
                };
                mvcl::token_alignment_loss(g, &pp, &text, 0.5)
            },
            &GradCheckOptions {
                max_coords: None,
                ..composed_opts(i)
            },
        )
        .map_err(|e| e.to_string())?;
        note("L_L", r)?;

        let (studies, vocab) = synth(3, 8, 200 + i);
        let present: Vec<bool> = (0..3).map(|_| rng.bernoulli(0.5)).collect();
        let batch = Batch::from_studies(&with_indications(&studies, &present));
        let mut store = mvcl::init_stage1(&dims, vocab.len(), i);
        let s1_names: Vec<String> = store.names().cloned().collect();
        let r = check_params(
            &store,
            &s1_names,
            |g, s| {
                Ok::<_, ModelError>(
                    mvcl::stage1_forward(g, s, &dims, &vocab, &batch, 0.5, 0.5)?.total,
                )
            },
            &composed_opts(i),
        )
        .map_err(|e| e.to_string())?;
        note("L_pretrain", r)?;

        kgrg::init_stage2(&mut store, &dims, vocab.len(), i);
        // Non-zero bridge values so their gradients are exercised too.
        for (name, t) in store.clone().iter() {
            if name.ends_with(".values") || name.ends_with(".v.w") {
                store.insert(name.clone(), Tensor::randn(t.shape(), 0.3, &mut rng));
            }
        }
        let all: Vec<String> = store.names().cloned().collect();
        let r = check_params(
            &store,
            &all,
            |g, s| Ok::<_, ModelError>(kgrg::lm_loss(g, s, &dims, &vocab, &batch)?.0),
            &composed_opts(i),
        )
        .map_err(|e| e.to_string())?;
        note("L_LM", r)?;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s, limit 60s");
    let composed: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(format!(
        "{} ops x {INSTANCES} instances, worst op {} {:.1e}; composed worst {}; {secs:.1}s",
        OPS.len(),
        worst_op.1,
        worst_op.0,
        composed.join(", ")
    ))
}

// ---------------------------------------------------------------- 2

fn check_stochastic(name: &str, t: &Tensor) -> Result<(), String> {
    for (i, r) in t.rows().enumerate() {
        let s: f64 = r.iter().sum();
        ensure!((s - 1.0).abs() < 1e-5, "{name} row {i} sums to {s}");
        ensure!(
            r.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)),
            "{name} row {i} leaves [0, 1]"
        );
    }
    Ok(())
}

fn distributions() -> Outcome {
    let dims = tiny_dims();
    let (pool, vocab) = synth_corpus(&SynthSpec {
        n_studies: 48,
        view_count_range: (1, 4),
        image_size: 8,
        seed: 31,
        ..SynthSpec::default()
    });
    let store = mvcl::init_stage1(&dims, vocab.len(), 3);
    let mut rng = Rng64::new(32);
    let mut seen_m = [0usize; 5];
    let mut shared_reports = 0;
    for _ in 0..100 {
        let b = rng.range_inclusive(1, 8);
        let mut studies: Vec<Study> = (0..b)
            .map(|_| pool[rng.below(pool.len())].clone())
            .collect();
        for s in &mut studies {
            let m = rng.range_inclusive(1, 4);
            s.views = (0..m)
                .map(|_| s.views[rng.below(s.views.len())].clone())
                .collect();
            s.anchor_index = rng.below(m);
            seen_m[m] += 1;
        }
        let batch = Batch::from_studies(&studies);
        let m_imgs: usize = studies.iter().map(|s| s.views.len()).sum();
        let k: usize = studies
            .iter()
            .map(|s| s.views.len())
            .filter(|&m| m > 1)
            .sum();
        ensure!(
            batch.m_imgs() == m_imgs && batch.k() == k,
            "K/M_imgs {} {} vs recount {k} {m_imgs}",
            batch.k(),
            batch.m_imgs()
        );

        let mut g = Graph::new();
        let out = mvcl::stage1_forward(&mut g, &store, &dims, &vocab, &batch, 0.5, 0.5)
            .map_err(|e| e.to_string())?;
        check_stochastic("q_v2t", g.value(out.align.q_v2t))?;
        check_stochastic("q_t2v", g.value(out.align.q_t2v))?;
        check_stochastic("p_g", &out.align.p_g)?;
        for i in 0..b {
            for j in 0..b {
                let same = studies[i].report == studies[j].report;
                shared_reports += (same && i != j) as usize;
                ensure!(
                    (out.align.p_g.data()[i * b + j] != 0.0) == same,
                    "p_g support disagrees with report equality"
                );
            }
        }
        match &out.mpc {
            None => ensure!(k < 2, "no MPC distributions with K = {k}"),
            Some(d) => {
                ensure!(
                    g.shape(d.q) == [k, k - 1] && d.p.shape() == [k, k - 1],
                    "q/p shape for K = {k}"
                );
                check_stochastic("q", g.value(d.q))?;
                check_stochastic("p", &d.p)?;
                for (r, &(si, _)) in d.p.rows().zip(&d.rows) {
                    let m = studies[si].views.len();
                    let nz: Vec<f64> = r.iter().copied().filter(|&v| v != 0.0).collect();
                    ensure!(
                        nz.len() == m - 1,
                        "p row has {} non-zeros, m = {m}",
                        nz.len()
                    );
                    ensure!(nz.iter().all(|&v| v == nz[0]), "p row non-zeros differ");
                }
            }
        }
    }
    ensure!(
        seen_m[1..].iter().all(|&c| c > 0),
        "view counts not all exercised: {seen_m:?}"
    );
    Ok(format!(
        "100 batches, view counts 1..4 seen {:?}, {shared_reports} shared-report pairs",
        &seen_m[1..]
    ))
}

// ---------------------------------------------------------------- 3

fn closed_forms() -> Outcome {
    let mut g = Graph::new();
    let e = |i: usize| {
        let mut v = vec![0.0; 3];
        v[i] = 1.0;
        v
    };
    let globals = g.constant(Tensor::from_rows(&[e(0), e(0), e(1), e(1)]).unwrap());
    let batch = Batch::from_studies(&[blank_study("a", 2, 4, "x"), blank_study("b", 2, 4, "y")]);
    let d = mvcl::mpc_distributions(&mut g, globals, &batch, 0.5)
        .map_err(|e| e.to_string())?
        .ok_or("no MPC")?;
    let mpc = mvcl::mpc_loss(&mut g, &d).map_err(|e| e.to_string())?;
    let mpc = g.value(mpc).item();
    let want_mpc = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
    ensure!(
        (mpc - 0.2395).abs() < 1e-3 && (mpc - want_mpc).abs() < 1e-9,
        "L_MPC {mpc}"
    );

    let v = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let (inst, _) =
        mvcl::instance_alignment_loss(&mut g, v, v, &["a", "b"], 0.5).map_err(|e| e.to_string())?;
    let inst = g.value(inst).item();
    let want_inst = -2.0 * (2f64.exp() / (2f64.exp() + 1.0)).ln();
    ensure!(
        (inst - 0.2539).abs() < 1e-3 && (inst - want_inst).abs() < 1e-9,
        "L_G {inst}"
    );
    Ok(format!("L_MPC {mpc:.4}, L_G {inst:.4}"))
}

// ---------------------------------------------------------------- 4

/// Encoder features of `images` as views of one study each, for a fusion store.
fn view_features(images: &[Tensor], dims: &mvrg::config::ModelDims, store: &ParamStore) -> Tensor {
    let study = Study {
        views: images.to_vec(),
        ..blank_study("f", 1, dims.image_size, "r")
    };
    let mut g = Graph::new();
    let v = encoders::encode_views(&mut g, store, dims, &Batch::from_studies(&[study])).unwrap();
    g.value(v.per_view).clone()
}

fn fuse(per_view: Tensor, study: &Study, store: &ParamStore) -> Tensor {
    let mut g = Graph::new();
    let v = encoders::VisualFeatures {
        per_view: g.constant(per_view),
    };
    let out = mvcl::multi_view_fuse(
        &mut g,
        store,
        &v,
        &Batch::from_studies(std::slice::from_ref(study)),
    )
    .unwrap();
    g.value(out).clone()
}

fn fusion() -> Outcome {
    let cfg = RunConfig::default();
    let dims = cfg.dims.clone();
    let (studies, vocab) = synth(12, dims.image_size, 41);
    let store = mvcl::init_stage1(&dims, vocab.len(), 41);
    let per = dims.p() * dims.d1;
    let (mut dup_err, mut exact_err, mut perm_err) = (0.0f64, 0.0f64, 0.0f64);
    for s in &studies {
        let anchor = &s.views[s.anchor_index];
        let single = Study {
            views: vec![anchor.clone()],
            anchor_index: 0,
            ..s.clone()
        };
        let f = view_features(std::slice::from_ref(anchor), &dims, &store);
        ensure!(
            fuse(f.clone(), &single, &store) == f,
            "single-view bypass is not exact for {}",
            s.study_id
        );

        let dup = Study {
            views: vec![anchor.clone(), anchor.clone()],
            ..single.clone()
        };
        let out = fuse(view_features(&dup.views, &dims, &store), &dup, &store);
        dup_err = dup_err.max(max_diff(
            out.data(),
            &layer_norm_ref(&f.data()[..per], dims.d1, LN_EPS),
        ));
        // LN(2a) with eps is exactly LN(a) with eps / 4.
        exact_err = exact_err.max(max_diff(
            out.data(),
            &layer_norm_ref(&f.data()[..per], dims.d1, LN_EPS / 4.0),
        ));

        if s.views.len() == 3 {
            let mut swapped = s.clone();
            let aux: Vec<usize> = s.auxiliary_indices().collect();
            swapped.views.swap(aux[0], aux[1]);
            let a = fuse(view_features(&s.views, &dims, &store), s, &store);
            let b = fuse(
                view_features(&swapped.views, &dims, &store),
                &swapped,
                &store,
            );
            perm_err = perm_err.max(a.max_abs_diff(&b));
        }
    }
    let detail = format!("bypass exact, duplicate-aux err {dup_err:.2e} (vs LN with eps/4: {exact_err:.1e}), permutation err {perm_err:.1e}");
    ensure!(dup_err < 1e-5 && perm_err < 1e-6, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn bridge() -> Outcome {
    let dims = RunConfig::default().dims;
    let (studies, vocab) = synth(6, dims.image_size, 51);
    let mut store = mvcl::init_stage1(&dims, vocab.len(), 5);
    kgrg::init_stage2(&mut store, &dims, vocab.len(), 5);
    let batch = Batch::from_studies(&studies);
    let mut g = Graph::new();
    let v = encoders::encode_views(&mut g, &store, &dims, &batch).map_err(|e| e.to_string())?;
    let fused = mvcl::multi_view_fuse(&mut g, &store, &v, &batch).map_err(|e| e.to_string())?;
    let x = g.value(fused).clone();
    let out =
        kgrg::bridge_forward(&mut g, &store, &dims, fused, None).map_err(|e| e.to_string())?;
    let ln_err = max_diff(
        g.value(out).data(),
        &layer_norm_ref(x.data(), dims.d1, LN_EPS),
    );
    ensure!(
        ln_err < 1e-5,
        "fresh bridge without indications is {ln_err:.2e} from LN(fused)"
    );

    let mut rng = Rng64::new(52);
    let shape = [studies.len(), dims.p(), dims.d1];
    for _ in 0..50 {
        let present: Vec<bool> = (0..studies.len()).map(|_| rng.bernoulli(0.5)).collect();
        let batch = Batch::from_studies(&with_indications(&studies, &present));
        let mut g = Graph::new();
        let fused = g.constant(x.clone());
        let ind = kgrg::encode_indications(&mut g, &store, &dims, &vocab, &batch)
            .map_err(|e| e.to_string())?;
        let out = kgrg::bridge_forward(&mut g, &store, &dims, fused, ind.as_ref())
            .map_err(|e| e.to_string())?;
        ensure!(
            g.shape(out) == shape,
            "shape {:?} for mask {present:?}",
            g.shape(out)
        );
    }
    Ok(format!(
        "50 masks all {shape:?}, LN(fused) err {ln_err:.1e}"
    ))
}

// ---------------------------------------------------------------- 6

fn overfit() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (studies, _) = synth_corpus(&SynthSpec {
        n_studies: 8,
        view_count_range: (1, 3),
        seed: 0,
        ..SynthSpec::default()
    });
    let data = TrainData::new(studies.clone(), vec![]);
    let mut cfg = RunConfig {
        batch_size: 8,
        epochs: 10_000,
        max_steps: Some(500),
        select_on_bleu: false,
        ..RunConfig::default()
    };
    cfg.lr.stage1 = 3e-3;
    cfg.lr.stage2_pretrained = 1e-3;
    cfg.lr.stage2_fresh = 1e-3;
    let s1 = pretrain(&cfg, &data, &tmp.path().join("s1"), false).map_err(|e| e.to_string())?;
    let l = &s1.losses;
    let (first, min) = (l[0], l.iter().copied().fold(f64::INFINITY, f64::min));
    let s1_ratio = min / first;

    cfg.max_steps = Some(300);
    let init = FinetuneInit {
        stage1: Some(tmp.path().join("s1").join("last")),
        ..FinetuneInit::default()
    };
    let s2 = finetune(&cfg, &data, &init, &tmp.path().join("s2")).map_err(|e| e.to_string())?;
    let ck =
        mvrg::checkpoint::load(&tmp.path().join("s2").join("last")).map_err(|e| e.to_string())?;
    let mut exact = 0;
    for s in &studies {
        let out = kgrg::generate(&ck.params, &cfg.dims, &data.vocab, s, DecodeMode::Greedy)
            .map_err(|e| e.to_string())?;
        exact += (corpus::tokenize(&out.text(&data.vocab)) == corpus::tokenize(&s.report)) as usize;
    }
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "stage-1 min/initial {s1_ratio:.3} ({min:.3}/{first:.3}, components at end mpc {:.3}), stage-2 lm {:.3} -> {:.4}, exact {exact}/8, {secs:.0}s",
        last_component(&tmp.path().join("s1"), "mpc"),
        s2.losses[0],
        s2.losses[s2.losses.len() - 1],
    );
    ensure!(
        s1_ratio < 0.25,
        "stage-1 loss did not fall below 25% of initial: {detail}"
    );
    ensure!(exact == 8, "{detail}");
    ensure!(secs < 600.0, "{detail}");
    Ok(detail)
}

fn last_component(dir: &Path, key: &str) -> f64 {
    let log = fs::read_to_string(dir.join(TRAIN_LOG)).unwrap_or_default();
    log.lines()
        .last()
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .and_then(|v| v[key].as_f64())
        .unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------- 7

const ABLATION_SEEDS: u64 = 8;

/// Best validation LM loss with and without indications on one 64-study corpus.
fn ablation_pair(seed: u64, dir: &Path) -> Result<(f64, f64), String> {
    let (studies, _) = synth_corpus(&SynthSpec {
        n_studies: 64,
        vocab_size: 2,
        seed,
        ..SynthSpec::default()
    });
    let (train, val) = studies.split_at(48);
    let with = TrainData::new(train.to_vec(), val.to_vec());
    let strip = |s: &[Study]| s.iter().map(|x| x.without_indication().into()).collect();
    let without = TrainData {
        train: strip(train),
        val: strip(val),
        vocab: with.vocab.clone(),
    };
    let mut cfg = RunConfig {
        seed,
        batch_size: 8,
        epochs: 10_000,
        max_steps: Some(200),
        select_on_bleu: false,
        ..RunConfig::default()
    };
    cfg.lr.stage1 = 3e-3;
    cfg.lr.stage2_pretrained = 1e-3;
    cfg.lr.stage2_fresh = 1e-3;
    pretrain(&cfg, &with, &dir.join("s1"), false).map_err(|e| e.to_string())?;
    cfg.max_steps = None;
    cfg.epochs = 50;
    let init = FinetuneInit {
        stage1: Some(dir.join("s1").join("last")),
        ..FinetuneInit::default()
    };
    let mut best = [0.0; 2];
    for (i, (name, data)) in [("with", &with), ("without", &without)]
        .into_iter()
        .enumerate()
    {
        let s = finetune(&cfg, data, &init, &dir.join(name)).map_err(|e| e.to_string())?;
        best[i] = s.best.ok_or("no validation score")?.val_loss;
    }
    Ok((best[0], best[1]))
}

/// Compares mean best validation loss over several independent corpora.
fn ablation() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut pairs = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        pairs.push(ablation_pair(seed, &tmp.path().join(seed.to_string()))?);
    }
    let n = pairs.len() as f64;
    let with = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let without = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let wins = pairs.iter().filter(|p| p.0 < p.1).count();
    let per_seed: Vec<String> = pairs.iter().map(|p| format!("{:+.3}", p.0 - p.1)).collect();
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "mean best val LM with {with:.4}, without {without:.4} over {} corpora; with-minus-without per seed [{}], {wins}/{} wins; {secs:.0}s",
        pairs.len(),
        per_seed.join(" "),
        pairs.len()
    );
    ensure!(with < without && secs < 1200.0, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn words(s: &str) -> Vec<String> {
    metrics::metric_tokens(s)
}

fn metric_oracles() -> Outcome {
    let refs = [
        "the heart size is normal .",
        "small left pleural effusion with basilar atelectasis .",
        "no acute cardiopulmonary process .",
    ];
    let r: Vec<Vec<String>> = refs.iter().map(|s| words(s)).collect();
    let b = metrics::bleu(&r, &r, 4).map_err(|e| e.to_string())?;
    ensure!(
        b.iter().all(|&x| (x - 1.0).abs() < 1e-12),
        "identity BLEU {b:?}"
    );
    let rl = metrics::rouge_l(&r, &r).map_err(|e| e.to_string())?;
    ensure!((rl - 1.0).abs() < 1e-12, "identity ROUGE-L {rl}");
    let met = metrics::meteor_simplified(&r, &r).map_err(|e| e.to_string())?;
    let max_met = r
        .iter()
        .map(|w| 1.0 - 0.5 / (w.len() as f64).powi(3))
        .sum::<f64>()
        / r.len() as f64;
    ensure!(
        (met - max_met).abs() < 1e-12,
        "identity METEOR {met} vs {max_met}"
    );
    let disjoint: Vec<Vec<String>> = [
        "alpha beta gamma delta",
        "epsilon zeta eta theta iota",
        "kappa lambda mu",
    ]
    .iter()
    .map(|s| words(s))
    .collect();
    ensure!(
        metrics::rouge_l(&disjoint, &r).map_err(|e| e.to_string())? == 0.0,
        "disjoint ROUGE-L"
    );
    ensure!(
        metrics::meteor_simplified(&disjoint, &r).map_err(|e| e.to_string())? == 0.0,
        "disjoint METEOR"
    );

    let mut rng = Rng64::new(81);
    let label = |rng: &mut Rng64| ObservationLabels(std::array::from_fn(|_| rng.bernoulli(0.3)));
    let pred: Vec<ObservationLabels> = (0..1000).map(|_| label(&mut rng)).collect();
    let gold: Vec<ObservationLabels> = (0..1000).map(|_| label(&mut rng)).collect();
    let all: Vec<usize> = (0..OBSERVATIONS.len()).collect();
    for subset in [&all[..], &metrics::CX5[..]] {
        let rep = metrics::ce_f1(&pred, &gold, subset).map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        let mut f1s = Vec::new();
        for &o in subset {
            let (mut a, mut b, mut c) = (0usize, 0usize, 0usize);
            for (p, g) in pred.iter().zip(&gold) {
                a += (p.0[o] && g.0[o]) as usize;
                b += (p.0[o] && !g.0[o]) as usize;
                c += (!p.0[o] && g.0[o]) as usize;
            }
            f1s.push(if a == 0 {
                0.0
            } else {
                2.0 * a as f64 / (2 * a + b + c) as f64
            });
            tp += a;
            fp += b;
            fneg += c;
        }
        let micro = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        ensure!(
            (rep.micro.f1 - micro).abs() < 1e-12,
            "micro F1 {} vs oracle {micro}",
            rep.micro.f1
        );
        let scores: Vec<(usize, usize, usize)> =
            rep.per_obs.iter().map(|s| (s.tp, s.fp, s.fn_)).collect();
        ensure!(scores.iter().map(|s| s.0).sum::<usize>() == tp, "pooled tp");
        let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
        ensure!(
            (rep.macro_avg.f1 - macro_f1).abs() < 1e-12,
            "macro F1 {} vs oracle {macro_f1}",
            rep.macro_avg.f1
        );
    }

    let green = metrics::green_score(&GreenCounts {
        matched_findings: 3,
        errors: [1, 0, 0, 0, 0, 0],
    });
    ensure!(green.score == 0.75 && !green.degenerate, "GREEN {green:?}");
    Ok("identity and disjoint corpora, ce_f1 on 1000 samples, GREEN 0.75".into())
}

// ---------------------------------------------------------------- 9

fn tree_hash(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(
            f.strip_prefix(dir)
                .unwrap()
                .display()
                .to_string()
                .as_bytes(),
        );
        h.update(fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

/// Corpus hash, Stage-1 logs, Stage-2 logs, and greedy generations of one run.
struct RunArtifacts {
    corpus_hash: String,
    stage1_logs: Vec<u8>,
    stage2_logs: Vec<u8>,
    generations: Vec<String>,
}

fn run_once(dir: &Path) -> Result<RunArtifacts, String> {
    let spec = SynthSpec {
        n_studies: 8,
        image_size: 8,
        seed: 7,
        ..SynthSpec::default()
    };
    let (studies, _) = synth_corpus(&spec);
    let corpus_dir = dir.join("corpus");
    corpus::write_manifest(
        &corpus_dir.join("manifest.jsonl"),
        &corpus_dir.join("images"),
        &studies,
    )
    .map_err(|e| e.to_string())?;
    let corpus_hash = tree_hash(&corpus_dir);

    let filter = RunConfig::default().report_filter();
    let loaded = corpus::load_manifest(&corpus_dir.join("manifest.jsonl"), &filter)
        .map_err(|e| e.to_string())?;
    let data = TrainData::new(loaded, vec![]);
    let mut cfg = RunConfig {
        dims: tiny_dims(),
        batch_size: 4,
        epochs: 3,
        select_on_bleu: true,
        ..RunConfig::default()
    };
    cfg.lr.stage1 = 1e-3;
    cfg.lr.stage2_pretrained = 1e-3;
    cfg.lr.stage2_fresh = 1e-3;
    pretrain(&cfg, &data, &dir.join("s1"), false).map_err(|e| e.to_string())?;
    let init = FinetuneInit {
        stage1: Some(dir.join("s1").join("last")),
        ..FinetuneInit::default()
    };
    finetune(&cfg, &data, &init, &dir.join("s2")).map_err(|e| e.to_string())?;
    let logs = |stage: &str| -> Vec<u8> {
        [TRAIN_LOG, VAL_LOG]
            .iter()
            .flat_map(|f| fs::read(dir.join(stage).join(f)).unwrap_or_default())
            .collect()
    };
    let ck = mvrg::checkpoint::load(&dir.join("s2").join("best")).map_err(|e| e.to_string())?;
    let gens = data
        .train
        .iter()
        .map(|s| {
            kgrg::generate(&ck.params, &cfg.dims, &data.vocab, s, DecodeMode::Greedy)
                .map(|o| o.text(&data.vocab))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    Ok(RunArtifacts {
        corpus_hash,
        stage1_logs: logs("s1"),
        stage2_logs: logs("s2"),
        generations: gens,
    })
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run_once(&tmp.path().join("a"))?;
    let b = run_once(&tmp.path().join("b"))?;
    ensure!(
        a.corpus_hash == b.corpus_hash,
        "corpus hashes differ: {} vs {}",
        a.corpus_hash,
        b.corpus_hash
    );
    ensure!(
        !a.stage1_logs.is_empty() && a.stage1_logs == b.stage1_logs,
        "stage-1 logs differ"
    );
    ensure!(
        !a.stage2_logs.is_empty() && a.stage2_logs == b.stage2_logs,
        "stage-2 logs differ"
    );
    ensure!(a.generations == b.generations, "greedy generations differ");
    Ok(format!(
        "corpus sha256 {}, logs and {} greedy generations identical",
        &a.corpus_hash[..12],
        a.generations.len()
    ))
}
