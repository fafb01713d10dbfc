#![allow(dead_code)]

use mvrg::config::ModelDims;
use mvrg::corpus::{synth_corpus, Study, SynthSpec, Vocabulary};
use mvrg::rng::Rng64;
use mvrg::tensor::Tensor;

/// Small enough for finite differences over the whole model.
pub fn tiny_dims() -> ModelDims {
    ModelDims {
        image_size: 8,
        d1: 8,
        d2: 8,
        d: 6,
        d_attn: 6,
        n_b: 2,
        bridge_blocks: 1,
        memory_rows: 2,
        text_layers: 1,
        dec_layers: 1,
        ffn_mult: 2,
        max_text_len: 12,
        max_gen: 16,
    }
}

pub fn synth(n: usize, image_size: usize, seed: u64) -> (Vec<Study>, Vocabulary) {
    synth_corpus(&SynthSpec {
        n_studies: n,
        image_size,
        seed,
        ..SynthSpec::default()
    })
}

/// Study with `views` blank images of side `side`.
pub fn blank_study(id: &str, views: usize, side: usize, report: &str) -> Study {
    Study {
        study_id: id.to_string(),
        views: vec![Tensor::zeros(&[side, side]); views],
        anchor_index: 0,
        indication: None,
        report: report.to_string(),
        factual_serialization: vec![report.to_string()],
    }
}

pub fn random_image(side: usize, rng: &mut Rng64) -> Tensor {
    let mut t = Tensor::randn(&[side, side], 0.5, rng);
    t.round_to_f32();
    t
}

/// Independent layer norm over the last axis with unit gain and zero bias.
pub fn layer_norm_ref(x: &[f64], d: usize, eps: f64) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let m = r.iter().sum::<f64>() / d as f64;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
            r.iter()
                .map(move |a| (a - m) / (v + eps).sqrt())
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
