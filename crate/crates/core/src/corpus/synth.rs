//! Synthetic studies with planted, learnable image→report structure.
//!
//! Each image is split into four quadrants, one per region. A region is
//! either normal or carries one finding from a fixed pool; the finding sets
//! the quadrant's mean intensity. Every view of a study shares the planted
//! pattern with independent pixel noise. A hidden history class picks the
//! closing sentence of the report, and the indication (when present) names
//! a symptom tied to that class, so it is the only route to that sentence.

use serde::{Deserialize, Serialize};

use super::text::clean_indication;
use super::{Study, Vocabulary};
use crate::rng::Rng64;
use crate::tensor::Tensor;

const REGIONS: [&str; 4] = ["heart", "left lung", "right lung", "mediastinum"];

const FINDINGS: [&str; 8] = [
    "opacity",
    "effusion",
    "consolidation",
    "edema",
    "nodule",
    "atelectasis",
    "enlargement",
    "pneumothorax",
];

/// (symptom in the indication, condition named in the report)
const HISTORIES: [(&str, &str); 4] = [
    ("fever", "infection"),
    ("dyspnea", "fluid overload"),
    ("fall", "trauma"),
    ("cough", "bronchitis"),
];

const GENDERS: [&str; 6] = ["M", "F", "man", "woman", "male", "female"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_studies: usize,
    /// Inclusive `(min, max)` views per study.
    pub view_count_range: (usize, usize),
    /// Side length; must be even.
    pub image_size: usize,
    /// Number of distinct finding words, at most 8.
    pub vocab_size: usize,
    pub indication_rate: f64,
    /// Chance that a region carries a finding.
    pub abnormal_rate: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_studies: 64,
            view_count_range: (1, 3),
            image_size: 16,
            vocab_size: 4,
            indication_rate: 0.664,
            abnormal_rate: 0.35,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) {
        assert!(
            (0.0..=1.0).contains(&self.indication_rate),
            "indication_rate must lie in [0, 1]"
        );
        assert!(
            (0.0..=1.0).contains(&self.abnormal_rate),
            "abnormal_rate must lie in [0, 1]"
        );
        let (lo, hi) = self.view_count_range;
        assert!(
            lo >= 1 && lo <= hi,
            "view_count_range must satisfy 1 <= min <= max"
        );
        assert!(
            self.image_size >= 2 && self.image_size.is_multiple_of(2),
            "image_size must be even"
        );
        assert!(
            (1..=FINDINGS.len()).contains(&self.vocab_size),
            "vocab_size must be in 1..=8"
        );
    }
}

/// Generates a corpus and the vocabulary over its reports, indications, and
/// serializations. Study `i` depends only on `(seed, i)`.
pub fn synth_corpus(spec: &SynthSpec) -> (Vec<Study>, Vocabulary) {
    spec.validate();
    let studies: Vec<Study> = (0..spec.n_studies).map(|i| synth_study(spec, i)).collect();
    let vocab = Vocabulary::from_studies(&studies);
    (studies, vocab)
}

fn synth_study(spec: &SynthSpec, index: usize) -> Study {
    let mut rng = Rng64::fork(spec.seed, index as u64 + 1);
    // 0 = normal, f in 1..=vocab_size = FINDINGS[f - 1]
    let states: Vec<usize> = REGIONS
        .iter()
        .map(|_| {
            if rng.bernoulli(spec.abnormal_rate) {
                1 + rng.below(spec.vocab_size)
            } else {
                0
            }
        })
        .collect();
    let history = rng.below(HISTORIES.len());

    let n_views = rng.range_inclusive(spec.view_count_range.0, spec.view_count_range.1);
    let views = (0..n_views)
        .map(|_| render(spec, &states, &mut rng))
        .collect();

    let mut sentences = Vec::new();
    let mut serialization = Vec::new();
    for (region, &s) in REGIONS.iter().zip(&states) {
        if s > 0 {
            sentences.push(format!("{region} shows {} .", FINDINGS[s - 1]));
            serialization.push(format!("{region} {}", FINDINGS[s - 1]));
        }
    }
    if sentences.is_empty() {
        sentences.push("no acute cardiopulmonary process .".to_string());
        serialization.push("normal".to_string());
    }
    let condition = HISTORIES[history].1;
    sentences.push(format!("consistent with {condition} ."));
    serialization.push(condition.to_string());

    let indication = rng
        .bernoulli(spec.indication_rate)
        .then(|| noisy_indication(HISTORIES[history].0, &mut rng))
        .and_then(|raw| clean_indication(&raw));

    Study {
        study_id: format!("syn{index:05}"),
        views,
        anchor_index: 0,
        indication,
        report: sentences.join(" "),
        factual_serialization: serialization,
    }
}

fn render(spec: &SynthSpec, states: &[usize], rng: &mut Rng64) -> Tensor {
    let n = spec.image_size;
    let half = n / 2;
    let levels = (spec.vocab_size + 1) as f64;
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let quadrant = 2 * (r / half) + c / half;
            let mean = states[quadrant] as f64 / levels;
            data.push(mean + spec.noise_std * rng.normal());
        }
    }
    let mut t = Tensor::new(vec![n, n], data).expect("image shape");
    t.round_to_f32();
    t
}

fn noisy_indication(symptom: &str, rng: &mut Rng64) -> String {
    let age = 10 * rng.range_inclusive(3, 8);
    let gender = GENDERS[rng.below(GENDERS.len())];
    let core = format!("{age}-year-old {gender} with {symptom}");
    match rng.below(4) {
        0 => core,
        1 => format!("___ {core}"),
        2 => format!("{core} // eval"),
        _ => format!("@@ {core} ___"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::text::tokenize;

    fn spec(n: usize, rate: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            n_studies: n,
            indication_rate: rate,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let (a, va) = synth_corpus(&spec(8, 0.66, 7));
        let (b, vb) = synth_corpus(&spec(8, 0.66, 7));
        assert_eq!(a, b);
        assert_eq!(va.hash(), vb.hash());
        let (c, _) = synth_corpus(&spec(8, 0.66, 8));
        assert_ne!(a, c);
    }

    #[test]
    fn prefix_stable_in_n() {
        let (a, _) = synth_corpus(&spec(4, 0.66, 3));
        let (b, _) = synth_corpus(&spec(10, 0.66, 3));
        assert_eq!(a[..], b[..4]);
    }

    #[test]
    fn zero_rate_has_no_indications() {
        let (s, _) = synth_corpus(&spec(200, 0.0, 1));
        assert!(s.iter().all(|s| s.indication.is_none()));
    }

    #[test]
    fn empirical_indication_rate() {
        let (s, _) = synth_corpus(&spec(1000, 0.66, 11));
        let rate = s.iter().filter(|s| s.indication.is_some()).count() as f64 / 1000.0;
        assert!((rate - 0.66).abs() < 0.05, "rate {rate}");
    }

    #[test]
    fn study_invariants_and_vocabulary_cover_text() {
        let (studies, vocab) = synth_corpus(&spec(50, 0.66, 2));
        for s in &studies {
            assert!((1..=3).contains(&s.view_count()));
            assert!(s.anchor_index < s.view_count());
            assert!(!s.report.is_empty() && !s.factual_serialization.is_empty());
            assert!(s.views.iter().all(|v| v.shape() == [16, 16]));
            for tok in tokenize(&s.report) {
                assert_ne!(vocab.id(&tok), super::super::vocab::UNK, "{tok}");
            }
            if let Some(ind) = &s.indication {
                assert_eq!(clean_indication(ind).as_ref(), Some(ind));
                let (symptom, condition) =
                    HISTORIES.iter().find(|(sym, _)| ind.contains(sym)).unwrap();
                assert!(s.report.contains(condition), "{symptom}: {}", s.report);
            }
        }
    }

    #[test]
    fn views_share_pattern() {
        let sp = SynthSpec {
            n_studies: 30,
            view_count_range: (2, 2),
            ..SynthSpec::default()
        };
        let (studies, _) = synth_corpus(&sp);
        for s in &studies {
            let diff = s.views[0].max_abs_diff(&s.views[1]);
            assert!(diff < 12.0 * sp.noise_std, "{diff}");
        }
    }
}
