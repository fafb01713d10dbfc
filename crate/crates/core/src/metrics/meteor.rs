use rust_stemmers::{Algorithm, Stemmer};

use super::{check_aligned, MetricError};

const ALPHA: f64 = 0.9;
const GAMMA: f64 = 0.5;
const BETA: f64 = 3.0;

/// Greedy unigram alignment: exact matches first, then Porter-stem matches
/// among the leftovers. Returns `(candidate, reference)` index pairs sorted
/// by candidate position.
fn align(c: &[String], r: &[String], stemmer: &Stemmer) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; c.len()];
    let mut used_r = vec![false; r.len()];
    let mut pairs = Vec::new();
    let c_stem: Vec<String> = c.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let r_stem: Vec<String> = r.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    for (cs, rs) in [(c, r), (&c_stem[..], &r_stem[..])] {
        for i in 0..c.len() {
            if used_c[i] {
                continue;
            }
            if let Some(j) = (0..r.len()).find(|&j| !used_r[j] && cs[i] == rs[j]) {
                used_c[i] = true;
                used_r[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Sentence score `Fmean · (1 − γ·(chunks/matches)^β)` with
/// `Fmean = P·R / (α·P + (1−α)·R)`.
pub fn meteor_sentence(c: &[String], r: &[String]) -> f64 {
    let stemmer = Stemmer::create(Algorithm::English);
    meteor_with(c, r, &stemmer)
}

fn meteor_with(c: &[String], r: &[String], stemmer: &Stemmer) -> f64 {
    let pairs = align(c, r, stemmer);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let fmean = p * rec / (ALPHA * p + (1.0 - ALPHA) * rec);
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1)
        .count();
    let penalty = GAMMA * (chunks as f64 / m as f64).powf(BETA);
    fmean * (1.0 - penalty)
}

/// Mean sentence METEOR without synonym matching.
pub fn meteor_simplified(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<f64, MetricError> {
    check_aligned(candidates, references)?;
    let stemmer = Stemmer::create(Algorithm::English);
    let s: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_with(c, r, &stemmer))
        .sum();
    Ok(s / candidates.len() as f64)
}
