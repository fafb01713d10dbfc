use super::{check_aligned, MetricError};

/// Recall weight of the LCS F-measure.
pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_sentence(c: &[String], r: &[String]) -> f64 {
    let l = lcs_len(c, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean sentence-level ROUGE-L.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64, MetricError> {
    check_aligned(candidates, references)?;
    let s: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_sentence(c, r))
        .sum();
    Ok(s / candidates.len() as f64)
}
