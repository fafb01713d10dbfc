use std::collections::HashMap;

use super::{check_aligned, MetricError};

/// Stands in for a zero n-gram precision so the log stays finite.
pub const BLEU_EPS: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-1..`max_n` with clipped counts and a corpus brevity penalty.
/// Entry `n-1` is the geometric mean of precisions 1..=n.
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
) -> Result<Vec<f64>, MetricError> {
    check_aligned(candidates, references)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, cnt) in ngram_counts(c, n) {
                matched[n - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if matched[n] == 0 || total[n] == 0 {
            BLEU_EPS
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
        out.push(bp * (log_sum / (n + 1) as f64).exp());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identity_scores_one() {
        let c = vec![
            w("the heart is enlarged today"),
            w("no acute process is seen here"),
        ];
        for b in bleu(&c, &c, 4).unwrap() {
            assert!((b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clipped_unigram() {
        let b = bleu(&[w("the the the")], &[w("the cat")], 1).unwrap();
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies() {
        let b = bleu(&[w("a b")], &[w("a b c d")], 1).unwrap();
        assert!((b[0] - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(bleu(&[], &[], 4), Err(MetricError::EmptyCorpus));
        assert!(matches!(
            bleu(&[w("a")], &[], 4),
            Err(MetricError::LengthMismatch { .. })
        ));
    }
}
