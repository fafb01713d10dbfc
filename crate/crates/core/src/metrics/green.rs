use serde::{Deserialize, Serialize};

/// Matched findings and the six clinically significant error counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreenCounts {
    pub matched_findings: u64,
    pub errors: [u64; 6],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GreenScore {
    pub score: f64,
    /// Set when there are neither matches nor errors; `score` is then 0.
    pub degenerate: bool,
}

/// `matched / (matched + Σ errors)`.
pub fn green_score(c: &GreenCounts) -> GreenScore {
    let denom = c.matched_findings + c.errors.iter().sum::<u64>();
    if denom == 0 {
        return GreenScore {
            score: 0.0,
            degenerate: true,
        };
    }
    GreenScore {
        score: c.matched_findings as f64 / denom as f64,
        degenerate: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GreenSummary {
    pub mean: f64,
    pub n: usize,
    pub degenerate: usize,
}

impl GreenSummary {
    pub fn from_counts<'a>(counts: impl IntoIterator<Item = &'a GreenCounts>) -> Self {
        let (mut sum, mut n, mut degenerate) = (0.0, 0, 0);
        for c in counts {
            let s = green_score(c);
            sum += s.score;
            n += 1;
            degenerate += s.degenerate as usize;
        }
        Self {
            mean: if n == 0 { 0.0 } else { sum / n as f64 },
            n,
            degenerate,
        }
    }
}
