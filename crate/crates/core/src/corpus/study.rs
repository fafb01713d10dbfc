use std::sync::Arc;

use crate::rng::Rng64;
use crate::tensor::Tensor;

/// One examination: its views, the designated anchor view, an optional
/// cleaned indication, and the reference report.
#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub study_id: String,
    /// Grayscale `[H, W]` images.
    pub views: Vec<Tensor>,
    pub anchor_index: usize,
    pub indication: Option<String>,
    pub report: String,
    /// Keyword groups condensed from the report.
    pub factual_serialization: Vec<String>,
}

impl Study {
    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn is_multi_view(&self) -> bool {
        self.views.len() > 1
    }

    /// View indices other than the anchor, in stored order.
    pub fn auxiliary_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.views.len()).filter(move |&i| i != self.anchor_index)
    }

    /// Same study with the indication removed.
    pub fn without_indication(&self) -> Study {
        Study {
            indication: None,
            ..self.clone()
        }
    }
}

/// A group of studies processed together.
#[derive(Clone, Debug)]
pub struct Batch {
    pub studies: Vec<Arc<Study>>,
}

impl Batch {
    pub fn new(studies: Vec<Arc<Study>>) -> Self {
        assert!(!studies.is_empty(), "a batch holds at least one study");
        Self { studies }
    }

    pub fn from_studies(studies: &[Study]) -> Self {
        Self::new(studies.iter().cloned().map(Arc::new).collect())
    }

    /// Number of studies.
    pub fn b(&self) -> usize {
        self.studies.len()
    }

    /// Total number of views.
    pub fn m_imgs(&self) -> usize {
        self.studies.iter().map(|s| s.view_count()).sum()
    }

    /// Number of views belonging to multi-view studies.
    pub fn k(&self) -> usize {
        self.studies
            .iter()
            .filter(|s| s.is_multi_view())
            .map(|s| s.view_count())
            .sum()
    }

    /// `(study, view)` pairs in flattened order.
    pub fn view_index(&self) -> Vec<(usize, usize)> {
        self.studies
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.view_count()).map(move |v| (i, v)))
            .collect()
    }

    /// Offset of each study's first view in the flattened order.
    pub fn view_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.studies
            .iter()
            .map(|s| {
                let o = off;
                off += s.view_count();
                o
            })
            .collect()
    }
}

/// Shuffles with `seed`, then slices into contiguous batches. The last batch
/// may be short.
pub fn make_batches(studies: &[Arc<Study>], batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..studies.len()).collect();
    Rng64::new(seed).shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|idx| Batch::new(idx.iter().map(|&i| Arc::clone(&studies[i])).collect()))
        .collect()
}
