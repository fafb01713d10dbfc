//! Run configuration. Every field has a default, so a partial JSON file is
//! enough; CLI flags are applied on top by the caller.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::SynthSpec;
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Input images are `image_size × image_size`.
    pub image_size: usize,
    /// Visual channels.
    pub d1: usize,
    /// Text-encoder width.
    pub d2: usize,
    /// Shared embedding width after projection.
    pub d: usize,
    /// Width of bridge query/key space.
    pub d_attn: usize,
    /// Bridge tokens per block.
    pub n_b: usize,
    pub bridge_blocks: usize,
    pub memory_rows: usize,
    pub text_layers: usize,
    pub dec_layers: usize,
    /// Hidden width of every feed-forward block, as a multiple of its input.
    pub ffn_mult: usize,
    /// Longest text-encoder input including BOS and EOS.
    pub max_text_len: usize,
    /// Longest generated report, EOS included.
    pub max_gen: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            image_size: 16,
            d1: 64,
            d2: 64,
            d: 32,
            d_attn: 32,
            n_b: 4,
            bridge_blocks: 1,
            memory_rows: 8,
            text_layers: 2,
            dec_layers: 2,
            ffn_mult: 2,
            max_text_len: 24,
            max_gen: 100,
        }
    }
}

impl ModelDims {
    /// Feature-map positions after the two stride-2 blocks.
    pub fn p(&self) -> usize {
        let side = self.image_size.div_ceil(4);
        side * side
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("image_size", self.image_size),
            ("d1", self.d1),
            ("d2", self.d2),
            ("d", self.d),
            ("d_attn", self.d_attn),
            ("n_b", self.n_b),
            ("bridge_blocks", self.bridge_blocks),
            ("text_layers", self.text_layers),
            ("dec_layers", self.dec_layers),
            ("ffn_mult", self.ffn_mult),
            ("max_gen", self.max_gen),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("dims.{name} must be positive"));
            }
        }
        if self.max_text_len < 2 {
            return Err("dims.max_text_len must leave room for BOS and EOS".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub stage1: f64,
    /// Stage-2 rate for tensors loaded from the Stage-1 checkpoint.
    pub stage2_pretrained: f64,
    /// Stage-2 rate for freshly initialized tensors.
    pub stage2_fresh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            stage1: 5e-5,
            stage2_pretrained: 5e-6,
            stage2_fresh: 5e-5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Splits emitted by `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSplits {
    pub corpus: SynthSpec,
    /// Fractions of studies for train and validation; test takes the rest.
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SynthSplits {
    fn default() -> Self {
        Self {
            corpus: SynthSpec::default(),
            train_frac: 0.75,
            val_frac: 0.125,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: ModelDims,
    pub tau1: f64,
    pub tau2: f64,
    pub batch_size: usize,
    pub lr: LearningRates,
    pub adamw: AdamWConfig,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    /// Report filter phrases; a report starting with one is dropped.
    pub report_blacklist: Vec<String>,
    /// Validation generations used for model selection in Stage 2.
    pub select_on_bleu: bool,
    pub paths: Paths,
    pub synth: SynthSplits,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: ModelDims::default(),
            tau1: 0.5,
            tau2: 0.5,
            batch_size: 32,
            lr: LearningRates::default(),
            adamw: AdamWConfig::default(),
            epochs: 50,
            max_steps: None,
            report_blacklist: crate::corpus::ReportFilter::default().blacklist,
            select_on_bleu: true,
            paths: Paths::default(),
            synth: SynthSplits::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.dims.validate()?;
        for (name, v) in [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("lr.stage1", self.lr.stage1),
            ("lr.stage2_pretrained", self.lr.stage2_pretrained),
            ("lr.stage2_fresh", self.lr.stage2_fresh),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return Err("epochs must be positive".into());
        }
        let s = &self.synth;
        if !(0.0..=1.0).contains(&s.corpus.indication_rate) {
            return Err("synth.corpus.indication_rate must lie in [0, 1]".into());
        }
        if !(s.train_frac > 0.0 && s.val_frac >= 0.0 && s.train_frac + s.val_frac <= 1.0) {
            return Err(
                "synth fractions must satisfy 0 < train_frac, train_frac + val_frac <= 1".into(),
            );
        }
        Ok(())
    }

    pub fn report_filter(&self) -> crate::corpus::ReportFilter {
        crate::corpus::ReportFilter {
            blacklist: self.report_blacklist.clone(),
        }
    }
}
