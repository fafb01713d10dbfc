//! Stage-1 pretraining and Stage-2 finetuning loops with JSONL logs,
//! resumable `last` checkpoints, and `best` checkpoints chosen on validation.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{self, BestScore, Checkpoint, CheckpointError, CheckpointMeta, Stage};
use crate::config::RunConfig;
use crate::corpus::{self, make_batches, Batch, CorpusError, Study, Vocabulary};
use crate::kgrg::{self, DecodeMode};
use crate::metrics;
use crate::mvcl;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::rng::Rng64;
use crate::tensor::Graph;
use crate::ModelError;

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VAL_LOG: &str = "val_log.jsonl";
pub const NAN_DUMP: &str = "nan_dump.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no Stage-1 checkpoint given (pass one, or allow a cold start)")]
    MissingStage1,
    #[error("checkpoint at {path} is a {found:?} checkpoint, expected {expected:?}")]
    WrongStage {
        path: String,
        found: Stage,
        expected: Stage,
    },
    #[error("tensor `{0}` differs from the Stage-1 checkpoint after loading")]
    InitMismatch(String),
    #[error("{what} is not finite; distributions dumped to {}", .dump.display())]
    Numerical { what: String, dump: PathBuf },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Training and validation studies with the vocabulary built from training.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Arc<Study>>,
    pub val: Vec<Arc<Study>>,
    pub vocab: Vocabulary,
}

impl TrainData {
    pub fn new(train: Vec<Study>, val: Vec<Study>) -> Self {
        let vocab = Vocabulary::from_studies(&train);
        Self {
            train: train.into_iter().map(Arc::new).collect(),
            val: val.into_iter().map(Arc::new).collect(),
            vocab,
        }
    }

    /// Reads the manifests named in `cfg.paths`.
    pub fn from_config(cfg: &RunConfig) -> Result<Self, TrainError> {
        let filter = cfg.report_filter();
        let train_path = cfg
            .paths
            .train_manifest
            .as_ref()
            .ok_or_else(|| TrainError::Config("paths.train_manifest is required".into()))?;
        let train = corpus::load_manifest(train_path, &filter)?;
        let val = match &cfg.paths.val_manifest {
            Some(p) => corpus::load_manifest(p, &filter)?,
            None => Vec::new(),
        };
        Ok(Self::new(train, val))
    }

    /// Studies used for model selection; training data when there is no
    /// validation split.
    fn selection_set(&self) -> &[Arc<Study>] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

/// What a training call did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    /// Optimizer steps taken in this call.
    pub steps_run: u64,
    /// Training loss of every step run in this call.
    pub losses: Vec<f64>,
    pub best: Option<BestScore>,
    /// Total optimizer steps, including resumed ones.
    pub step: u64,
}

struct JsonlLog {
    path: PathBuf,
    file: fs::File,
}

impl JsonlLog {
    fn open(path: PathBuf, append: bool) -> Result<Self, TrainError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(io(&path))?;
        Ok(Self { path, file })
    }

    fn write(&mut self, v: serde_json::Value) -> Result<(), TrainError> {
        writeln!(self.file, "{v}").map_err(io(&self.path))
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    Rng64::fork(seed, 1000 + epoch as u64).next_u64()
}

/// Unshuffled batches for evaluation.
fn eval_batches(studies: &[Arc<Study>], batch_size: usize) -> Vec<Batch> {
    studies
        .chunks(batch_size)
        .map(|c| Batch::new(c.to_vec()))
        .collect()
}

fn write_dump(out_dir: &Path, what: String, dump: String) -> TrainError {
    let path = out_dir.join(NAN_DUMP);
    if let Err(e) = fs::write(&path, dump) {
        return io(&path)(e);
    }
    TrainError::Numerical { what, dump: path }
}

fn check_stage(path: &Path, ck: &Checkpoint, expected: Stage) -> Result<(), TrainError> {
    if ck.meta.stage != expected {
        return Err(TrainError::WrongStage {
            path: path.display().to_string(),
            found: ck.meta.stage,
            expected,
        });
    }
    Ok(())
}

/// Mean Stage-1 loss per batch over `studies`.
pub fn stage1_eval_loss(
    cfg: &RunConfig,
    store: &ParamStore,
    vocab: &Vocabulary,
    studies: &[Arc<Study>],
) -> Result<f64, ModelError> {
    let batches = eval_batches(studies, cfg.batch_size);
    let mut sum = 0.0;
    for b in &batches {
        let mut g = Graph::new();
        sum += mvcl::stage1_forward(&mut g, store, &cfg.dims, vocab, b, cfg.tau1, cfg.tau2)?
            .breakdown
            .total;
    }
    Ok(sum / batches.len().max(1) as f64)
}

/// Mean per-study LM loss over `studies`.
pub fn stage2_eval_loss(
    cfg: &RunConfig,
    store: &ParamStore,
    vocab: &Vocabulary,
    studies: &[Arc<Study>],
) -> Result<f64, ModelError> {
    let mut sum = 0.0;
    for b in eval_batches(studies, cfg.batch_size) {
        let mut g = Graph::new();
        let (_, terms) = kgrg::lm_loss(&mut g, store, &cfg.dims, vocab, &b)?;
        sum += terms.iter().sum::<f64>();
    }
    Ok(sum / studies.len().max(1) as f64)
}

/// Corpus BLEU-4 of greedy generations against the reports.
pub fn greedy_bleu4(
    cfg: &RunConfig,
    store: &ParamStore,
    vocab: &Vocabulary,
    studies: &[Arc<Study>],
) -> Result<f64, ModelError> {
    let mut cands = Vec::with_capacity(studies.len());
    let mut refs = Vec::with_capacity(studies.len());
    for s in studies {
        let out = kgrg::generate(store, &cfg.dims, vocab, s, DecodeMode::Greedy)?;
        cands.push(out.text(vocab));
        refs.push(s.report.clone());
    }
    Ok(metrics::language_metrics(&cands, &refs).map_or(0.0, |(_, b, _, _)| b[3]))
}

/// Stage-1 pretraining. With `resume`, continues from `out_dir/last`.
pub fn pretrain(
    cfg: &RunConfig,
    data: &TrainData,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainSummary, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let last_dir = out_dir.join("last");
    let vocab_hash = data.vocab.hash();

    let (mut store, mut opt, mut meta) = if resume && last_dir.join("meta.json").is_file() {
        let ck = checkpoint::load(&last_dir)?;
        check_stage(&last_dir, &ck, Stage::Stage1)?;
        checkpoint::check_compatible(&ck.meta, &cfg.dims, &vocab_hash)?;
        let opt = ck.optim.unwrap_or_else(|| AdamW::new(cfg.adamw));
        (ck.params, opt, ck.meta)
    } else {
        let meta = CheckpointMeta {
            stage: Stage::Stage1,
            dims: cfg.dims.clone(),
            vocab_hash,
            seed: cfg.seed,
            step: 0,
            epoch: 0,
            next_batch: 0,
            best: None,
            pretrained: Vec::new(),
        };
        (
            mvcl::init_stage1(&cfg.dims, data.vocab.len(), cfg.seed),
            AdamW::new(cfg.adamw),
            meta,
        )
    };

    let appending = meta.step > 0;
    let mut log = JsonlLog::open(out_dir.join(TRAIN_LOG), appending)?;
    let mut val_log = JsonlLog::open(out_dir.join(VAL_LOG), appending)?;
    let mut summary = TrainSummary::default();
    let save = |dir: &str, store: &ParamStore, opt: &AdamW, meta: &CheckpointMeta| {
        checkpoint::save(
            &out_dir.join(dir),
            &Checkpoint {
                meta: meta.clone(),
                vocab: data.vocab.clone(),
                params: store.clone(),
                optim: Some(opt.clone()),
            },
        )
    };

    'epochs: while meta.epoch < cfg.epochs {
        let batches = make_batches(
            &data.train,
            cfg.batch_size,
            epoch_seed(cfg.seed, meta.epoch),
        );
        while meta.next_batch < batches.len() {
            if cfg.max_steps.is_some_and(|m| meta.step >= m) {
                break 'epochs;
            }
            let lr = cfg.lr.stage1;
            let br = match mvcl::pretrain_step(
                &mut store,
                &mut opt,
                &cfg.dims,
                &data.vocab,
                &batches[meta.next_batch],
                cfg.tau1,
                cfg.tau2,
                lr,
            ) {
                Err(ModelError::NonFinite { what, dump }) => {
                    save("last", &store, &opt, &meta)?;
                    return Err(write_dump(out_dir, what, dump));
                }
                r => r?,
            };
            meta.step += 1;
            meta.next_batch += 1;
            summary.steps_run += 1;
            summary.losses.push(br.total);
            log.write(json!({
                "step": meta.step,
                "mpc": br.mpc,
                "inst": br.inst,
                "tok": br.tok,
                "total": br.total,
                "lr": lr,
                "seed": cfg.seed,
            }))?;
        }
        let val_loss = stage1_eval_loss(cfg, &store, &data.vocab, data.selection_set())?;
        let score = BestScore {
            epoch: meta.epoch,
            val_loss,
            bleu4: None,
        };
        val_log.write(json!({ "epoch": meta.epoch, "step": meta.step, "val_total": val_loss }))?;
        log::info!(
            "stage 1 epoch {} (step {}): val total {val_loss:.4}",
            meta.epoch,
            meta.step
        );
        meta.epoch += 1;
        meta.next_batch = 0;
        if meta.best.is_none_or(|b| score.beats(&b)) {
            meta.best = Some(score);
            save("best", &store, &opt, &meta)?;
        }
        save("last", &store, &opt, &meta)?;
    }
    save("last", &store, &opt, &meta)?;
    summary.best = meta.best;
    summary.step = meta.step;
    Ok(summary)
}

/// How Stage 2 is initialized.
#[derive(Clone, Debug, Default)]
pub struct FinetuneInit {
    /// Stage-1 checkpoint directory.
    pub stage1: Option<PathBuf>,
    /// Start from random encoders when no Stage-1 checkpoint is given.
    pub allow_cold_start: bool,
    /// Continue from `out_dir/last` when it exists.
    pub resume: bool,
}

/// Builds the initial Stage-2 parameters and the set of names loaded from
/// Stage 1.
pub fn stage2_init(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    init: &FinetuneInit,
) -> Result<(ParamStore, BTreeSet<String>), TrainError> {
    let mut store = match &init.stage1 {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            check_stage(path, &ck, Stage::Stage1)?;
            checkpoint::check_compatible(&ck.meta, &cfg.dims, &vocab.hash())?;
            ck.params
        }
        None if init.allow_cold_start => mvcl::init_stage1(&cfg.dims, vocab.len(), cfg.seed),
        None => return Err(TrainError::MissingStage1),
    };
    let loaded = store.clone();
    let pretrained: BTreeSet<String> = if init.stage1.is_some() {
        loaded.names().cloned().collect()
    } else {
        BTreeSet::new()
    };
    let mut fresh = ParamStore::new();
    kgrg::init_stage2(&mut fresh, &cfg.dims, vocab.len(), cfg.seed);
    store.extend_from(&fresh);
    for (name, t) in loaded.iter() {
        if store.get(name) != Some(t) {
            return Err(TrainError::InitMismatch(name.clone()));
        }
    }
    Ok((store, pretrained))
}

/// Stage-2 finetuning on the LM loss with two learning-rate groups.
pub fn finetune(
    cfg: &RunConfig,
    data: &TrainData,
    init: &FinetuneInit,
    out_dir: &Path,
) -> Result<TrainSummary, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let last_dir = out_dir.join("last");
    let vocab_hash = data.vocab.hash();

    let (mut store, mut opt, mut meta) = if init.resume && last_dir.join("meta.json").is_file() {
        let ck = checkpoint::load(&last_dir)?;
        check_stage(&last_dir, &ck, Stage::Stage2)?;
        checkpoint::check_compatible(&ck.meta, &cfg.dims, &vocab_hash)?;
        let opt = ck.optim.unwrap_or_else(|| AdamW::new(cfg.adamw));
        (ck.params, opt, ck.meta)
    } else {
        let (store, pretrained) = stage2_init(cfg, &data.vocab, init)?;
        let meta = CheckpointMeta {
            stage: Stage::Stage2,
            dims: cfg.dims.clone(),
            vocab_hash,
            seed: cfg.seed,
            step: 0,
            epoch: 0,
            next_batch: 0,
            best: None,
            pretrained: pretrained.into_iter().collect(),
        };
        (store, AdamW::new(cfg.adamw), meta)
    };
    let pretrained: BTreeSet<String> = meta.pretrained.iter().cloned().collect();

    let appending = meta.step > 0;
    let mut log = JsonlLog::open(out_dir.join(TRAIN_LOG), appending)?;
    let mut val_log = JsonlLog::open(out_dir.join(VAL_LOG), appending)?;
    let mut summary = TrainSummary::default();
    let save = |dir: &str, store: &ParamStore, opt: &AdamW, meta: &CheckpointMeta| {
        checkpoint::save(
            &out_dir.join(dir),
            &Checkpoint {
                meta: meta.clone(),
                vocab: data.vocab.clone(),
                params: store.clone(),
                optim: Some(opt.clone()),
            },
        )
    };

    'epochs: while meta.epoch < cfg.epochs {
        let batches = make_batches(
            &data.train,
            cfg.batch_size,
            epoch_seed(cfg.seed, meta.epoch),
        );
        while meta.next_batch < batches.len() {
            if cfg.max_steps.is_some_and(|m| meta.step >= m) {
                break 'epochs;
            }
            let loss = match kgrg::finetune_step(
                &mut store,
                &mut opt,
                &cfg.dims,
                &data.vocab,
                &batches[meta.next_batch],
                &pretrained,
                &cfg.lr,
            ) {
                Err(ModelError::NonFinite { what, dump }) => {
                    save("last", &store, &opt, &meta)?;
                    return Err(write_dump(out_dir, what, dump));
                }
                r => r?,
            };
            meta.step += 1;
            meta.next_batch += 1;
            summary.steps_run += 1;
            summary.losses.push(loss);
            log.write(json!({
                "step": meta.step,
                "lm": loss,
                "lr_pretrained": cfg.lr.stage2_pretrained,
                "lr_fresh": cfg.lr.stage2_fresh,
                "seed": cfg.seed,
            }))?;
        }
        let sel = data.selection_set();
        let val_loss = stage2_eval_loss(cfg, &store, &data.vocab, sel)?;
        let bleu4 = if cfg.select_on_bleu {
            Some(greedy_bleu4(cfg, &store, &data.vocab, sel)?)
        } else {
            None
        };
        let score = BestScore {
            epoch: meta.epoch,
            val_loss,
            bleu4,
        };
        val_log.write(
            json!({ "epoch": meta.epoch, "step": meta.step, "val_lm": val_loss, "bleu4": bleu4 }),
        )?;
        log::info!(
            "stage 2 epoch {} (step {}): val lm {val_loss:.4} bleu4 {bleu4:?}",
            meta.epoch,
            meta.step
        );
        meta.epoch += 1;
        meta.next_batch = 0;
        if meta.best.is_none_or(|b| score.beats(&b)) {
            meta.best = Some(score);
            save("best", &store, &opt, &meta)?;
        }
        save("last", &store, &opt, &meta)?;
    }
    save("last", &store, &opt, &meta)?;
    summary.best = meta.best;
    summary.step = meta.step;
    Ok(summary)
}
