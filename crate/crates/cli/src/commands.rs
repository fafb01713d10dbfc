use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mvrg::checkpoint::{self, Stage};
use mvrg::corpus::{self, synth_corpus, ReportFilter, Study, SynthSpec};
use mvrg::kgrg::{self, DecodeMode};
use mvrg::train::{self, FinetuneInit, TrainData, TrainSummary};
use mvrg::RunConfig;
use serde_json::json;

use crate::{Common, Failure};

/// Reads the config file, applies flag overrides, and validates.
pub fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(Failure::Usage)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .map_err(Failure::Usage)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synth.corpus.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    cfg.validate()
        .map_err(|e| Failure::Usage(anyhow!("invalid config: {e}")))?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    cfg.paths.out_dir.clone().ok_or_else(|| {
        Failure::Usage(anyhow!(
            "no output directory: pass --out or set paths.out_dir"
        ))
    })
}

fn data_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn split_sizes(n: usize, train_frac: f64, val_frac: f64) -> (usize, usize) {
    let train = ((n as f64 * train_frac).round() as usize).min(n);
    let val = ((n as f64 * val_frac).round() as usize).min(n - train);
    (train, val)
}

/// One row of the corpus statistics table.
fn stats_row(name: &str, studies: &[Study]) -> String {
    let images: usize = studies.iter().map(Study::view_count).sum();
    let with_ind = studies.iter().filter(|s| s.indication.is_some()).count();
    let pct = if studies.is_empty() {
        0.0
    } else {
        100.0 * with_ind as f64 / studies.len() as f64
    };
    format!("{name:<6} {images:>7} {:>7} {pct:>6.1}", studies.len())
}

pub fn synth(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out_dir(&cfg)?;
    let spec: &SynthSpec = &cfg.synth.corpus;
    let (train_n, val_n) = split_sizes(spec.n_studies, cfg.synth.train_frac, cfg.synth.val_frac);
    if common.dry_run {
        println!(
            "would write {} studies ({train_n} train, {val_n} val, {} test) to {}",
            spec.n_studies,
            spec.n_studies - train_n - val_n,
            out.display()
        );
        return Ok(());
    }
    let (studies, _) = synth_corpus(spec);
    let (train, rest) = studies.split_at(train_n);
    let (val, test) = rest.split_at(val_n);
    let images = out.join("images");
    println!("{:<6} {:>7} {:>7} {:>6}", "split", "#Img", "#Rpt", "%Ind");
    for (name, part) in [("train", train), ("val", val), ("test", test)] {
        corpus::write_manifest(&out.join(format!("{name}.jsonl")), &images, part)
            .map_err(data_err)?;
        println!("{}", stats_row(name, part));
    }
    println!("{}", stats_row("all", &studies));
    Ok(())
}

fn summary_json(s: &TrainSummary, out: &Path) -> serde_json::Value {
    json!({
        "steps_run": s.steps_run,
        "step": s.step,
        "final_loss": s.losses.last(),
        "best": s.best,
        "out_dir": out,
    })
}

fn load_data(cfg: &RunConfig) -> Result<TrainData, Failure> {
    let data = TrainData::from_config(cfg)?;
    if data.train.is_empty() {
        return Err(Failure::Data(anyhow!(
            "training manifest has no usable studies"
        )));
    }
    Ok(data)
}

fn describe(data: &TrainData) -> serde_json::Value {
    json!({
        "train_studies": data.train.len(),
        "val_studies": data.val.len(),
        "vocab_size": data.vocab.len(),
        "vocab_hash": data.vocab.hash(),
    })
}

pub fn pretrain(common: &Common, resume: bool) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out_dir(&cfg)?;
    let data = load_data(&cfg)?;
    if common.dry_run {
        print_json(&json!({ "dry_run": true, "data": describe(&data) }));
        return Ok(());
    }
    let s = train::pretrain(&cfg, &data, &out, resume)?;
    print_json(&summary_json(&s, &out));
    Ok(())
}

pub fn finetune(common: &Common, init: FinetuneInit) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out_dir(&cfg)?;
    let data = load_data(&cfg)?;
    if common.dry_run {
        let (_, pretrained) = train::stage2_init(&cfg, &data.vocab, &init)?;
        print_json(
            &json!({ "dry_run": true, "data": describe(&data), "pretrained_tensors": pretrained.len() }),
        );
        return Ok(());
    }
    let s = train::finetune(&cfg, &data, &init, &out)?;
    print_json(&summary_json(&s, &out));
    Ok(())
}

pub fn generate(
    ckpt_dir: &Path,
    manifest: &Path,
    mode: DecodeMode,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let ck = checkpoint::load(ckpt_dir).map_err(data_err)?;
    if ck.meta.stage != Stage::Stage2 {
        return Err(Failure::Data(anyhow!(
            "{} is not a Stage-2 checkpoint",
            ckpt_dir.display()
        )));
    }
    let studies = corpus::load_manifest(manifest, &ReportFilter::default()).map_err(data_err)?;
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(
            fs::File::create(p)
                .with_context(|| format!("creating {}", p.display()))
                .map_err(Failure::Data)?,
        ),
        None => Box::new(io::stdout().lock()),
    };
    let mut sink = BufWriter::new(sink);
    for s in &studies {
        let g = kgrg::generate(&ck.params, &ck.meta.dims, &ck.vocab, s, mode).map_err(data_err)?;
        let line = json!({
            "study_id": s.study_id,
            "generated": g.text(&ck.vocab),
            "reference": s.report,
            "logprob_sum": g.logprob_sum(),
            "stopped_by": g.stopped_by,
        });
        writeln!(sink, "{line}").map_err(data_err)?;
    }
    sink.flush().map_err(data_err)?;
    log::info!("generated {} reports with {mode}", studies.len());
    Ok(())
}
