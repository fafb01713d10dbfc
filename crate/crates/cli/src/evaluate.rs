use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use mvrg::metrics::{
    self, GreenCounts, GreenSummary, MetricReport, ObservationLabels, CX5, OBSERVATIONS,
};
use serde::Deserialize;

use crate::Failure;

/// One generations line. Extra fields such as `logprob_sum` are ignored.
#[derive(Debug, Deserialize)]
struct Record {
    study_id: String,
    generated: String,
    reference: String,
    labels_pred: Option<ObservationLabels>,
    labels_gold: Option<ObservationLabels>,
    green_counts: Option<GreenCounts>,
}

fn parse(text: &str) -> Result<Vec<Record>, Failure> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| Failure::Data(anyhow!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Failure::Data(anyhow!("no records")));
    }
    Ok(out)
}

/// `Some` only when every record carries the field; an error when only some do.
fn all_or_none<T: Copy>(
    records: &[Record],
    what: &str,
    get: impl Fn(&Record) -> Option<T>,
) -> Result<Option<Vec<T>>, Failure> {
    let present = records.iter().filter(|r| get(r).is_some()).count();
    if present == 0 {
        return Ok(None);
    }
    if let Some(r) = records.iter().find(|r| get(r).is_none()) {
        return Err(Failure::Data(anyhow!(
            "study {} lacks {what} while others have it",
            r.study_id
        )));
    }
    Ok(Some(records.iter().filter_map(get).collect()))
}

fn observation_indices(names: &[String]) -> Result<Vec<usize>, Failure> {
    names
        .iter()
        .map(|n| {
            OBSERVATIONS
                .iter()
                .position(|o| o.eq_ignore_ascii_case(n.trim()))
                .ok_or_else(|| Failure::Usage(anyhow!("unknown observation `{n}`")))
        })
        .collect()
}

pub fn run(input: &Path, out: Option<&Path>, ce5: Option<&[String]>) -> Result<(), Failure> {
    let subset = match ce5 {
        Some(names) => observation_indices(names)?,
        None => CX5.to_vec(),
    };
    let text = fs::read_to_string(input)
        .with_context(|| format!("reading {}", input.display()))
        .map_err(Failure::Data)?;
    let records = parse(&text)?;

    let cands: Vec<String> = records.iter().map(|r| r.generated.clone()).collect();
    let refs: Vec<String> = records.iter().map(|r| r.reference.clone()).collect();
    let (n, bleu, rouge_l, meteor) =
        metrics::language_metrics(&cands, &refs).map_err(|e| Failure::Data(e.into()))?;

    let pred = all_or_none(&records, "labels_pred", |r| r.labels_pred)?;
    let gold = all_or_none(&records, "labels_gold", |r| r.labels_gold)?;
    let (ce14, ce5) = match (pred, gold) {
        (Some(p), Some(g)) => {
            let all: Vec<usize> = (0..OBSERVATIONS.len()).collect();
            let f1 = |s: &[usize]| metrics::ce_f1(&p, &g, s).map_err(|e| Failure::Data(e.into()));
            (Some(f1(&all)?), Some(f1(&subset)?))
        }
        (None, None) => (None, None),
        _ => {
            return Err(Failure::Data(anyhow!(
                "labels_pred and labels_gold must appear together"
            )))
        }
    };
    let green = all_or_none(&records, "green_counts", |r| r.green_counts)?
        .map(|c| GreenSummary::from_counts(&c));

    let report = MetricReport {
        n,
        bleu,
        rouge_l,
        meteor,
        ce14,
        ce5,
        green,
    };
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    println!("{json}");
    if let Some(dir) = out {
        let write = |name: &str, body: &str| {
            fs::write(dir.join(name), body)
                .with_context(|| format!("writing {}", dir.join(name).display()))
                .map_err(Failure::Data)
        };
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::Data)?;
        write("metrics.json", &format!("{json}\n"))?;
        if let (Some(a), Some(b)) = (&report.ce14, &report.ce5) {
            write("ce14.csv", &metrics::f1_table_csv(a))?;
            write("ce5.csv", &metrics::f1_table_csv(b))?;
        }
    }
    Ok(())
}
