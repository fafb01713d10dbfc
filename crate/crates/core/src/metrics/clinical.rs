use std::fmt::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::MetricError;

/// The fourteen chest observations, in reporting order.
pub const OBSERVATIONS: [&str; 14] = [
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
    "No Finding",
];

/// Default five-observation subset (indices into [`OBSERVATIONS`]):
/// Atelectasis, Cardiomegaly, Consolidation, Edema, Pleural Effusion.
pub const CX5: [usize; 5] = [7, 1, 5, 4, 9];

/// Binary label per observation. Parsed from a JSON array of 14 booleans or
/// integers; only `1`/`true` counts as positive, so uncertain (`-1`) and
/// blank (`0`) collapse to negative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ObservationLabels(pub [bool; 14]);

impl Serialize for ObservationLabels {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ObservationLabels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bools(Vec<bool>),
            Ints(Vec<i64>),
        }
        let v: Vec<bool> = match Raw::deserialize(d)? {
            Raw::Bools(b) => b,
            Raw::Ints(i) => i.into_iter().map(|x| x == 1).collect(),
        };
        let arr: [bool; 14] = v.try_into().map_err(|v: Vec<bool>| {
            serde::de::Error::custom(format!("expected 14 labels, got {}", v.len()))
        })?;
        Ok(Self(arr))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObservationScore {
    pub name: String,
    /// Share of gold-positive reports, in percent.
    pub prevalence: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    #[serde(flatten)]
    pub prf: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct F1Report {
    pub per_obs: Vec<ObservationScore>,
    pub micro: Prf,
    pub macro_avg: Prf,
}

/// Per-observation, micro (pooled counts), and macro (unweighted mean)
/// precision/recall/F1 over the observations in `subset`.
pub fn ce_f1(
    pred: &[ObservationLabels],
    gold: &[ObservationLabels],
    subset: &[usize],
) -> Result<F1Report, MetricError> {
    super::check_aligned(pred, gold)?;
    let mut per_obs = Vec::with_capacity(subset.len());
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for &o in subset {
        let (mut tp, mut fp, mut fn_, mut pos) = (0, 0, 0, 0);
        for (p, g) in pred.iter().zip(gold) {
            let (p, g) = (p.0[o], g.0[o]);
            pos += g as usize;
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per_obs.push(ObservationScore {
            name: OBSERVATIONS[o].to_string(),
            prevalence: 100.0 * pos as f64 / gold.len() as f64,
            tp,
            fp,
            fn_,
            prf: Prf::from_counts(tp, fp, fn_),
        });
    }
    let k = per_obs.len().max(1) as f64;
    let macro_avg = Prf {
        precision: per_obs.iter().map(|s| s.prf.precision).sum::<f64>() / k,
        recall: per_obs.iter().map(|s| s.prf.recall).sum::<f64>() / k,
        f1: per_obs.iter().map(|s| s.prf.f1).sum::<f64>() / k,
    };
    Ok(F1Report {
        per_obs,
        micro: Prf::from_counts(tp_all, fp_all, fn_all),
        macro_avg,
    })
}

/// `Observation,%,P,R,F1` rows followed by micro and macro averages.
pub fn f1_table_csv(r: &F1Report) -> String {
    let mut s = String::from("observation,percent,precision,recall,f1\n");
    for o in &r.per_obs {
        writeln!(
            s,
            "{},{:.1},{:.3},{:.3},{:.3}",
            o.name, o.prevalence, o.prf.precision, o.prf.recall, o.prf.f1
        )
        .unwrap();
    }
    for (name, p) in [("micro avg", r.micro), ("macro avg", r.macro_avg)] {
        writeln!(s, "{name},-,{:.3},{:.3},{:.3}", p.precision, p.recall, p.f1).unwrap();
    }
    s
}
