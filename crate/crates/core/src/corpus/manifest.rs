//! JSONL study manifests.
//!
//! One study per line:
//! `{"study_id", "views": [paths], "anchor_index"?, "indication"?, "report",
//! "factual_serialization"?}`. View paths are TEN1 files, resolved relative
//! to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::text::{clean_indication, fallback_serialize, ReportFilter};
use super::{CorpusError, Study};
use crate::tensor::ten1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub study_id: String,
    pub views: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indication: Option<String>,
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factual_serialization: Option<Vec<String>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads every study from a manifest. Studies whose report is empty or
/// blacklisted by `filter` are skipped with a warning.
pub fn load_manifest(path: &Path, filter: &ReportFilter) -> Result<Vec<Study>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut studies = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if let Some(study) = study_from_record(rec, &base, line_no, filter)? {
            studies.push(study);
        }
    }
    Ok(studies)
}

fn study_from_record(
    rec: ManifestRecord,
    base: &Path,
    line: usize,
    filter: &ReportFilter,
) -> Result<Option<Study>, CorpusError> {
    if filter.is_insignificant(&rec.report) {
        log::warn!(
            "line {line}: skipping study {} with empty or insignificant report",
            rec.study_id
        );
        return Ok(None);
    }
    if rec.views.is_empty() {
        return Err(CorpusError::Malformed {
            line,
            message: "field `views` is empty".into(),
        });
    }
    let anchor_index = rec.anchor_index.unwrap_or(0);
    if anchor_index >= rec.views.len() {
        return Err(CorpusError::AnchorOutOfRange {
            line,
            anchor_index,
            views: rec.views.len(),
        });
    }
    let mut views = Vec::with_capacity(rec.views.len());
    for v in &rec.views {
        let p = resolve(base, v);
        let t = ten1::read(&p).map_err(|source| CorpusError::View {
            line,
            path: p.display().to_string(),
            source,
        })?;
        if t.rank() != 2 {
            return Err(CorpusError::Malformed {
                line,
                message: format!(
                    "view {} has shape {:?}, expected [H, W]",
                    p.display(),
                    t.shape()
                ),
            });
        }
        views.push(t);
    }
    let factual_serialization = match rec.factual_serialization {
        Some(fs) if !fs.is_empty() => fs,
        _ => fallback_serialize(&rec.report),
    };
    Ok(Some(Study {
        study_id: rec.study_id,
        views,
        anchor_index,
        indication: rec.indication.as_deref().and_then(clean_indication),
        report: rec.report,
        factual_serialization,
    }))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes studies as a manifest plus one TEN1 file per view under
/// `image_dir` (which must sit inside the manifest's directory).
pub fn write_manifest(path: &Path, image_dir: &Path, studies: &[Study]) -> Result<(), CorpusError> {
    fs::create_dir_all(image_dir).map_err(io_err(image_dir))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for s in studies {
        let mut views = Vec::with_capacity(s.views.len());
        for (i, v) in s.views.iter().enumerate() {
            let file = image_dir.join(format!("{}_v{i}.ten1", s.study_id));
            ten1::write(&file, v).map_err(|source| CorpusError::View {
                line: 0,
                path: file.display().to_string(),
                source,
            })?;
            let rel = file.strip_prefix(&base).unwrap_or(&file);
            views.push(rel.to_string_lossy().replace('\\', "/"));
        }
        let rec = ManifestRecord {
            study_id: s.study_id.clone(),
            views,
            anchor_index: Some(s.anchor_index),
            indication: s.indication.clone(),
            report: s.report.clone(),
            factual_serialization: Some(s.factual_serialization.clone()),
        };
        serde_json::to_writer(&mut out, &rec).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}
