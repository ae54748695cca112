use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::recall::DirectionalRecall;
use crate::corpus::write_json;
use crate::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

/// A report that can be emitted as JSON plus a plain-text table.
pub trait Report: Serialize {
    fn to_table(&self) -> String;
}

/// Writes `<stem>.json` and `<stem>.txt`; returns both paths.
pub fn emit_report<R: Report>(report: &R, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = stem.with_extension("json");
    let txt = stem.with_extension("txt");
    write_json(&json, report)?;
    std::fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    Ok((json, txt))
}

/// One labelled row of the image-speech retrieval table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub label: String,
    pub recall: DirectionalRecall,
}

/// Image-speech retrieval results laid out as Image / Speech / Mean, each
/// at R@1, R@5, R@10. "Image" is speech-to-image retrieval, "Speech" is
/// image-to-speech.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub report_version: u32,
    pub kind: String,
    pub config_digest: Option<String>,
    pub rows: Vec<RetrievalRow>,
}

impl RetrievalReport {
    pub fn new(config_digest: Option<String>, rows: Vec<RetrievalRow>) -> Self {
        Self {
            report_version: REPORT_VERSION,
            kind: "retrieval".into(),
            config_digest,
            rows,
        }
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

impl Report for RetrievalReport {
    fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:w$}  {:^20}  {:^20}  {:^20}", "", "Image", "Speech", "Mean");
        let _ = write!(out, "{:w$}", "");
        for _ in 0..3 {
            let _ = write!(out, "  {:>6}{:>7}{:>7}", "R@1", "R@5", "R@10");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:w$}", row.label);
            for dir in [&row.recall.speech_to_image, &row.recall.image_to_speech, &row.recall.mean] {
                let _ = write!(out, "  {:>6}{:>7}{:>7}", pct(dir[0]), pct(dir[1]), pct(dir[2]));
            }
            out.push('\n');
        }
        out
    }
}

/// Spearman scores (x100) by subset and audio kind. The natural-speech
/// columns are `None` for synthetic corpora.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimiCell {
    pub synthetic: Option<f64>,
    pub natural: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimiReport {
    pub report_version: u32,
    pub kind: String,
    pub config_digest: Option<String>,
    pub label: String,
    pub extraction_point: String,
    pub dev: SimiCell,
    pub test: SimiCell,
    pub dev_pairs: usize,
    pub test_pairs: usize,
}

impl Report for SimiReport {
    fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let w = self.label.len().max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:w$}  {:^21}  {:^21}", "", "dev", "test");
        let _ = writeln!(out, "{:w$}  {:>10} {:>10}  {:>10} {:>10}", "", "synthetic", "natural", "synthetic", "natural");
        let _ = writeln!(
            out,
            "{:w$}  {:>10} {:>10}  {:>10} {:>10}",
            self.label,
            cell(self.dev.synthetic),
            cell(self.dev.natural),
            cell(self.test.synthetic),
            cell(self.test.natural)
        );
        out
    }
}

/// Caption-to-caption retrieval in the audio-only mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub report_version: u32,
    pub kind: String,
    pub config_digest: Option<String>,
    pub branch: String,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub num_queries: usize,
    pub num_candidates: usize,
}

impl Report for SemanticReport {
    fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:8}", "branch");
        for k in &self.ks {
            let _ = write!(out, "{:>8}", format!("R@{k}"));
        }
        let _ = write!(out, "\n{:8}", self.branch);
        for r in &self.recall {
            let _ = write!(out, "{:>8}", pct(*r));
        }
        out.push('\n');
        out
    }
}
