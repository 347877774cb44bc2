//! Comparison tables over finished run directories.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::LatencyMeasurement;
use crate::prune::PruneRound;
use crate::reinforce::EvaluationRecord;
use crate::reward::TeacherReference;

pub const TEACHER_FILE: &str = "teacher_reference.json";

/// Contents of `teacher_reference.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub dataset: String,
    pub reference: TeacherReference,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_measurement: Option<LatencyMeasurement>,
}

impl TeacherRecord {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub accuracy: f64,
    pub accuracy_drop: f64,
    pub parameters: u64,
    pub compression_ratio: f64,
    pub latency: f64,
    pub speedup: f64,
    pub reward: Option<f64>,
    pub complete: bool,
}

impl ReportRow {
    pub fn teacher(reference: &TeacherReference) -> Self {
        ReportRow {
            method: "Teacher".into(),
            accuracy: reference.accuracy,
            accuracy_drop: 0.0,
            parameters: reference.parameters,
            compression_ratio: 1.0,
            latency: reference.latency,
            speedup: 1.0,
            reward: None,
            complete: true,
        }
    }

    pub fn from_record(method: &str, record: &EvaluationRecord, reference: &TeacherReference) -> Self {
        ReportRow {
            method: method.into(),
            accuracy: record.accuracy,
            accuracy_drop: reference.accuracy - record.accuracy,
            parameters: record.parameters,
            compression_ratio: reference.parameters as f64 / record.parameters as f64,
            latency: record.latency,
            speedup: reference.latency / record.latency,
            reward: Some(record.reward),
            complete: true,
        }
    }

    pub fn incomplete(method: &str) -> Self {
        ReportRow {
            method: method.into(),
            accuracy: f64::NAN,
            accuracy_drop: f64::NAN,
            parameters: 0,
            compression_ratio: f64::NAN,
            latency: f64::NAN,
            speedup: f64::NAN,
            reward: None,
            complete: false,
        }
    }
}

/// Four significant figures.
pub fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return "-".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-3..6).contains(&mag) {
        format!("{:.*}", (3 - mag).max(0) as usize, x)
    } else {
        format!("{x:.3e}")
    }
}

/// Teacher reference and result row of one run directory. Compression runs
/// report `best/record.json`; pruning runs their last round.
pub fn load_run(dir: &Path) -> (Option<TeacherReference>, ReportRow) {
    let method = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let reference = TeacherRecord::load(&dir.join(TEACHER_FILE)).ok().map(|t| t.reference);
    let Some(reference) = reference else {
        return (None, ReportRow::incomplete(&method));
    };
    let best = dir.join("best").join("record.json");
    if let Ok(text) = fs::read_to_string(&best) {
        return match serde_json::from_str::<EvaluationRecord>(&text) {
            Ok(r) => (Some(reference), ReportRow::from_record(&method, &r, &reference)),
            Err(_) => (Some(reference), ReportRow::incomplete(&method)),
        };
    }
    let rounds = dir.join("prune").join("rounds.jsonl");
    if let Ok(text) = fs::read_to_string(&rounds) {
        if let Some(Ok(last)) = text.lines().filter(|l| !l.trim().is_empty()).next_back().map(serde_json::from_str::<PruneRound>) {
            return (Some(reference), ReportRow::from_record(&method, &last.record, &reference));
        }
    }
    (Some(reference), ReportRow::incomplete(&method))
}

/// Teacher row (from the first run with a reference) followed by one row
/// per run directory.
pub fn build_rows(dirs: &[&Path]) -> Vec<ReportRow> {
    let loaded: Vec<_> = dirs.iter().map(|d| load_run(d)).collect();
    let mut rows = Vec::with_capacity(loaded.len() + 1);
    if let Some(reference) = loaded.iter().find_map(|(r, _)| *r) {
        rows.push(ReportRow::teacher(&reference));
    }
    rows.extend(loaded.into_iter().map(|(_, row)| row));
    rows
}

const HEADER: [&str; 8] = [
    "method",
    "accuracy",
    "accuracy_drop",
    "parameters",
    "compression_ratio",
    "latency_s",
    "speedup",
    "reward",
];

fn cells(row: &ReportRow) -> Vec<String> {
    if !row.complete {
        let mut v = vec![row.method.clone(), "incomplete".into()];
        v.resize(HEADER.len(), "-".into());
        return v;
    }
    vec![
        row.method.clone(),
        sig4(row.accuracy),
        sig4(row.accuracy_drop),
        row.parameters.to_string(),
        sig4(row.compression_ratio),
        sig4(row.latency),
        sig4(row.speedup),
        row.reward.map_or_else(|| "-".into(), sig4),
    ]
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&cells(r).join(","));
        out.push('\n');
    }
    out
}

pub fn render_text(rows: &[ReportRow]) -> String {
    let table: Vec<Vec<String>> = std::iter::once(HEADER.iter().map(|s| s.to_string()).collect())
        .chain(rows.iter().map(cells))
        .collect();
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in table.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}
