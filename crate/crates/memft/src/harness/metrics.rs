//! Metrics serialization: JSONL for per-step/per-eval records, CSV for sweep
//! tables.
//!
//! Output is deterministic: identical records produce identical bytes, which
//! is what makes "same seed, same config, same metrics file" checkable at the
//! byte level.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;

use super::stream::SweepRow;

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut items = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(line)?);
    }
    Ok(items)
}

// ── CSV ──

#[derive(Debug, Clone)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl CsvTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let line = |cells: &[String]| {
            cells.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(",")
        };
        out.push_str(&line(&self.headers));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

/// NaN (used by failed sweep arms) renders as an empty cell.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> CsvTable {
    let headers = [
        "label",
        "method",
        "lr",
        "t",
        "rank",
        "alpha",
        "final_target_acc",
        "baseline_heldout_acc",
        "final_heldout_acc",
        "heldout_drop",
        "baseline_heldout_nll",
        "final_heldout_nll",
        "nll_increase",
        "error",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.method.clone(),
                fmt_f64(r.lr),
                fmt_opt(&r.t),
                fmt_opt(&r.rank),
                r.alpha.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.final_target_acc),
                fmt_f64(r.baseline_heldout_acc),
                fmt_f64(r.final_heldout_acc),
                fmt_f64(r.heldout_drop),
                fmt_f64(r.baseline_heldout_nll),
                fmt_f64(r.final_heldout_nll),
                fmt_f64(r.nll_increase),
                fmt_opt(&r.error),
            ]
        })
        .collect();
    CsvTable { headers, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::stream::EvalReport;

    #[test]
    fn jsonl_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let items = vec![
            EvalReport { facts_seen: 0, step: 0, target_acc: 0.0, heldout_acc: 0.9, heldout_nll: 1.25 },
            EvalReport { facts_seen: 5, step: 20, target_acc: 0.8, heldout_acc: 0.85, heldout_nll: 1.5 },
        ];
        write_jsonl(&path, &items).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        write_jsonl(&path, &items).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
        let back: Vec<EvalReport> = read_jsonl(&path).unwrap();
        assert_eq!(back, items);
        assert_eq!(bytes1.iter().filter(|&&b| b == b'\n').count(), 2);
    }

    #[test]
    fn csv_quotes_awkward_fields() {
        let t = CsvTable {
            headers: vec!["a".into(), "b".into()],
            rows: vec![vec!["plain".into(), "has,comma \"q\"".into()]],
        };
        let s = t.render();
        assert_eq!(s, "a,b\nplain,\"has,comma \"\"q\"\"\"\n");
    }

    #[test]
    fn nan_renders_empty() {
        assert_eq!(fmt_f64(f64::NAN), "");
        assert_eq!(fmt_f64(0.5), "0.5");
    }
}
