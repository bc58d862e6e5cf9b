//! Line-delimited training metrics: one tab-separated file per (run,
//! seed) with a fixed, self-describing header. Formatting is shortest
//! round-trip decimal, so identical runs produce identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::TrainLog;

/// A parsed metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub method: String,
    pub seed: u64,
    pub columns: Vec<String>,
    /// One row per epoch, aligned with `columns`.
    pub rows: Vec<Vec<f64>>,
}

impl MetricsFile {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    /// Test accuracy of the last epoch, when the run recorded one.
    pub fn final_accuracy(&self) -> Option<f64> {
        let col = self.columns.iter().position(|c| c == "accuracy")?;
        self.rows.last().map(|r| r[col])
    }
}

/// Render a training log. Columns: epoch, lr, hard (when the hard term
/// ran), one `soft:<kind>` per active soft term, total, accuracy (when a
/// test split was evaluated).
pub fn format_metrics(method: &str, seed: u64, log: &TrainLog) -> String {
    let mut columns: Vec<String> = vec!["epoch".into(), "lr".into()];
    let first = log.epochs.first();
    let has_hard = first.map(|e| e.hard.is_some()).unwrap_or(true);
    let has_accuracy = first.map(|e| e.test_accuracy.is_some()).unwrap_or(false);
    if has_hard {
        columns.push("hard".into());
    }
    if let Some(first) = first {
        for (kind, _) in &first.soft {
            columns.push(format!("soft:{}", kind.name()));
        }
    }
    columns.push("total".into());
    if has_accuracy {
        columns.push("accuracy".into());
    }

    let mut out = String::new();
    out.push_str(&format!("# method: {}\n", method));
    out.push_str(&format!("# seed: {}\n", seed));
    out.push_str(&format!("# columns: {}\n", columns.join("\t")));
    for e in &log.epochs {
        let mut fields: Vec<String> = vec![e.epoch.to_string(), e.lr.to_string()];
        if let Some(h) = e.hard {
            fields.push(h.to_string());
        }
        for (_, v) in &e.soft {
            fields.push(v.to_string());
        }
        fields.push(e.total.to_string());
        if let Some(a) = e.test_accuracy {
            fields.push(a.to_string());
        }
        debug_assert_eq!(fields.len(), columns.len());
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    out
}

pub fn write_metrics(
    path: impl AsRef<Path>,
    method: &str,
    seed: u64,
    log: &TrainLog,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_metrics(method, seed, log)).map_err(|e| Error::io(path, e))
}

fn header_value<'a>(line: &'a str, key: &str, path: &Path) -> Result<&'a str> {
    line.strip_prefix(key).map(str::trim).ok_or_else(|| {
        Error::Format(format!(
            "{}: expected a '{}' header line, got {:?}",
            path.display(),
            key.trim(),
            line
        ))
    })
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<MetricsFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let method = header_value(lines.next().unwrap_or(""), "# method:", path)?.to_string();
    let seed_text = header_value(lines.next().unwrap_or(""), "# seed:", path)?;
    let seed: u64 = seed_text.parse().map_err(|_| {
        Error::Format(format!(
            "{}: seed header is not an integer: {:?}",
            path.display(),
            seed_text
        ))
    })?;
    let columns: Vec<String> = header_value(lines.next().unwrap_or(""), "# columns:", path)?
        .split('\t')
        .map(str::to_string)
        .collect();

    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns.len() {
            return Err(Error::Format(format!(
                "{}: line {} has {} fields but the header names {} columns",
                path.display(),
                i + 4,
                fields.len(),
                columns.len()
            )));
        }
        let mut row = Vec::with_capacity(fields.len());
        for f in fields {
            row.push(f.parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "{}: line {}: not a number: {:?}",
                    path.display(),
                    i + 4,
                    f
                ))
            })?);
        }
        rows.push(row);
    }
    Ok(MetricsFile {
        method,
        seed,
        columns,
        rows,
    })
}
