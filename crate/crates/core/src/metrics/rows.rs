//! `metrics.csv` rows in the `value/levels` reporting convention.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    /// Number of intensity levels the value was measured at, if any.
    pub levels: Option<usize>,
    /// Free-form configuration echo (no commas or newlines).
    pub config: String,
}

impl MetricRow {
    pub fn new(metric: &str, value: f64, levels: Option<usize>, config: &str) -> Self {
        MetricRow {
            metric: metric.to_string(),
            value,
            levels,
            config: config.replace([',', '\n'], ";"),
        }
    }

    /// `A/B` when a level count is attached, otherwise just `A`.
    pub fn display(&self) -> String {
        match self.levels {
            Some(b) => format!("{:.3}/{b}", self.value),
            None => format!("{:.3}", self.value),
        }
    }
}

pub const METRICS_HEADER: &str = "metric,value,levels,display,config";

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let levels = r.levels.map_or(String::new(), |l| l.to_string());
        out.push_str(&format!("{},{:e},{},{},{}\n", r.metric, r.value, levels, r.display(), r.config));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(5, ',').collect();
        if f.len() != 5 {
            return Err(Error::format(path, format!("line {}: expected 5 fields", n + 1)));
        }
        let value = f[1]
            .parse::<f64>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        let levels = if f[2].is_empty() {
            None
        } else {
            Some(
                f[2].parse::<usize>()
                    .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
            )
        };
        rows.push(MetricRow {
            metric: f[0].to_string(),
            value,
            levels,
            config: f[4].to_string(),
        });
    }
    Ok(rows)
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
