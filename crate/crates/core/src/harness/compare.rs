use std::fmt;
use std::path::{Path, PathBuf};

use super::metrics::median;
use super::report::read_metrics;
use crate::error::{Error, Result};

/// One (model, split, mode) line across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub model: String,
    pub split: String,
    pub mode: String,
    /// mIoU per run, in the order the runs were given; `None` where a run
    /// lacks this line.
    pub values: Vec<Option<f64>>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<PathBuf>,
    /// Grouped by split, ascending median mIoU within a split.
    pub rows: Vec<CompareRow>,
}

/// Reads `metrics.csv` of every run directory and lines them up.
pub fn compare_runs(run_dirs: &[PathBuf]) -> Result<Comparison> {
    if run_dirs.is_empty() {
        return Err(Error::invalid("compare", "no run directories given"));
    }
    let mut rows: Vec<CompareRow> = Vec::new();
    for (r, dir) in run_dirs.iter().enumerate() {
        for (model, split, mode, miou) in read_metrics(&dir.join("metrics.csv"))? {
            let pos = rows
                .iter()
                .position(|x| x.model == model && x.split == split && x.mode == mode);
            let row = match pos {
                Some(i) => &mut rows[i],
                None => {
                    rows.push(CompareRow {
                        model,
                        split,
                        mode,
                        values: vec![None; run_dirs.len()],
                        median: f64::NAN,
                    });
                    rows.last_mut().expect("pushed")
                }
            };
            row.values[r] = Some(miou);
        }
    }
    for row in &mut rows {
        let present: Vec<f64> = row.values.iter().flatten().copied().collect();
        row.median = median(&present);
    }
    rows.sort_by(|a, b| a.split.cmp(&b.split).then(a.median.total_cmp(&b.median)));
    Ok(Comparison {
        runs: run_dirs.to_vec(),
        rows,
    })
}

impl Comparison {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["split".to_string(), "model".into(), "mode".into(), "median".into()];
        header.extend(self.runs.iter().map(|p| p.display().to_string()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.split.clone(), r.model.clone(), r.mode.clone(), r.median.to_string()];
            rec.extend(r.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:<22} {:<16} {:>8}  per run", "split", "model", "mode", "median")?;
        for r in &self.rows {
            write!(f, "{:<12} {:<22} {:<16} {:>8.4} ", r.split, r.model, r.mode, r.median)?;
            for v in &r.values {
                match v {
                    Some(x) => write!(f, " {x:.4}")?,
                    None => write!(f, "      -")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
