//! Deterministic CSV emission for training metrics.
//!
//! Rows contain only values derived from the seeded computation — no
//! timestamps, durations or hostnames — so a rerun with the same config and
//! seed produces a byte-identical file. Floats are written with Rust's
//! shortest round-trip formatting, which is itself deterministic.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub struct MetricsWriter {
    w: BufWriter<File>,
    n_cols: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, columns: &[String]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::EmptyInput("metrics columns"));
        }
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", columns.join(","))?;
        Ok(MetricsWriter { w, n_cols: columns.len() })
    }

    /// Append one row. Whole numbers print without a fractional part.
    pub fn write_row(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_cols {
            return Err(Error::DimMismatch {
                context: "metrics row width".into(),
                expected: self.n_cols,
                got: values.len(),
            });
        }
        let mut line = String::new();
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("metrics column {i}")));
            }
            line.push_str(&v.to_string());
        }
        writeln!(self.w, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Parse a metrics CSV back into (header, rows).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::EmptyInput("metrics csv")),
    };
    let columns: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    Error::Format(format!("metrics csv line {}: bad number '{s}'", ln + 2))
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != columns.len() {
            return Err(Error::Format(format!(
                "metrics csv line {}: {} fields, header has {}",
                ln + 2,
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok((columns, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("stagerl-metrics-{name}-{}", std::process::id()));
        p
    }

    #[test]
    fn write_then_read_round_trips() {
        let path = temp_path("rt");
        let cols = vec!["step".to_string(), "alpha".to_string(), "loss".to_string()];
        {
            let mut w = MetricsWriter::create(&path, &cols).unwrap();
            w.write_row(&[0.0, 0.0, 0.6931471805599453]).unwrap();
            w.write_row(&[2500.0, 0.125, 0.1]).unwrap();
            w.flush().unwrap();
        }
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, cols);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], vec![0.0, 0.0, 0.6931471805599453]);
        assert_eq!(rows[1], vec![2500.0, 0.125, 0.1]);
        // Whole numbers serialize without a trailing ".0".
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,alpha,loss\n0,0,0.6931471805599453\n2500,0.125,0.1\n"));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn identical_rows_produce_identical_bytes() {
        let write = |path: &Path| {
            let cols = vec!["a".to_string(), "b".to_string()];
            let mut w = MetricsWriter::create(path, &cols).unwrap();
            for i in 0..50 {
                let x = (i as f64) * 0.3333333333333333;
                w.write_row(&[x, x.sin()]).unwrap();
            }
            w.flush().unwrap();
        };
        let p1 = temp_path("b1");
        let p2 = temp_path("b2");
        write(&p1);
        write(&p2);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_file(&p1).unwrap();
        std::fs::remove_file(&p2).unwrap();
    }

    #[test]
    fn width_and_finiteness_are_enforced() {
        let path = temp_path("w");
        let cols = vec!["a".to_string(), "b".to_string()];
        let mut w = MetricsWriter::create(&path, &cols).unwrap();
        assert!(w.write_row(&[1.0]).is_err());
        assert!(w.write_row(&[1.0, f64::NAN]).is_err());
        drop(w);
        std::fs::remove_file(&path).unwrap();
    }
}
