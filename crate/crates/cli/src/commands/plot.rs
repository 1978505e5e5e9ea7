//! `plot`: render a metrics column against environment steps, averaged
//! over one or more runs with a 95% confidence band (mean ± 1.96·SE) where
//! at least two runs cover an x position.

use std::collections::BTreeMap;
use std::path::PathBuf;

use stagerl::metrics::read_csv;

use crate::args::{single, split_kv};
use crate::svg::Chart;
use crate::{usage, CmdResult};

pub fn run(argline: &[String]) -> CmdResult {
    let mut runs: Vec<PathBuf> = Vec::new();
    let mut extras = std::collections::BTreeMap::<String, Vec<String>>::new();
    for arg in argline {
        let (k, v) = split_kv(arg)?;
        match k {
            "run" => runs.push(PathBuf::from(v)),
            "out" | "y" | "title" => {
                extras.entry(k.to_string()).or_default().push(v.to_string())
            }
            other => return Err(usage(format!("plot does not accept key '{other}'"))),
        }
    }
    if runs.is_empty() {
        return Err(usage("plot requires at least one run=DIR"));
    }
    let y_col = single(&extras, "y")?.unwrap_or_else(|| "success_rate".to_string());
    let out = single(&extras, "out")?
        .map(PathBuf::from)
        .unwrap_or_else(|| runs[0].join("plots").join(format!("{y_col}.svg")));

    // Load every CSV; all runs must agree on the column set.
    let mut first_columns: Option<Vec<String>> = None;
    let mut per_x: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for dir in &runs {
        let path = dir.join("metrics.csv");
        let (columns, rows) = read_csv(&path)?;
        if rows.is_empty() {
            return Err(anyhow::anyhow!("{} has no data rows", path.display()).into());
        }
        match &first_columns {
            None => first_columns = Some(columns.clone()),
            Some(c) if *c != columns => {
                return Err(anyhow::anyhow!(
                    "inconsistent columns: {} does not match {}",
                    path.display(),
                    runs[0].join("metrics.csv").display()
                )
                .into());
            }
            Some(_) => {}
        }
        let columns_ref = first_columns.as_ref().unwrap();
        let xi = columns_ref.iter().position(|c| c == "step").ok_or_else(|| {
            anyhow::anyhow!("{} has no 'step' column", path.display())
        })?;
        let yi = columns_ref.iter().position(|c| c == &y_col).ok_or_else(|| {
            anyhow::anyhow!("{} has no '{y_col}' column", path.display())
        })?;
        for row in &rows {
            per_x.entry(row[xi] as i64).or_default().push(row[yi]);
        }
    }

    let mut xs = Vec::with_capacity(per_x.len());
    let mut mean = Vec::with_capacity(per_x.len());
    let mut band = Vec::with_capacity(per_x.len());
    for (x, ys) in &per_x {
        let n = ys.len() as f64;
        let m = ys.iter().sum::<f64>() / n;
        xs.push(*x as f64);
        mean.push(m);
        if ys.len() >= 2 {
            let var = ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            band.push(Some((m - 1.96 * se, m + 1.96 * se)));
        } else {
            band.push(None);
        }
    }

    let default_title = format!("{y_col} ({} run{})", runs.len(), if runs.len() == 1 { "" } else { "s" });
    let title = single(&extras, "title")?.unwrap_or(default_title);
    let chart = Chart {
        title: &title,
        x_label: "environment steps",
        y_label: &y_col,
        xs: &xs,
        mean: &mean,
        band: &band,
        unit_y: y_col == "success_rate",
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(anyhow::Error::new)?;
    }
    std::fs::write(&out, chart.render()).map_err(anyhow::Error::new)?;
    println!("wrote {} ({} x positions, {} runs)", out.display(), xs.len(), runs.len());
    Ok(())
}
