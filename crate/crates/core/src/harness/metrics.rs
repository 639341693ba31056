use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 6] = ["setting", "shots", "seed", "mae", "rmse", "wall_seconds"];

/// `(MAE, RMSE)` of a residual set.
pub fn mae_rmse(residuals: &[f64]) -> Result<(f64, f64)> {
    if residuals.is_empty() {
        return Err(Error::Validation("no residuals to score".into()));
    }
    let n = residuals.len() as f64;
    let mae = residuals.iter().map(|r| r.abs()).sum::<f64>() / n;
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    Ok((mae, rmse))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub setting: String,
    /// Shot count, or `all` when training used every TRAIN row.
    pub shots: String,
    /// Seed, or `summary` for an aggregate row.
    pub seed: String,
    pub mae: String,
    pub rmse: String,
    pub wall_seconds: String,
}

impl MetricsRow {
    pub fn run(setting: &str, shots: Option<usize>, seed: u64, mae: f64, rmse: f64, wall: f64) -> Self {
        Self {
            setting: setting.to_string(),
            shots: shots_label(shots),
            seed: seed.to_string(),
            mae: fmt_metric(mae),
            rmse: fmt_metric(rmse),
            wall_seconds: format!("{wall:.3}"),
        }
    }

    /// `mean±std` of per-seed MAE and RMSE (sample standard deviation,
    /// 0 for a single seed). Non-finite entries mark failed runs and are
    /// left out.
    pub fn summary(setting: &str, shots: Option<usize>, runs: &[(f64, f64, f64)]) -> Self {
        let ok: Vec<_> = runs.iter().filter(|r| r.0.is_finite() && r.1.is_finite()).collect();
        let col = |f: fn(&(f64, f64, f64)) -> f64| {
            let v: Vec<f64> = ok.iter().map(|r| f(r)).collect();
            let (m, s) = mean_std(&v);
            format!("{}±{}", fmt_metric(m), fmt_metric(s))
        };
        let wall: f64 = runs.iter().map(|r| r.2).sum();
        Self {
            setting: setting.to_string(),
            shots: shots_label(shots),
            seed: "summary".into(),
            mae: col(|r| r.0),
            rmse: col(|r| r.1),
            wall_seconds: format!("{wall:.3}"),
        }
    }
}

fn shots_label(shots: Option<usize>) -> String {
    shots.map_or_else(|| "all".to_string(), |s| s.to_string())
}

/// Shortest round-trip decimal form; keeps 64-bit runs comparable byte for byte.
fn fmt_metric(v: f64) -> String {
    format!("{v}")
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&metrics_csv(rows)?)?;
    Ok(())
}
