//! Error metrics over `[timestamps x points]` arrays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Matrix;

fn check(op: &'static str, s: &Matrix, shat: &Matrix) -> Result<()> {
    if s.shape() != shat.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", s.shape(), shat.shape()),
        ));
    }
    if s.data().is_empty() {
        return Err(Error::EmptyBatch(op));
    }
    Ok(())
}

/// Root of the mean squared error over every timestamp and point.
pub fn rmse(s: &Matrix, shat: &Matrix) -> Result<f64> {
    check("rmse", s, shat)?;
    let sum: f64 = s
        .data()
        .iter()
        .zip(shat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sum / s.data().len() as f64).sqrt())
}

pub fn mae(s: &Matrix, shat: &Matrix) -> Result<f64> {
    check("mae", s, shat)?;
    let sum: f64 = s
        .data()
        .iter()
        .zip(shat.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / s.data().len() as f64)
}

/// Per-timestamp MAE and its maximum over timestamps.
pub fn max_mae(s: &Matrix, shat: &Matrix) -> Result<(Vec<f64>, f64)> {
    check("max_mae", s, shat)?;
    let n = s.cols() as f64;
    let series: Vec<f64> = (0..s.rows())
        .map(|i| {
            s.row(i)
                .iter()
                .zip(shat.row(i))
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / n
        })
        .collect();
    let max = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((series, max))
}

/// `|S - S_hat|` for one timestamp.
pub fn pointwise_difference(s: &[f64], shat: &[f64]) -> Result<Vec<f64>> {
    if s.len() != shat.len() {
        return Err(Error::dim(
            "pointwise_difference",
            format!("{} vs {} values", s.len(), shat.len()),
        ));
    }
    Ok(s.iter().zip(shat).map(|(a, b)| (a - b).abs()).collect())
}

pub const RELATIVE_ERROR_FORMULA: &str = "rmse / mean(|S|)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub max_mae_series: Vec<f64>,
    pub max_mae: f64,
    pub n_points: usize,
    pub n_timestamps: usize,
    pub mean_abs_state: f64,
    pub relative_error: f64,
    pub relative_error_formula: String,
}

impl MetricsReport {
    pub fn compute(s: &Matrix, shat: &Matrix) -> Result<Self> {
        let rmse = rmse(s, shat)?;
        let mae = mae(s, shat)?;
        let (max_mae_series, max_mae) = max_mae(s, shat)?;
        let mean_abs_state = s.data().iter().map(|v| v.abs()).sum::<f64>() / s.data().len() as f64;
        Ok(Self {
            rmse,
            mae,
            max_mae_series,
            max_mae,
            n_points: s.cols(),
            n_timestamps: s.rows(),
            mean_abs_state,
            relative_error: rmse / mean_abs_state,
            relative_error_formula: RELATIVE_ERROR_FORMULA.to_string(),
        })
    }
}
