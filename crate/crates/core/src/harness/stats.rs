//! Summary statistics for reports and search analysis.

use crate::error::{Error, Result};
use crate::search::SearchHistory;

/// Mean and 95% normal-approximation half-width, `1.96·s/√n` with the
/// sample standard deviation `s`.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

/// Pearson correlation of two equal-length columns, `None` when either
/// is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BitCorrelation {
    pub r: f64,
    /// False when the bit or the fitness never varies; `r` is then 0.
    pub defined: bool,
}

/// Point-biserial correlation between each of the `2K` path bits and
/// fitness, over every distinct path in the history.
pub fn point_biserial(history: &SearchHistory, num_layers: usize) -> Result<Vec<BitCorrelation>> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("point-biserial analysis of an empty history".into()));
    }
    let records = history.records();
    if let Some(r) = records.iter().find(|r| r.path.num_layers() != num_layers) {
        return Err(Error::InvalidArgument(format!(
            "history path {} does not have {num_layers} layers",
            r.path
        )));
    }
    let fitness: Vec<f64> = records.iter().map(|r| r.fitness).collect();
    Ok((0..2 * num_layers)
        .map(|bit| {
            let column: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.path.bits()[bit]))).collect();
            match pearson(&column, &fitness) {
                Some(r) => BitCorrelation { r, defined: true },
                None => BitCorrelation { r: 0.0, defined: false },
            }
        })
        .collect())
}
