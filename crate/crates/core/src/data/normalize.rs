use crate::error::{Error, Result};

/// Hounsfield window applied before scaling CT values.
pub const CT_RANGE: (f64, f64) = (-1000.0, 2000.0);

/// `(clip(x, -1000, 2000) - 500) / 1500`, mapping the window onto `[-1, 1]`.
pub fn normalize_ct(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&x| (x.clamp(CT_RANGE.0, CT_RANGE.1) - 500.0) / 1500.0)
        .collect()
}

/// Zero mean, unit (population) variance.
pub fn normalize_zscore(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Degenerate("empty volume".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var <= f64::EPSILON * mean.abs().max(1.0) {
        return Err(Error::Degenerate("constant volume has no variance".into()));
    }
    let inv = var.sqrt().recip();
    Ok(values.iter().map(|x| (x - mean) * inv).collect())
}
