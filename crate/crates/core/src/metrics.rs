//! Reconstruction quality metrics.

use crate::error::{Error, Result};
use crate::forward::ContrastVolume;
use crate::tensor::RealVolume;

/// Upper clamp so the metric stays finite for perfect fits.
pub const SNR_CAP_DB: f64 = 300.0;

fn check_pair(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::dims("snr", truth.len(), estimate.len()));
    }
    if estimate.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("snr input"));
    }
    let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidParameter("SNR is undefined for an all-zero reference".into()));
    }
    Ok(norm)
}

fn to_db(signal: f64, residual: f64, rounding: f64) -> f64 {
    if residual < 1e-15 * signal || residual <= rounding {
        SNR_CAP_DB
    } else {
        (20.0 * (signal / residual).log10()).min(SNR_CAP_DB)
    }
}

/// `max_{a,b} 20 log10(||y|| / ||y - a yhat + b||)` over flat slices.
pub fn snr_slices(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    let norm = check_pair(estimate, truth)?;
    let n = truth.len() as f64;
    let my = truth.iter().sum::<f64>() / n;
    let me = estimate.iter().sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (&e, &y) in estimate.iter().zip(truth) {
        cov += (e - me) * (y - my);
        var += (e - me) * (e - me);
    }
    let a = if var > 0.0 { cov / var } else { 0.0 };
    // Residual an exact affine copy still shows after the estimate was rounded to f64.
    let estimate_norm = estimate.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rounding = 16.0 * f64::EPSILON * (norm + a.abs() * estimate_norm);
    let residual = estimate
        .iter()
        .zip(truth)
        .map(|(&e, &y)| {
            let r = (y - my) - a * (e - me);
            r * r
        })
        .sum::<f64>()
        .sqrt();
    Ok(to_db(norm, residual, rounding))
}

/// Affine-fit SNR of `estimate` against `truth`.
pub fn snr(estimate: &RealVolume, truth: &RealVolume) -> Result<f64> {
    if estimate.dim() != truth.dim() {
        return Err(Error::dims("snr", format!("{:?}", truth.dim()), format!("{:?}", estimate.dim())));
    }
    snr_slices(estimate.as_slice(), truth.as_slice())
}

/// Affine-fit SNR over the phase and absorption parts jointly.
pub fn snr_joint(estimate: &ContrastVolume, truth: &ContrastVolume) -> Result<f64> {
    snr_slices(&estimate.to_vec(), &truth.to_vec())
}

/// `20 log10(||y|| / ||y - yhat||)` without any fitting.
pub fn snr_fixed(estimate: &RealVolume, truth: &RealVolume) -> Result<f64> {
    if estimate.dim() != truth.dim() {
        return Err(Error::dims("snr", format!("{:?}", truth.dim()), format!("{:?}", estimate.dim())));
    }
    let norm = check_pair(estimate.as_slice(), truth.as_slice())?;
    let residual = estimate
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(e, y)| (y - e) * (y - e))
        .sum::<f64>()
        .sqrt();
    Ok(to_db(norm, residual, 16.0 * f64::EPSILON * norm))
}

/// Shifts `x` so its global mean equals that of `reference`.
pub fn mean_align(x: &RealVolume, reference: &RealVolume) -> RealVolume {
    let mut out = x.clone();
    out.add_scalar(reference.mean() - x.mean());
    out
}
