//! Matrix-free conjugate gradient and power iteration on contrast volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::forward::ContrastVolume;

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub solution: ContrastVolume,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Solves `M x = b` for a symmetric positive semidefinite `M` given as a closure.
///
/// Stops when `||b - M x|| <= rel_tol * ||b||`. A zero right-hand side returns zero.
pub fn conjugate_gradient<F>(apply: F, b: &ContrastVolume, rel_tol: f64, max_iter: usize) -> CgOutcome
where
    F: Fn(&ContrastVolume) -> ContrastVolume,
{
    let mut x = ContrastVolume::zeros_like(b);
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return CgOutcome {
            solution: x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.norm_sq();
    let mut iterations = 0;
    while iterations < max_iter {
        if rr.sqrt() <= rel_tol * b_norm {
            break;
        }
        let mp = apply(&p);
        let curvature = p.dot(&mp);
        if !(curvature > 0.0) {
            // Direction in the null space: the system is singular along p.
            break;
        }
        let alpha = rr / curvature;
        let mut next_x = x.clone();
        next_x.axpy(alpha, &p);
        if !alpha.is_finite() || !next_x.is_finite() {
            break;
        }
        x = next_x;
        r.axpy(-alpha, &mp);
        iterations += 1;
        // Recompute the true residual periodically to shed accumulated drift.
        if iterations % 50 == 0 {
            r = b.sub(&apply(&x));
        }
        let rr_next = r.norm_sq();
        let beta = rr_next / rr;
        rr = rr_next;
        let mut next = r.clone();
        next.axpy(beta, &p);
        if !next.is_finite() {
            break;
        }
        p = next;
    }
    let residual = b.sub(&apply(&x)).norm();
    let relative_residual = if residual.is_finite() { residual / b_norm } else { f64::INFINITY };
    CgOutcome {
        solution: x,
        converged: relative_residual <= rel_tol,
        iterations,
        relative_residual,
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite operator.
///
/// Runs until the Rayleigh quotient changes by less than `rel_tol` relatively or
/// `max_iter` products have been taken. The start vector is drawn from `seed`.
pub fn power_iteration<F>(
    apply: F,
    shape: (usize, usize, usize),
    max_iter: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ContrastVolume) -> ContrastVolume,
{
    let (s, h, w) = shape;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..2 * s * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut v = ContrastVolume::from_flat(s, h, w, &flat)?;
    v.scale(1.0 / v.norm());
    let mut lambda = 0.0_f64;
    for _ in 0..max_iter.max(1) {
        let mv = apply(&v);
        let next = v.dot(&mv);
        let norm = mv.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite("power iteration"));
        }
        if norm == 0.0 {
            return Err(Error::ZeroOperator);
        }
        let done = (next - lambda).abs() <= rel_tol * next.abs();
        lambda = next;
        v = mv;
        v.scale(1.0 / norm);
        if done {
            break;
        }
    }
    if lambda <= 0.0 {
        return Err(Error::ZeroOperator);
    }
    Ok(lambda)
}
