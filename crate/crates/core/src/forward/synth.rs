//! Synthetic transfer functions for a tilted-plane-wave, multi-slice acquisition.
//!
//! For illumination spatial frequency `u` and slice depth `z_j`, with pupil `P`
//! and defocus phase `phi_j(q) = 2 pi z_j (kz(q) - kz(u))`:
//!
//! ```text
//! a+(k) = P(k + u) exp(i phi_j(k + u))
//! a-(k) = conj(P(u - k) exp(i phi_j(u - k)))
//! hIm   = P(k) (a+ + a-)
//! hRe   = i P(k) (a+ - a-)
//! ```
//!
//! Both are Hermitian in `k`, so `A_i` maps real volumes to real images even
//! before the real part is taken.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{Acquisition, TransferFunctionStack};
use crate::error::{Error, Result};
use crate::tensor::{signed_frequency, ComplexImage};

#[derive(Clone, Debug)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    /// Number of slices, `J + 1`.
    pub slices: usize,
    pub slice_spacing_um: f64,
    pub acquisition: Acquisition,
    /// Illumination numerical-aperture vectors `n_b sin(theta)` along x and y.
    /// When empty, `illuminations` angles are generated on a sunflower pattern.
    pub illumination_na: Vec<[f64; 2]>,
    pub illuminations: usize,
    /// Seeds the rotation of the generated sunflower pattern.
    pub seed: u64,
}

impl SynthParams {
    pub fn new(width: usize, height: usize, slices: usize, illuminations: usize) -> Self {
        Self {
            width,
            height,
            slices,
            slice_spacing_um: 1.0,
            acquisition: Acquisition::simulation(),
            illumination_na: Vec::new(),
            illuminations,
            seed: 0,
        }
    }
}

/// `count` illumination NA vectors filling a disk of radius `max_na`, rotated by a seeded angle.
pub fn sunflower_illumination(count: usize, max_na: f64, seed: u64) -> Vec<[f64; 2]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let rotation = ChaCha20Rng::seed_from_u64(seed).random_range(0.0..2.0 * PI);
    (0..count)
        .map(|n| {
            let r = max_na * ((n as f64 + 0.5) / count as f64).sqrt();
            let theta = n as f64 * golden + rotation;
            [r * theta.cos(), r * theta.sin()]
        })
        .collect()
}

pub fn synth_tf(params: &SynthParams) -> Result<TransferFunctionStack> {
    let acq = &params.acquisition;
    let (h, w) = (params.height, params.width);
    if h == 0 || w == 0 || params.slices == 0 {
        return Err(Error::InvalidParameter("grid and slice count must be positive".into()));
    }
    for (name, v) in [
        ("wavelength", acq.wavelength_um),
        ("pixel size", acq.pixel_size_um),
        ("numerical aperture", acq.na),
        ("background index", acq.background_index),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    if acq.na > acq.background_index {
        return Err(Error::InvalidParameter(format!(
            "numerical aperture {} exceeds the background index {}",
            acq.na, acq.background_index
        )));
    }
    if !params.slice_spacing_um.is_finite() || params.slice_spacing_um < 0.0 {
        return Err(Error::InvalidParameter("slice spacing must be non-negative".into()));
    }

    let angles = if params.illumination_na.is_empty() {
        if params.illuminations == 0 {
            return Err(Error::InvalidParameter("need at least one illumination".into()));
        }
        sunflower_illumination(params.illuminations, 0.98 * acq.na, params.seed)
    } else {
        params.illumination_na.clone()
    };

    let cutoff = acq.na / acq.wavelength_um;
    let k_medium = acq.background_index / acq.wavelength_um;
    let kz = |qx: f64, qy: f64| (k_medium * k_medium - qx * qx - qy * qy).max(0.0).sqrt();
    let in_pupil = |qx: f64, qy: f64| qx * qx + qy * qy <= cutoff * cutoff;
    let fx: Vec<f64> = (0..w)
        .map(|c| signed_frequency(c, w) as f64 / (w as f64 * acq.pixel_size_um))
        .collect();
    let fy: Vec<f64> = (0..h)
        .map(|r| signed_frequency(r, h) as f64 / (h as f64 * acq.pixel_size_um))
        .collect();
    let centre = (params.slices - 1) as f64 / 2.0;

    let mut h_re = Vec::with_capacity(angles.len() * params.slices);
    let mut h_im = Vec::with_capacity(angles.len() * params.slices);
    for &[nax, nay] in &angles {
        let (ux, uy) = (nax / acq.wavelength_um, nay / acq.wavelength_um);
        let kz_u = kz(ux, uy);
        for j in 0..params.slices {
            let z = (j as f64 - centre) * params.slice_spacing_um;
            let field = |qx: f64, qy: f64| {
                if in_pupil(qx, qy) {
                    Complex64::from_polar(1.0, 2.0 * PI * z * (kz(qx, qy) - kz_u))
                } else {
                    Complex64::new(0.0, 0.0)
                }
            };
            let mut re = Array2::<Complex64>::zeros((h, w));
            let mut im = Array2::<Complex64>::zeros((h, w));
            for r in 0..h {
                for c in 0..w {
                    let (kx, ky) = (fx[c], fy[r]);
                    if !in_pupil(kx, ky) {
                        continue;
                    }
                    let plus = field(kx + ux, ky + uy);
                    let minus = field(ux - kx, uy - ky).conj();
                    im[[r, c]] = plus + minus;
                    re[[r, c]] = Complex64::i() * (plus - minus);
                }
            }
            re[[0, 0]] = Complex64::new(0.0, 0.0);
            h_re.push(ComplexImage::from_array_unchecked(re));
            h_im.push(ComplexImage::from_array_unchecked(im));
        }
    }

    let mut stack = TransferFunctionStack::new(
        angles.len(),
        params.slices,
        h_re,
        h_im,
        params.slice_spacing_um,
        *acq,
    )?;
    stack.frequency_diagonal = true;
    Ok(stack)
}
