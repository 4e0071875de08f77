//! Phantoms and simulated noisy measurements.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{apply_forward, ContrastVolume, MeasurementSet, TransferFunctionStack};
use crate::tensor::RealVolume;

#[derive(Clone, Debug)]
pub enum PhantomKind {
    /// Random non-overlapping soft-edged disks, drawn independently per slice.
    Disks,
    /// A grayscale image with values in `[0, 1]`, resampled to the grid and placed in every slice.
    Grayscale(Array2<f64>),
}

#[derive(Clone, Debug)]
pub struct PhantomParams {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    pub kind: PhantomKind,
    pub seed: u64,
    /// Largest phase contrast value.
    pub max_contrast: f64,
}

impl PhantomParams {
    pub fn disks(width: usize, height: usize, slices: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            slices,
            kind: PhantomKind::Disks,
            seed,
            max_contrast: 0.05,
        }
    }
}

/// Phase-only contrast volume (`im` is zero).
pub fn make_phantom(params: &PhantomParams) -> Result<ContrastVolume> {
    let (w, h, s) = (params.width, params.height, params.slices);
    if w == 0 || h == 0 || s == 0 {
        return Err(Error::InvalidParameter("phantom dimensions must be positive".into()));
    }
    if !(params.max_contrast.is_finite() && params.max_contrast >= 0.0) {
        return Err(Error::InvalidParameter("max contrast must be finite and non-negative".into()));
    }
    let slices: Vec<Array2<f64>> = match &params.kind {
        PhantomKind::Disks => {
            let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
            (0..s).map(|_| disk_slice(h, w, params.max_contrast, &mut rng)).collect()
        }
        PhantomKind::Grayscale(img) => {
            if img.is_empty() {
                return Err(Error::InvalidParameter("grayscale image is empty".into()));
            }
            if img.iter().any(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
                return Err(Error::InvalidParameter("grayscale values must lie in [0, 1]".into()));
            }
            let resampled = resample_nearest(img, h, w).mapv(|v| v * params.max_contrast);
            vec![resampled; s]
        }
    };
    ContrastVolume::new(RealVolume::from_slices(&slices)?, RealVolume::zeros(s, h, w))
}

fn disk_slice(h: usize, w: usize, max_contrast: f64, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let side = h.min(w) as f64;
    let target = rng.random_range(4..=8);
    let mut disks: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut attempts = 0;
    while disks.len() < target && attempts < 500 {
        attempts += 1;
        let r = rng.random_range(0.06..0.18) * side;
        let cy = rng.random_range(r..(h as f64 - r).max(r + 1e-9));
        let cx = rng.random_range(r..(w as f64 - r).max(r + 1e-9));
        let amp = rng.random_range(0.3..1.0) * max_contrast;
        if disks
            .iter()
            .all(|&(y, x, rr, _)| ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() >= r + rr + 2.0)
        {
            disks.push((cy, cx, r, amp));
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        disks.iter().fold(0.0_f64, |acc, &(cy, cx, r, amp)| {
            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            // One-pixel soft edge; the max keeps values inside [0, max_contrast].
            acc.max(amp * 0.5 * (1.0 - ((d - r) / 1.0).tanh()))
        })
    })
}

fn resample_nearest(img: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (ih, iw) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * ih as f64 / h as f64) as usize;
        let sx = ((x as f64 + 0.5) * iw as f64 / w as f64) as usize;
        img[[sy.min(ih - 1), sx.min(iw - 1)]]
    })
}

/// `y_i = A_i x + e_i`, with `e_i` white Gaussian rescaled so each image has exactly
/// the requested input SNR. `None` gives noiseless data.
pub fn simulate_measurements(
    x: &ContrastVolume,
    tf: &TransferFunctionStack,
    input_snr_db: Option<f64>,
    seed: u64,
) -> Result<MeasurementSet> {
    tf.check_volume(x)?;
    if let Some(db) = input_snr_db {
        if !db.is_finite() {
            return Err(Error::InvalidParameter(format!("input SNR must be finite, got {db}")));
        }
    }
    let clean: Vec<Array2<f64>> = (0..tf.illuminations())
        .into_par_iter()
        .map(|i| apply_forward(x, tf, i))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(clean.len());
    for (i, c) in clean.into_iter().enumerate() {
        let Some(db) = input_snr_db else {
            images.push(c);
            continue;
        };
        let signal = c.mapv(|v| v * v).sum().sqrt();
        if signal == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "clean measurement {i} is identically zero, so a noise level for {db} dB is undefined"
            )));
        }
        let noise = Array2::from_shape_simple_fn(c.dim(), || rng.sample::<f64, _>(StandardNormal));
        let noise_norm = noise.mapv(|v| v * v).sum().sqrt();
        let target = signal / 10f64.powf(db / 20.0);
        images.push(c + noise * (target / noise_norm));
    }
    let mut m = MeasurementSet::new(images)?;
    m.ground_truth = Some(x.clone());
    m.acquisition = tf.acquisition;
    m.convention = tf.convention;
    m.seed = seed;
    m.input_snr_db = input_snr_db;
    Ok(m)
}
