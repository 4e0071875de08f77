//! Image denoisers `D_sigma`, applied slice by slice to 3D volumes.

mod cnn;
mod gaussian;
mod tv;

pub use cnn::{cnn_infer, CnnWeights, ConvLayer, HIDDEN_CHANNELS};
pub use gaussian::{gaussian_kernel, gaussian_filter};
pub use tv::{tv_denoise, TvOptions};

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::ContrastVolume;
use crate::tensor::RealVolume;

/// A 2D denoiser. Volumes are processed one axial slice at a time.
pub trait Denoiser: Send + Sync {
    fn denoise_slice(&self, img: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// True only when nonexpansiveness is guaranteed, not merely observed.
    fn certified_nonexpansive(&self) -> bool;

    /// True for linear operators, which admit a direct fixed-point solve.
    fn is_linear(&self) -> bool {
        false
    }

    fn describe(&self) -> String;
}

#[derive(Clone, Debug)]
pub enum DenoiserKind {
    Identity,
    GaussianKernel { radius: usize, sigma_spatial: f64 },
    TotalVariation(TvOptions),
    Cnn(Arc<CnnWeights>),
}

/// A named denoiser together with the noise level it targets.
#[derive(Clone, Debug)]
pub struct DenoiserSpec {
    pub kind: DenoiserKind,
    /// Noise level (in 8-bit units) the denoiser was designed for. Metadata only
    /// for the reference denoisers.
    pub sigma: f64,
}

impl DenoiserSpec {
    pub fn identity() -> Self {
        Self {
            kind: DenoiserKind::Identity,
            sigma: 0.0,
        }
    }

    pub fn gaussian(radius: usize, sigma_spatial: f64) -> Result<Self> {
        gaussian_kernel(radius, sigma_spatial)?;
        Ok(Self {
            kind: DenoiserKind::GaussianKernel { radius, sigma_spatial },
            sigma: 0.0,
        })
    }

    pub fn total_variation(opts: TvOptions) -> Result<Self> {
        opts.validate()?;
        Ok(Self {
            kind: DenoiserKind::TotalVariation(opts),
            sigma: 0.0,
        })
    }

    pub fn cnn(weights: CnnWeights) -> Result<Self> {
        weights.validate()?;
        let sigma = weights.sigma;
        Ok(Self {
            kind: DenoiserKind::Cnn(Arc::new(weights)),
            sigma,
        })
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }
}

impl Denoiser for DenoiserSpec {
    fn denoise_slice(&self, img: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.kind {
            DenoiserKind::Identity => Ok(img.to_owned()),
            DenoiserKind::GaussianKernel { radius, sigma_spatial } => {
                gaussian_filter(img, &gaussian_kernel(*radius, *sigma_spatial)?)
            }
            DenoiserKind::TotalVariation(opts) => Ok(tv_denoise(img, opts)),
            DenoiserKind::Cnn(w) => cnn_infer(w, img),
        }
    }

    fn certified_nonexpansive(&self) -> bool {
        match &self.kind {
            DenoiserKind::Identity | DenoiserKind::GaussianKernel { .. } => true,
            // A proximal map is firmly nonexpansive, but only at convergence of the inner solve.
            DenoiserKind::TotalVariation(_) => false,
            DenoiserKind::Cnn(w) => w.certified_nonexpansive(),
        }
    }

    fn is_linear(&self) -> bool {
        matches!(self.kind, DenoiserKind::Identity | DenoiserKind::GaussianKernel { .. })
    }

    fn describe(&self) -> String {
        match &self.kind {
            DenoiserKind::Identity => "identity".into(),
            DenoiserKind::GaussianKernel { radius, sigma_spatial } => {
                format!("gaussian(radius {radius}, sigma {sigma_spatial})")
            }
            DenoiserKind::TotalVariation(o) => format!(
                "tv(weight {}, cap {}, tol {:e})",
                o.weight, o.max_iter, o.tol
            ),
            DenoiserKind::Cnn(w) => format!("cnn({} layers, sigma {}, residual {})", w.layers.len(), w.sigma, w.residual),
        }
    }
}

/// Applies `d` to every slice of `x`.
pub fn denoise(d: &dyn Denoiser, x: &RealVolume) -> Result<RealVolume> {
    if !x.is_finite() {
        return Err(Error::NonFinite("denoiser input"));
    }
    let slices: Vec<Array2<f64>> = (0..x.slices())
        .into_par_iter()
        .map(|j| d.denoise_slice(x.slice(j)))
        .collect::<Result<_>>()?;
    let out = RealVolume::from_slices(&slices)?;
    if out.dim() != x.dim() {
        return Err(Error::dims("denoiser output", format!("{:?}", x.dim()), format!("{:?}", out.dim())));
    }
    Ok(out)
}

/// Denoises the phase and absorption volumes independently.
pub fn denoise_contrast(d: &dyn Denoiser, x: &ContrastVolume) -> Result<ContrastVolume> {
    Ok(ContrastVolume {
        re: denoise(d, &x.re)?,
        im: denoise(d, &x.im)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub max_ratio: f64,
    /// Index of the pair attaining `max_ratio`.
    pub argmax_pair: usize,
}

/// Largest `||D(x) - D(y)|| / ||x - y||` over `pairs` random pairs.
///
/// Each pair shares a random base image in `[0, 1)`; both members add independent
/// Gaussian noise whose level is itself drawn from `[0.01, 0.3)`.
pub fn nonexpansiveness_probe(
    d: &dyn Denoiser,
    dims: (usize, usize, usize),
    pairs: usize,
    rng: &mut impl Rng,
) -> Result<ProbeResult> {
    let (s, h, w) = dims;
    let mut best = ProbeResult {
        max_ratio: f64::NEG_INFINITY,
        argmax_pair: 0,
    };
    for k in 0..pairs {
        let base: Vec<f64> = (0..s * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let level = rng.random_range(0.01..0.3);
        let mut noisy = || -> Result<RealVolume> {
            let v = base
                .iter()
                .map(|b| b + level * rng.sample::<f64, _>(StandardNormal))
                .collect();
            RealVolume::from_vec(s, h, w, v)
        };
        let x = noisy()?;
        let y = noisy()?;
        let (dx, dy) = (denoise(d, &x)?, denoise(d, &y)?);
        let num = (dx.data() - dy.data()).mapv(|v| v * v).sum().sqrt();
        let den = (x.data() - y.data()).mapv(|v| v * v).sum().sqrt();
        if den == 0.0 {
            continue;
        }
        let ratio = num / den;
        if ratio > best.max_ratio {
            best = ProbeResult {
                max_ratio: ratio,
                argmax_pair: k,
            };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn stack(images: &[Array2<f64>]) -> ndarray::Array3<f64> {
        let views: Vec<_> = images.iter().map(|a| a.view()).collect();
        ndarray::stack(ndarray::Axis(0), &views).expect("equal shapes")
    }

    struct Scale(f64);

    impl Denoiser for Scale {
        fn denoise_slice(&self, img: ArrayView2<f64>) -> Result<Array2<f64>> {
            Ok(img.mapv(|v| v * self.0))
        }
        fn certified_nonexpansive(&self) -> bool {
            self.0.abs() <= 1.0
        }
        fn describe(&self) -> String {
            format!("scale {}", self.0)
        }
    }

    fn random_volume(s: usize, h: usize, w: usize, seed: u64) -> RealVolume {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        RealVolume::from_vec(s, h, w, (0..s * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_returns_input_exactly() {
        let x = random_volume(3, 8, 8, 1);
        assert_eq!(denoise(&DenoiserSpec::identity(), &x).unwrap(), x);
    }

    #[test]
    fn gaussian_keeps_constants() {
        let x = RealVolume::from_vec(2, 9, 7, vec![0.37; 126]).unwrap();
        let d = DenoiserSpec::gaussian(3, 1.5).unwrap();
        let y = denoise(&d, &x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut v = vec![0.0; 16];
        v[3] = f64::NAN;
        let x = RealVolume::from_array_unchecked(ndarray::Array3::from_shape_vec((1, 4, 4), v).unwrap());
        assert!(denoise(&DenoiserSpec::identity(), &x).is_err());
    }

    #[test]
    fn certificates_by_kind() {
        assert!(DenoiserSpec::identity().certified_nonexpansive());
        assert!(DenoiserSpec::gaussian(2, 1.0).unwrap().certified_nonexpansive());
        assert!(!DenoiserSpec::total_variation(TvOptions::new(0.1)).unwrap().certified_nonexpansive());
    }

    #[test]
    fn probe_identity_is_exactly_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let r = nonexpansiveness_probe(&DenoiserSpec::identity(), (1, 8, 8), 50, &mut rng).unwrap();
        assert_eq!(r.max_ratio, 1.0);
    }

    #[test]
    fn probe_detects_expansion() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let r = nonexpansiveness_probe(&Scale(2.0), (2, 8, 8), 20, &mut rng).unwrap();
        assert!((r.max_ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn probe_gaussian_stays_below_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let d = DenoiserSpec::gaussian(3, 1.2).unwrap();
        let r = nonexpansiveness_probe(&d, (1, 32, 32), 1000, &mut rng).unwrap();
        assert!(r.max_ratio <= 1.0 + 1e-9, "{}", r.max_ratio);
    }

    #[test]
    fn probe_tv_stays_below_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let d = DenoiserSpec::total_variation(TvOptions::new(0.1)).unwrap();
        let r = nonexpansiveness_probe(&d, (1, 16, 16), 200, &mut rng).unwrap();
        assert!(r.max_ratio <= 1.0 + 1e-6, "{}", r.max_ratio);
    }

    #[test]
    fn slice_permutation_commutes() {
        let x = random_volume(3, 10, 10, 6);
        for d in [
            DenoiserSpec::gaussian(2, 1.0).unwrap(),
            DenoiserSpec::total_variation(TvOptions::new(0.05)).unwrap(),
        ] {
            let y = denoise(&d, &x).unwrap();
            let perm = [2, 0, 1];
            let xp = RealVolume::new(stack(&perm.iter().map(|&j| x.slice(j).to_owned()).collect::<Vec<_>>())).unwrap();
            let yp = denoise(&d, &xp).unwrap();
            for (k, &j) in perm.iter().enumerate() {
                assert_eq!(yp.slice(k), y.slice(j));
            }
        }
    }

    #[test]
    fn contrast_parts_are_denoised_independently() {
        let re = random_volume(2, 8, 8, 7);
        let im = random_volume(2, 8, 8, 8);
        let d = DenoiserSpec::gaussian(1, 0.8).unwrap();
        let out = denoise_contrast(&d, &ContrastVolume::new(re.clone(), im.clone()).unwrap()).unwrap();
        assert_eq!(out.re, denoise(&d, &re).unwrap());
        assert_eq!(out.im, denoise(&d, &im).unwrap());
    }
}
