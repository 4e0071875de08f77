//! Truncated Gaussian smoothing with half-sample symmetric boundaries.
//!
//! With that boundary the filter is diagonalized by the DCT-II, so it is a
//! symmetric operator whose eigenvalues are bounded by the kernel's l1 norm (1).

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// `(2r+1) x (2r+1)` kernel `outer(g, g) / sum`, with `g_k = exp(-k^2 / (2 s^2))`.
pub fn gaussian_kernel(radius: usize, sigma_spatial: f64) -> Result<Array2<f64>> {
    if radius > 0 && !(sigma_spatial.is_finite() && sigma_spatial > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "spatial sigma must be positive, got {sigma_spatial}"
        )));
    }
    let g = taps(radius, sigma_spatial);
    let n = g.len();
    let raw = Array2::from_shape_fn((n, n), |(a, b)| g[a] * g[b]);
    let total = raw.sum();
    Ok(raw / total)
}

fn taps(radius: usize, sigma_spatial: f64) -> Vec<f64> {
    let r = radius as i64;
    (-r..=r)
        .map(|k| {
            if radius == 0 {
                1.0
            } else {
                (-((k * k) as f64) / (2.0 * sigma_spatial * sigma_spatial)).exp()
            }
        })
        .collect()
}

/// Reflects index `i` (possibly negative or past the end) back into `0..n`.
fn mirror(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m >= n as i64 {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

/// 2D correlation of `img` with `kernel` (odd square) under mirror boundaries.
pub fn gaussian_filter(img: ArrayView2<f64>, kernel: &Array2<f64>) -> Result<Array2<f64>> {
    let (kh, kw) = kernel.dim();
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidParameter(format!("kernel must be odd and square, got {kh}x{kw}")));
    }
    let r = (kh / 2) as i64;
    let (h, w) = img.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for a in 0..kh {
            let yy = mirror(y as i64 + a as i64 - r, h);
            for b in 0..kw {
                let xx = mirror(x as i64 + b as i64 - r, w);
                acc += kernel[[a, b]] * img[[yy, xx]];
            }
        }
        acc
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn radius_zero_is_the_delta() {
        let k = gaussian_kernel(0, 1.0).unwrap();
        assert_eq!(k, Array2::from_elem((1, 1), 1.0));
    }

    #[test]
    fn kernel_sums_to_one() {
        let k = gaussian_kernel(3, 1.5).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-15);
        assert!(k.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn kernel_is_exactly_symmetric() {
        let k = gaussian_kernel(3, 1.5).unwrap();
        assert_eq!(k, k.t().to_owned());
        let n = k.nrows();
        let rot = Array2::from_shape_fn((n, n), |(a, b)| k[[n - 1 - a, n - 1 - b]]);
        assert_eq!(k, rot);
    }

    #[test]
    fn mirror_indices() {
        let got: Vec<usize> = (-4..8).map(|i| mirror(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }

    fn dense(kernel: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        let n = h * w;
        let mut m = Array2::zeros((n, n));
        for col in 0..n {
            let mut e = Array2::zeros((h, w));
            e[[col / w, col % w]] = 1.0;
            let out = gaussian_filter(e.view(), kernel).unwrap();
            for (row, v) in out.iter().enumerate() {
                m[[row, col]] = *v;
            }
        }
        m
    }

    #[test]
    fn filter_is_a_symmetric_operator() {
        let k = gaussian_kernel(2, 1.0).unwrap();
        let m = dense(&k, 5, 6);
        let err = (&m - &m.t()).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-15);
    }

    #[test]
    fn kernel_wider_than_the_image_still_symmetric() {
        let k = gaussian_kernel(4, 2.0).unwrap();
        let m = dense(&k, 3, 4);
        let err = (&m - &m.t()).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-15);
    }

    proptest! {
        #[test]
        fn filter_never_increases_the_norm(seed in 0u64..1000, radius in 0usize..4, s in 0.3f64..3.0, h in 1usize..12, w in 1usize..12) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let img = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));
            let k = gaussian_kernel(radius, s).unwrap();
            let out = gaussian_filter(img.view(), &k).unwrap();
            let n_in = img.mapv(|v| v * v).sum().sqrt();
            let n_out = out.mapv(|v| v * v).sum().sqrt();
            prop_assert!(n_out <= n_in * (1.0 + 1e-12));
        }
    }
}
