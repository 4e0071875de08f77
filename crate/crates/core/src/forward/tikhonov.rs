//! Ridge-regularized least squares over all illuminations:
//! `min_x (1/2I) sum_i ||y_i - A_i x||^2 + (w/2) ||x||^2`.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64;

use super::{ContrastVolume, ForwardConvention, MeasurementSet, TransferFunctionStack, VolumeSpectra};
use crate::error::{Error, Result};
use crate::fidelity::FidelityProblem;
use crate::linalg::conjugate_gradient;
use crate::tensor::{fft2_real_unchecked, mirror_bin};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TikhonovMethod {
    #[default]
    ConjugateGradient,
    /// Independent small solves per spatial frequency. Requires a stack flagged
    /// frequency-diagonal and the real-part-kept convention.
    PerFrequency,
}

#[derive(Clone, Copy, Debug)]
pub struct TikhonovOptions {
    pub method: TikhonovMethod,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for TikhonovOptions {
    fn default() -> Self {
        Self {
            method: TikhonovMethod::ConjugateGradient,
            rel_tol: 1e-8,
            max_iter: 2000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TikhonovResult {
    pub volume: ContrastVolume,
    pub method: TikhonovMethod,
    /// CG iterations; 0 for the per-frequency path.
    pub iterations: usize,
    pub relative_residual: f64,
}

pub fn tikhonov_reconstruct(
    m: &MeasurementSet,
    tf: &TransferFunctionStack,
    reg_weight: f64,
    opts: &TikhonovOptions,
) -> Result<TikhonovResult> {
    if !(reg_weight.is_finite() && reg_weight >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "regularization weight must be finite and non-negative, got {reg_weight}"
        )));
    }
    let p = FidelityProblem::new(tf, m)?;
    match opts.method {
        TikhonovMethod::ConjugateGradient => {
            let rhs = p.data_adjoint()?;
            let out = conjugate_gradient(
                |v| {
                    let mut mv = p.normal_apply(v).expect("shape fixed by the problem");
                    mv.axpy(reg_weight, v);
                    mv
                },
                &rhs,
                opts.rel_tol,
                opts.max_iter,
            );
            if !out.converged {
                return Err(Error::NonConvergence {
                    solver: "tikhonov (conjugate gradient)",
                    iterations: out.iterations,
                    residual: out.relative_residual,
                    hint: "; raise the iteration cap or the regularization weight",
                });
            }
            Ok(TikhonovResult {
                volume: out.solution,
                method: TikhonovMethod::ConjugateGradient,
                iterations: out.iterations,
                relative_residual: out.relative_residual,
            })
        }
        TikhonovMethod::PerFrequency => {
            if !tf.frequency_diagonal {
                return Err(Error::InvalidParameter(
                    "per-frequency Tikhonov needs a stack flagged frequency-diagonal".into(),
                ));
            }
            if tf.convention != ForwardConvention::RealPartKept {
                return Err(Error::InvalidParameter(
                    "per-frequency Tikhonov is only exact when the real part is kept".into(),
                ));
            }
            per_frequency(m, tf, reg_weight)
        }
    }
}

/// Taking the real part maps the multiplier `h(k)` to `(h(k) + conj(h(-k))) / 2`
/// on real inputs, so each frequency decouples into a `2(J+1)`-unknown system.
fn per_frequency(m: &MeasurementSet, tf: &TransferFunctionStack, reg_weight: f64) -> Result<TikhonovResult> {
    let (s, h, w) = (tf.slices(), tf.height(), tf.width());
    let n = 2 * s;
    let inv_i = 1.0 / tf.illuminations() as f64;
    let y_spec: Vec<Array2<Complex64>> = m
        .images
        .iter()
        .map(|y| fft2_real_unchecked(y.view()).into_array())
        .collect();
    let mut out = VolumeSpectra::zeros(s, h, w);
    let mut row = vec![Complex64::new(0.0, 0.0); n];
    for r in 0..h {
        for c in 0..w {
            let (mr, mc) = (mirror_bin(r, h), mirror_bin(c, w));
            let mut normal = DMatrix::<Complex64>::zeros(n, n);
            let mut rhs = DVector::<Complex64>::zeros(n);
            for i in 0..tf.illuminations() {
                for j in 0..s {
                    let sym = |hh: &crate::tensor::ComplexImage| {
                        let v = hh.view();
                        (v[[r, c]] + v[[mr, mc]].conj()) * 0.5
                    };
                    row[j] = sym(tf.h_re(i, j));
                    row[s + j] = sym(tf.h_im(i, j));
                }
                let yk = y_spec[i][[r, c]];
                for a in 0..n {
                    let ca = row[a].conj();
                    rhs[a] += ca * yk * inv_i;
                    for b in 0..n {
                        normal[(a, b)] += ca * row[b] * inv_i;
                    }
                }
            }
            for a in 0..n {
                normal[(a, a)] += Complex64::new(reg_weight, 0.0);
            }
            let sol = match normal.clone().cholesky() {
                Some(chol) => chol.solve(&rhs),
                None => normal.lu().solve(&rhs).ok_or_else(|| Error::NonConvergence {
                    solver: "tikhonov (per-frequency)",
                    iterations: 0,
                    residual: f64::INFINITY,
                    hint: "; a frequency is unobserved, use a positive regularization weight",
                })?,
            };
            for j in 0..s {
                out.re[j][[r, c]] = sol[j];
                out.im[j][[r, c]] = sol[s + j];
            }
        }
    }
    Ok(TikhonovResult {
        volume: out.into_volume(),
        method: TikhonovMethod::PerFrequency,
        iterations: 0,
        relative_residual: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::test_support::{identity_tf, random_image, random_tf, random_volume};
    use crate::forward::{apply_adjoint, apply_forward};
    use nalgebra::DMatrix as M;

    fn measurements(tf: &TransferFunctionStack, seed: u64) -> MeasurementSet {
        MeasurementSet::new(
            (0..tf.illuminations())
                .map(|i| random_image(tf.height(), tf.width(), seed + i as u64))
                .collect(),
        )
        .unwrap()
    }

    /// Materializes `A_i` column by column through `apply_forward`.
    fn dense_normal_solve(m: &MeasurementSet, tf: &TransferFunctionStack, lambda: f64) -> Vec<f64> {
        let (s, h, w) = (tf.slices(), tf.height(), tf.width());
        let n = 2 * s * h * w;
        let rows = tf.illuminations() * h * w;
        let mut a = M::<f64>::zeros(rows, n);
        for col in 0..n {
            let mut e = vec![0.0; n];
            e[col] = 1.0;
            let x = ContrastVolume::from_flat(s, h, w, &e).unwrap();
            for i in 0..tf.illuminations() {
                let y = apply_forward(&x, tf, i).unwrap();
                for (k, v) in y.iter().enumerate() {
                    a[(i * h * w + k, col)] = *v;
                }
            }
        }
        let y = nalgebra::DVector::from_iterator(rows, m.images.iter().flat_map(|img| img.iter().cloned()));
        let inv_i = 1.0 / tf.illuminations() as f64;
        let normal = a.transpose() * &a * inv_i + M::<f64>::identity(n, n) * lambda;
        let rhs = a.transpose() * y * inv_i;
        normal.cholesky().unwrap().solve(&rhs).iter().cloned().collect()
    }

    #[test]
    fn zero_measurements_give_zero() {
        let tf = random_tf(3, 2, 8, 8, 1);
        let m = MeasurementSet::new(vec![Array2::zeros((8, 8)); 3]).unwrap();
        let out = tikhonov_reconstruct(&m, &tf, 0.1, &TikhonovOptions::default()).unwrap();
        assert_eq!(out.volume.norm_sq(), 0.0);
    }

    #[test]
    fn scalar_ridge_per_pixel() {
        let tf = identity_tf(1, 1, 8, 8);
        let y = random_image(8, 8, 2);
        let m = MeasurementSet::new(vec![y.clone()]).unwrap();
        let lambda = 0.7;
        let out = tikhonov_reconstruct(&m, &tf, lambda, &TikhonovOptions::default()).unwrap();
        let expected = &y / (1.0 + lambda);
        let err = ndarray::Zip::from(out.volume.re.slice(0))
            .and(&expected)
            .fold(0.0_f64, |m, a, b| m.max((a - b).abs()));
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn cg_matches_dense_solve() {
        let tf = random_tf(3, 2, 8, 8, 3);
        let m = measurements(&tf, 10);
        let lambda = 0.05;
        let oracle = dense_normal_solve(&m, &tf, lambda);
        let out = tikhonov_reconstruct(&m, &tf, lambda, &TikhonovOptions::default()).unwrap();
        let got = out.volume.to_vec();
        let num: f64 = got.iter().zip(&oracle).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = oracle.iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() < 1e-6, "{}", (num / den).sqrt());
        assert_eq!(out.method, TikhonovMethod::ConjugateGradient);
    }

    #[test]
    fn per_frequency_matches_dense_solve_on_odd_and_even_grids() {
        for (h, w) in [(8, 8), (7, 9)] {
            let mut tf = random_tf(3, 2, h, w, 4);
            tf.frequency_diagonal = true;
            let m = measurements(&tf, 20);
            let lambda = 0.05;
            let oracle = dense_normal_solve(&m, &tf, lambda);
            let opts = TikhonovOptions {
                method: TikhonovMethod::PerFrequency,
                ..Default::default()
            };
            let got = tikhonov_reconstruct(&m, &tf, lambda, &opts).unwrap().volume.to_vec();
            let num: f64 = got.iter().zip(&oracle).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = oracle.iter().map(|b| b * b).sum();
            assert!((num / den).sqrt() < 1e-9, "{h}x{w}: {}", (num / den).sqrt());
        }
    }

    #[test]
    fn per_frequency_requires_the_flag() {
        let tf = random_tf(1, 1, 4, 4, 5);
        let m = measurements(&tf, 30);
        let opts = TikhonovOptions {
            method: TikhonovMethod::PerFrequency,
            ..Default::default()
        };
        assert!(tikhonov_reconstruct(&m, &tf, 0.1, &opts).is_err());
    }

    #[test]
    fn consistent_overdetermined_instance_has_zero_gradient_at_the_truth() {
        let tf = random_tf(4, 1, 8, 8, 6);
        let truth = random_volume(1, 8, 8, 7);
        let m = MeasurementSet::new((0..4).map(|i| apply_forward(&truth, &tf, i).unwrap()).collect()).unwrap();
        let p = FidelityProblem::new(&tf, &m).unwrap();
        assert!(p.full_gradient(&truth).unwrap().norm() < 1e-8);
        let out = tikhonov_reconstruct(&m, &tf, 0.0, &TikhonovOptions::default()).unwrap();
        assert!(out.volume.sub(&truth).norm() < 1e-6 * truth.norm());
    }

    #[test]
    fn iteration_cap_surfaces_non_convergence() {
        let tf = random_tf(3, 2, 8, 8, 8);
        let m = measurements(&tf, 40);
        let opts = TikhonovOptions {
            max_iter: 2,
            ..Default::default()
        };
        let err = tikhonov_reconstruct(&m, &tf, 1e-3, &opts).unwrap_err();
        assert!(err.is_non_convergence());
    }

    #[test]
    fn adjoint_of_the_residual_vanishes_at_the_solution() {
        let tf = random_tf(2, 2, 6, 6, 9);
        let m = measurements(&tf, 50);
        let lambda = 0.2;
        let x = tikhonov_reconstruct(&m, &tf, lambda, &TikhonovOptions::default()).unwrap().volume;
        let mut g = x.scaled(lambda);
        for i in 0..2 {
            let r = apply_forward(&x, &tf, i).unwrap() - &m.images[i];
            g.axpy(0.5, &apply_adjoint(r.view(), &tf, i).unwrap());
        }
        assert!(g.norm() < 1e-7);
    }
}
