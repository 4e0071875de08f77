//! Quadratic data-fidelity terms `g_i(x) = 0.5 ||A_i x - y_i||^2`, their average `g`,
//! minibatch gradient estimates and the constants the convergence analysis needs.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{predicted_spectrum, ContrastVolume, ForwardConvention, MeasurementSet, TransferFunctionStack, VolumeSpectra};
use crate::linalg::power_iteration;
use crate::tensor::{fft2_in_place, fft2_real_unchecked, ifft2_real_part_unchecked};

/// Identifier of the generator behind [`UniformWithReplacement`], recorded in run metadata.
pub const RNG_ALGORITHM: &str = "chacha20";

#[derive(Clone, Copy, Debug)]
pub struct FidelityProblem<'a> {
    tf: &'a TransferFunctionStack,
    measurements: &'a MeasurementSet,
}

/// Result of one pass over a minibatch.
#[derive(Clone, Debug)]
pub struct BatchEvaluation {
    /// `(1/B) sum_b grad g_{i_b}(x)`
    pub gradient: ContrastVolume,
    /// `(1/B) sum_b g_{i_b}(x)`
    pub loss: f64,
    /// Sorted distinct indices that were touched.
    pub distinct: Vec<usize>,
    /// Number of 2D FFTs performed, a deterministic cost measure.
    pub fft_calls: usize,
}

impl<'a> FidelityProblem<'a> {
    pub fn new(tf: &'a TransferFunctionStack, measurements: &'a MeasurementSet) -> Result<Self> {
        measurements.check_against(tf)?;
        Ok(Self { tf, measurements })
    }

    pub fn tf(&self) -> &'a TransferFunctionStack {
        self.tf
    }

    pub fn measurements(&self) -> &'a MeasurementSet {
        self.measurements
    }

    pub fn illuminations(&self) -> usize {
        self.tf.illuminations()
    }

    /// `(slices, height, width)` of the unknown.
    pub fn volume_dim(&self) -> (usize, usize, usize) {
        (self.tf.slices(), self.tf.height(), self.tf.width())
    }

    pub fn zero_volume(&self) -> ContrastVolume {
        let (s, h, w) = self.volume_dim();
        ContrastVolume::zeros(s, h, w)
    }

    pub fn component_loss(&self, x: &ContrastVolume, i: usize) -> Result<f64> {
        Ok(self.evaluate(x, &[i])?.loss)
    }

    pub fn component_gradient(&self, x: &ContrastVolume, i: usize) -> Result<ContrastVolume> {
        Ok(self.evaluate(x, &[i])?.gradient)
    }

    /// `g(x) = (1/I) sum_i g_i(x)`
    pub fn full_loss(&self, x: &ContrastVolume) -> Result<f64> {
        Ok(self.evaluate_full(x)?.loss)
    }

    pub fn full_gradient(&self, x: &ContrastVolume) -> Result<ContrastVolume> {
        Ok(self.evaluate_full(x)?.gradient)
    }

    pub fn evaluate_full(&self, x: &ContrastVolume) -> Result<BatchEvaluation> {
        let all: Vec<usize> = (0..self.illuminations()).collect();
        self.evaluate(x, &all)
    }

    /// Draws `batch` indices from `sampler` and returns the averaged gradient.
    pub fn minibatch_gradient(
        &self,
        x: &ContrastVolume,
        batch: usize,
        sampler: &mut dyn IndexSampler,
    ) -> Result<ContrastVolume> {
        let indices = sampler.draw(self.illuminations(), batch)?;
        Ok(self.evaluate(x, &indices)?.gradient)
    }

    /// Loss and gradient averaged over the index multiset `indices`.
    pub fn evaluate(&self, x: &ContrastVolume, indices: &[usize]) -> Result<BatchEvaluation> {
        self.evaluate_inner(x, indices, true)
    }

    /// `(1/I) sum_i A_i^T A_i x`
    pub fn normal_apply(&self, x: &ContrastVolume) -> Result<ContrastVolume> {
        let all: Vec<usize> = (0..self.illuminations()).collect();
        Ok(self.evaluate_inner(x, &all, false)?.gradient)
    }

    /// `(1/I) sum_i A_i^T y_i`
    pub fn data_adjoint(&self) -> Result<ContrastVolume> {
        Ok(self.full_gradient(&self.zero_volume())?.scaled(-1.0))
    }

    /// Operator plus measurement bytes touched when evaluating the given minibatch.
    pub fn bytes_touched(&self, indices: &[usize]) -> usize {
        distinct_counts(indices).len() * self.tf.bytes_per_illumination()
    }

    fn evaluate_inner(&self, x: &ContrastVolume, indices: &[usize], with_data: bool) -> Result<BatchEvaluation> {
        if indices.is_empty() {
            return Err(Error::InvalidParameter("minibatch must contain at least one index".into()));
        }
        for &i in indices {
            self.tf.check_index(i)?;
        }
        self.tf.check_volume(x)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("iterate"));
        }
        let tf = self.tf;
        let (slices, h, w) = self.volume_dim();
        let batch = indices.len() as f64;
        let counts = distinct_counts(indices);
        let spectra = VolumeSpectra::of(x);

        // Residual spectra per distinct index, in sorted order regardless of scheduling.
        let residuals: Vec<(Array2<Complex64>, f64)> = counts
            .par_iter()
            .map(|&(i, _)| self.residual_spectrum(&spectra, i, with_data))
            .collect();

        let weights: Vec<f64> = counts.iter().map(|&(_, c)| c as f64 / batch).collect();
        let loss = pairwise_sum_scalar(&residuals.iter().zip(&weights).map(|((_, l), w)| l * w).collect::<Vec<_>>());

        // 2S accumulators: re slices first, then im slices.
        let parts: Vec<Array2<Complex64>> = (0..2 * slices)
            .into_par_iter()
            .map(|part| {
                let (j, phase) = (part % slices, part < slices);
                let term = |k: usize| {
                    let (i, _) = counts[k];
                    let hj = if phase { tf.h_re(i, j) } else { tf.h_im(i, j) };
                    let mut t = Array2::<Complex64>::zeros((h, w));
                    let wk = weights[k];
                    Zip::from(&mut t)
                        .and(hj.view())
                        .and(&residuals[k].0)
                        .for_each(|t, &hh, &r| *t = hh.conj() * r * wk);
                    t
                };
                pairwise_sum(0, counts.len(), &term)
            })
            .collect();
        let back: Vec<Array2<f64>> = parts.into_par_iter().map(ifft2_real_part_unchecked).collect();
        let mut re = ndarray::Array3::zeros((slices, h, w));
        let mut im = ndarray::Array3::zeros((slices, h, w));
        for (part, arr) in back.into_iter().enumerate() {
            let target = if part < slices { &mut re } else { &mut im };
            target.index_axis_mut(ndarray::Axis(0), part % slices).assign(&arr);
        }
        let gradient = ContrastVolume {
            re: crate::tensor::RealVolume::from_array_unchecked(re),
            im: crate::tensor::RealVolume::from_array_unchecked(im),
        };
        if !gradient.is_finite() || !loss.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(BatchEvaluation {
            gradient,
            loss,
            distinct: counts.iter().map(|&(i, _)| i).collect(),
            fft_calls: 4 * slices + 2 * counts.len(),
        })
    }

    /// Spectrum of the residual `A_i x - y_i` together with `g_i(x)`.
    fn residual_spectrum(&self, spectra: &VolumeSpectra, i: usize, with_data: bool) -> (Array2<Complex64>, f64) {
        let mut pred = predicted_spectrum(self.tf, spectra, i);
        let y = &self.measurements.images[i];
        match self.tf.convention {
            ForwardConvention::RealPartKept => {
                let mut r = ifft2_real_part_unchecked(pred);
                if with_data {
                    r -= y;
                }
                let loss = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
                (fft2_real_unchecked(r.view()).into_array(), loss)
            }
            ForwardConvention::RealPartDropped => {
                fft2_in_place(&mut pred, true);
                if with_data {
                    Zip::from(&mut pred).and(y).for_each(|p, &v| p.re -= v);
                }
                let loss = 0.5 * pred.iter().map(|c| c.norm_sqr()).sum::<f64>();
                fft2_in_place(&mut pred, false);
                (pred, loss)
            }
        }
    }
}

/// Sorted `(index, multiplicity)` pairs.
pub fn distinct_counts(indices: &[usize]) -> Vec<(usize, usize)> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for i in sorted {
        match out.last_mut() {
            Some((last, c)) if *last == i => *c += 1,
            _ => out.push((i, 1)),
        }
    }
    out
}

fn pairwise_sum<F>(lo: usize, hi: usize, term: &F) -> Array2<Complex64>
where
    F: Fn(usize) -> Array2<Complex64>,
{
    if hi - lo == 1 {
        return term(lo);
    }
    let mid = lo + (hi - lo) / 2;
    let mut left = pairwise_sum(lo, mid, term);
    left += &pairwise_sum(mid, hi, term);
    left
}

fn pairwise_sum_scalar(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum_scalar(&v[..n / 2]) + pairwise_sum_scalar(&v[n / 2..]),
    }
}

/// Source of minibatch indices (0-based).
pub trait IndexSampler: Send {
    fn draw(&mut self, illuminations: usize, batch: usize) -> Result<Vec<usize>>;

    /// Short label for logs and trace metadata.
    fn describe(&self) -> String;
}

fn check_batch(batch: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::InvalidParameter("minibatch size must be at least 1".into()));
    }
    Ok(())
}

/// I.i.d. uniform indices, with replacement.
#[derive(Clone, Debug)]
pub struct UniformWithReplacement {
    rng: ChaCha20Rng,
    seed: u64,
}

impl UniformWithReplacement {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            seed,
        }
    }
}

impl IndexSampler for UniformWithReplacement {
    fn draw(&mut self, illuminations: usize, batch: usize) -> Result<Vec<usize>> {
        check_batch(batch)?;
        Ok((0..batch).map(|_| self.rng.random_range(0..illuminations)).collect())
    }

    fn describe(&self) -> String {
        format!("uniform-with-replacement({RNG_ALGORITHM}, seed {})", self.seed)
    }
}

/// Distinct uniform indices. Not covered by the unbiasedness analysis.
#[derive(Clone, Debug)]
pub struct WithoutReplacement {
    rng: ChaCha20Rng,
    seed: u64,
}

impl WithoutReplacement {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            seed,
        }
    }
}

impl IndexSampler for WithoutReplacement {
    fn draw(&mut self, illuminations: usize, batch: usize) -> Result<Vec<usize>> {
        check_batch(batch)?;
        if batch > illuminations {
            return Err(Error::InvalidParameter(format!(
                "cannot draw {batch} distinct indices from {illuminations}"
            )));
        }
        Ok(index::sample(&mut self.rng, illuminations, batch).into_vec())
    }

    fn describe(&self) -> String {
        format!("without-replacement({RNG_ALGORITHM}, seed {})", self.seed)
    }
}

/// Returns the same index multiset on every draw, whatever the requested batch size.
#[derive(Clone, Debug)]
pub struct FixedSubset(pub Vec<usize>);

impl FixedSubset {
    pub fn full(illuminations: usize) -> Self {
        Self((0..illuminations).collect())
    }

    pub fn repeat(index: usize, times: usize) -> Self {
        Self(vec![index; times])
    }
}

impl IndexSampler for FixedSubset {
    fn draw(&mut self, illuminations: usize, _batch: usize) -> Result<Vec<usize>> {
        if self.0.is_empty() {
            return Err(Error::InvalidParameter("fixed subset is empty".into()));
        }
        if let Some(&bad) = self.0.iter().find(|&&i| i >= illuminations) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                count: illuminations,
            });
        }
        Ok(self.0.clone())
    }

    fn describe(&self) -> String {
        format!("fixed({} indices)", self.0.len())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PowerIterationOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub safety_factor: f64,
    pub seed: u64,
}

impl Default for PowerIterationOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            rel_tol: 1e-8,
            safety_factor: 1.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LipschitzEstimate {
    /// Power-iteration estimate of `||A_i||^2` per illumination.
    pub per_component: Vec<f64>,
    /// `max_i ||A_i||^2` times the safety factor.
    pub lipschitz: f64,
}

/// `max_i ||A_i||^2 * 1.01` with the default power-iteration settings.
pub fn estimate_lipschitz(p: &FidelityProblem) -> Result<f64> {
    Ok(estimate_lipschitz_with(p, &PowerIterationOptions::default())?.lipschitz)
}

pub fn estimate_lipschitz_with(p: &FidelityProblem, opts: &PowerIterationOptions) -> Result<LipschitzEstimate> {
    let shape = p.volume_dim();
    let per_component = (0..p.illuminations())
        .into_par_iter()
        .map(|i| {
            power_iteration(
                |v| {
                    p.evaluate_inner(v, &[i], false)
                        .expect("volume shape fixed by the problem")
                        .gradient
                },
                shape,
                opts.max_iter,
                opts.rel_tol,
                opts.seed,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = per_component.iter().cloned().fold(0.0, f64::max);
    Ok(LipschitzEstimate {
        per_component,
        lipschitz: max * opts.safety_factor,
    })
}

/// Sample mean of `||grad g(x) - minibatch gradient||^2` over `samples` draws.
pub fn estimate_variance(
    p: &FidelityProblem,
    x: &ContrastVolume,
    batch: usize,
    samples: usize,
    sampler: &mut dyn IndexSampler,
) -> Result<f64> {
    check_batch(batch)?;
    if samples == 0 {
        return Err(Error::InvalidParameter("need at least one variance sample".into()));
    }
    let full = p.full_gradient(x)?;
    let mut total = 0.0;
    for _ in 0..samples {
        let g = p.minibatch_gradient(x, batch, sampler)?;
        total += full.sub(&g).norm_sq();
    }
    Ok(total / samples as f64)
}

/// Seeded random contrast volume, handy for probes and property tests.
pub fn random_volume(dim: (usize, usize, usize), scale: f64, rng: &mut impl Rng) -> ContrastVolume {
    let (s, h, w) = dim;
    let flat: Vec<f64> = (0..2 * s * h * w).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    ContrastVolume::from_flat(s, h, w, &flat).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::test_support::{identity_tf, random_image, random_tf, random_volume as rv};
    use crate::forward::{apply_adjoint, apply_forward};

    fn measurements_for(tf: &TransferFunctionStack, seed: u64) -> MeasurementSet {
        let imgs = (0..tf.illuminations())
            .map(|i| random_image(tf.height(), tf.width(), seed + i as u64))
            .collect();
        let mut m = MeasurementSet::new(imgs).unwrap();
        m.convention = tf.convention;
        m
    }

    #[test]
    fn loss_at_zero() {
        let tf = random_tf(2, 2, 8, 8, 1);
        let mut m = measurements_for(&tf, 10);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let expected = 0.5 * m.images[1].iter().map(|v| v * v).sum::<f64>();
        assert!((p.component_loss(&p.zero_volume(), 1).unwrap() - expected).abs() < 1e-12);

        for img in &mut m.images {
            img.fill(0.0);
        }
        let p = FidelityProblem::new(&tf, &m).unwrap();
        assert_eq!(p.component_loss(&p.zero_volume(), 0).unwrap(), 0.0);
    }

    #[test]
    fn exact_fit_has_zero_loss_and_gradient() {
        let tf = identity_tf(1, 1, 8, 8);
        let y = random_image(8, 8, 3);
        let m = MeasurementSet::new(vec![y.clone()]).unwrap();
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let mut x = p.zero_volume();
        x.re.slice_mut(0).assign(&y);
        assert!(p.component_loss(&x, 0).unwrap() < 1e-28);
        assert!(p.component_gradient(&x, 0).unwrap().norm() < 1e-13);
    }

    #[test]
    fn identity_gradient_is_x_minus_y() {
        let tf = identity_tf(1, 1, 8, 8);
        let y = random_image(8, 8, 4);
        let m = MeasurementSet::new(vec![y.clone()]).unwrap();
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let x = rv(1, 8, 8, 5);
        let g = p.component_gradient(&x, 0).unwrap();
        let expected = &x.re.slice(0) - &y;
        let err = Zip::from(g.re.slice(0)).and(&expected).fold(0.0_f64, |m, a, b| m.max((a - b).abs()));
        assert!(err < 1e-13);
        // hIm = 0 so the absorption part receives no gradient
        assert!(g.im.as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_the_adjoint_formula() {
        let tf = random_tf(3, 2, 8, 8, 6);
        let m = measurements_for(&tf, 20);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let x = rv(2, 8, 8, 7);
        let r = apply_forward(&x, &tf, 2).unwrap() - &m.images[2];
        let oracle = apply_adjoint(r.view(), &tf, 2).unwrap();
        assert!(p.component_gradient(&x, 2).unwrap().sub(&oracle).norm() < 1e-12 * oracle.norm());
    }

    fn central_difference_check(convention: ForwardConvention) {
        let mut tf = random_tf(2, 2, 8, 8, 8);
        tf.convention = convention;
        let m = measurements_for(&tf, 30);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        for trial in 0..3 {
            let x = rv(2, 8, 8, 40 + trial);
            let d = rv(2, 8, 8, 50 + trial);
            let step = 1e-5;
            let fp = p.component_loss(&x.add(&d.scaled(step)), 1).unwrap();
            let fm = p.component_loss(&x.sub(&d.scaled(step)), 1).unwrap();
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = p.component_gradient(&x, 1).unwrap().dot(&d);
            assert!((numeric - analytic).abs() <= 1e-6 * analytic.abs(), "{numeric} vs {analytic}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        central_difference_check(ForwardConvention::RealPartKept);
    }

    #[test]
    fn complex_residual_gradient_matches_central_differences() {
        central_difference_check(ForwardConvention::RealPartDropped);
    }

    #[test]
    fn full_gradient_is_the_component_mean() {
        let tf = random_tf(5, 1, 6, 6, 9);
        let m = measurements_for(&tf, 60);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let x = rv(1, 6, 6, 10);
        let mut mean = p.zero_volume();
        for i in 0..5 {
            mean.axpy(0.2, &p.component_gradient(&x, i).unwrap());
        }
        assert!(p.full_gradient(&x).unwrap().sub(&mean).norm() < 1e-12);

        let tf1 = random_tf(1, 2, 6, 6, 11);
        let m1 = measurements_for(&tf1, 70);
        let p1 = FidelityProblem::new(&tf1, &m1).unwrap();
        let x1 = rv(2, 6, 6, 12);
        assert_eq!(p1.full_gradient(&x1).unwrap(), p1.component_gradient(&x1, 0).unwrap());
    }

    #[test]
    fn stub_sampler_returns_the_component_gradient() {
        let tf = random_tf(5, 2, 8, 8, 13);
        let m = measurements_for(&tf, 80);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let x = rv(2, 8, 8, 14);
        let mut stub = FixedSubset::repeat(3, 4);
        let g = p.minibatch_gradient(&x, 4, &mut stub).unwrap();
        assert!(g.sub(&p.component_gradient(&x, 3).unwrap()).norm() < 1e-13);
    }

    #[test]
    fn single_draw_enumeration_is_unbiased() {
        let tf = random_tf(4, 2, 8, 8, 15);
        let m = measurements_for(&tf, 90);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let x = rv(2, 8, 8, 16);
        let mut avg = p.zero_volume();
        for i in 0..4 {
            avg.axpy(0.25, &p.minibatch_gradient(&x, 1, &mut FixedSubset(vec![i])).unwrap());
        }
        assert!(avg.sub(&p.full_gradient(&x).unwrap()).norm() < 1e-12);
    }

    #[test]
    fn seeded_draws_are_bit_identical() {
        let tf = random_tf(6, 1, 8, 8, 17);
        let m = measurements_for(&tf, 100);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let x = rv(1, 8, 8, 18);
        let a = p.minibatch_gradient(&x, 3, &mut UniformWithReplacement::new(5)).unwrap();
        let b = p.minibatch_gradient(&x, 3, &mut UniformWithReplacement::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_size_zero_is_rejected() {
        let tf = random_tf(2, 1, 4, 4, 19);
        let m = measurements_for(&tf, 110);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let x = p.zero_volume();
        assert!(p.minibatch_gradient(&x, 0, &mut UniformWithReplacement::new(0)).is_err());
        assert!(p.minibatch_gradient(&x, 0, &mut WithoutReplacement::new(0)).is_err());
    }

    #[test]
    fn without_replacement_draws_distinct_indices() {
        let mut s = WithoutReplacement::new(3);
        for _ in 0..20 {
            let d = s.draw(10, 10).unwrap();
            assert_eq!(distinct_counts(&d).len(), 10);
        }
        assert!(s.draw(3, 4).is_err());
    }

    #[test]
    fn lipschitz_of_identity_and_scaling() {
        let tf = identity_tf(1, 1, 8, 8);
        let m = MeasurementSet::new(vec![Array2::zeros((8, 8))]).unwrap();
        let p = FidelityProblem::new(&tf, &m).unwrap();
        assert!((estimate_lipschitz(&p).unwrap() - 1.01).abs() < 1e-3);

        let tf = random_tf(3, 2, 8, 8, 20);
        let m = measurements_for(&tf, 120);
        let l1 = estimate_lipschitz(&FidelityProblem::new(&tf, &m).unwrap()).unwrap();
        let tf2 = tf.scaled(2.0);
        let l2 = estimate_lipschitz(&FidelityProblem::new(&tf2, &m).unwrap()).unwrap();
        assert!((l2 / l1 - 4.0).abs() < 4e-3);
    }

    #[test]
    fn zero_operator_is_signalled() {
        let tf = random_tf(2, 1, 4, 4, 21).scaled(0.0);
        let m = measurements_for(&tf, 130);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        assert!(matches!(estimate_lipschitz(&p), Err(Error::ZeroOperator)));
    }

    #[test]
    fn variance_is_zero_for_a_single_component() {
        let tf = random_tf(1, 1, 8, 8, 22);
        let m = measurements_for(&tf, 140);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let x = rv(1, 8, 8, 23);
        let v = estimate_variance(&p, &x, 1, 16, &mut UniformWithReplacement::new(1)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn variance_is_zero_for_identical_components() {
        let tf = identity_tf(4, 1, 8, 8);
        let y = random_image(8, 8, 24);
        let m = MeasurementSet::new(vec![y; 4]).unwrap();
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let x = rv(1, 8, 8, 25);
        let v = estimate_variance(&p, &x, 2, 32, &mut UniformWithReplacement::new(2)).unwrap();
        assert!(v < 1e-12);
    }

    #[test]
    fn two_point_variance_matches_closed_form() {
        let tf = random_tf(2, 1, 8, 8, 26);
        let m = measurements_for(&tf, 150);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let x = rv(1, 8, 8, 27);
        let d = p.component_gradient(&x, 0).unwrap().sub(&p.component_gradient(&x, 1).unwrap());
        let closed = d.scaled(0.5).norm_sq();
        let v = estimate_variance(&p, &x, 1, 4096, &mut UniformWithReplacement::new(3)).unwrap();
        assert!((v - closed).abs() <= 0.05 * closed, "{v} vs {closed}");
    }

    #[test]
    fn bytes_touched_counts_distinct_indices() {
        let tf = random_tf(5, 2, 8, 8, 28);
        let m = measurements_for(&tf, 160);
        let p = FidelityProblem::new(&tf, &m).unwrap();
        let one = tf.bytes_per_illumination();
        assert_eq!(p.bytes_touched(&[1, 1, 3]), 2 * one);
        assert_eq!(p.bytes_touched(&[0, 1, 2, 3, 4]), 5 * one);
    }

    #[test]
    fn distinct_counts_sorts_and_counts() {
        assert_eq!(distinct_counts(&[4, 1, 4, 0]), vec![(0, 1), (1, 1), (4, 2)]);
    }
}
