//! Numerical checks of the SIMBA convergence bound and the operator-theory facts
//! behind it, on small instances whose constants are computable exactly.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::denoise::{denoise_contrast, Denoiser, DenoiserSpec};
use crate::error::{Error, Result};
use crate::fidelity::{estimate_lipschitz, random_volume, FidelityProblem, FixedSubset, UniformWithReplacement};
use crate::forward::{Acquisition, ContrastVolume, MeasurementSet, TransferFunctionStack};
use crate::linalg::conjugate_gradient;
use crate::sim::simulate_measurements;
use crate::solver::{red_operator, run_with_sampler, GammaSchedule, IterRecord, SolverConfig, StepSize};
use crate::tensor::{fft2_real_unchecked, mirror_bin, ComplexImage, RealVolume};

/// `(L + 2 tau) [dist0sq / (gamma t) + gamma nu2 / B]`
pub fn convergence_bound(l: f64, tau: f64, gamma: f64, batch: usize, nu2: f64, dist0sq: f64, t: usize) -> Result<f64> {
    let limit = 1.0 / (l + 2.0 * tau);
    if !(gamma > 0.0 && gamma <= limit * (1.0 + 1e-12)) {
        return Err(Error::InvalidParameter(format!(
            "step size {gamma} outside (0, 1/(L+2tau)] = (0, {limit}]"
        )));
    }
    if batch == 0 || t == 0 {
        return Err(Error::InvalidParameter("bound needs B >= 1 and t >= 1".into()));
    }
    Ok((l + 2.0 * tau) * (dist0sq / (gamma * t as f64) + gamma * nu2 / batch as f64))
}

/// Zero of `G` for a linear denoiser `W`: solves
/// `((1/I) sum A_i^T A_i + tau (Id - W)) x = (1/I) sum A_i^T y_i` by conjugate gradient.
pub fn fixed_point_oracle(p: &FidelityProblem, d: &dyn Denoiser, tau: f64) -> Result<ContrastVolume> {
    if !d.is_linear() {
        return Err(Error::InvalidParameter(format!(
            "fixed-point oracle needs a linear denoiser, got {}",
            d.describe()
        )));
    }
    let unknowns = p.zero_volume().len();
    if unknowns > 2 * 4096 {
        return Err(Error::InvalidParameter(format!(
            "fixed-point oracle is limited to small instances, got {unknowns} unknowns"
        )));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be non-negative, got {tau}")));
    }
    let rhs = p.data_adjoint()?;
    let apply = |v: &ContrastVolume| {
        let mut out = p.normal_apply(v).expect("shape fixed by the problem");
        if tau != 0.0 {
            let wv = denoise_contrast(d, v).expect("finite input");
            out.axpy(tau, &v.sub(&wv));
        }
        out
    };
    let outcome = conjugate_gradient(apply, &rhs, 1e-10, 20 * unknowns);
    if !outcome.converged {
        return Err(Error::NonConvergence {
            solver: "fixed-point oracle (conjugate gradient)",
            iterations: outcome.iterations,
            residual: outcome.relative_residual,
            hint: "; the system is singular, likely a null space shared by the measurements and Id - W (e.g. the DC of the phase with tau = 0)",
        });
    }
    Ok(outcome.solution)
}

/// `(1/I) sum_i ||grad g_i(x) - grad g(x)||^2`, the exact single-draw gradient variance.
pub fn component_variance(p: &FidelityProblem, x: &ContrastVolume) -> Result<f64> {
    let full = p.full_gradient(x)?;
    let mut total = 0.0;
    for i in 0..p.illuminations() {
        total += p.component_gradient(x, i)?.sub(&full).norm_sq();
    }
    Ok(total / p.illuminations() as f64)
}

/// Frequency-diagonal stack whose per-frequency `I x 2(J+1)` matrices are `sqrt(I)` times a
/// block of a random unitary, with Hermitian symmetry so real volumes map to real images.
///
/// When `I >= 2(J+1)` the averaged normal operator is exactly the identity.
pub fn tight_frame_tf(illuminations: usize, slices: usize, height: usize, width: usize, seed: u64) -> Result<TransferFunctionStack> {
    if illuminations == 0 || slices == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidParameter("tight-frame stack needs positive sizes".into()));
    }
    let n = 2 * slices;
    let m = illuminations.max(n);
    let scale = (illuminations as f64).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut h_re = vec![Array2::<Complex64>::zeros((height, width)); illuminations * slices];
    let mut h_im = h_re.clone();
    for r in 0..height {
        for c in 0..width {
            let (mr, mc) = (mirror_bin(r, height), mirror_bin(c, width));
            let self_conjugate = (mr, mc) == (r, c);
            if !self_conjugate && (mr, mc) < (r, c) {
                continue; // filled from its mirror
            }
            let q = random_unitary(m, !self_conjugate, &mut rng);
            for i in 0..illuminations {
                for j in 0..n {
                    let v = q[(i, j)] * scale;
                    let target = if j < slices { &mut h_re } else { &mut h_im };
                    let arr = &mut target[i * slices + j % slices];
                    arr[[r, c]] = v;
                    arr[[mr, mc]] = v.conj();
                }
            }
        }
    }
    let wrap = |v: Vec<Array2<Complex64>>| v.into_iter().map(ComplexImage::from_array_unchecked).collect();
    let mut tf = TransferFunctionStack::new(illuminations, slices, wrap(h_re), wrap(h_im), 1.0, Acquisition::default())?;
    tf.frequency_diagonal = true;
    Ok(tf)
}

/// Q factor of a Gaussian matrix (complex if `complex`, else real).
fn random_unitary(m: usize, complex: bool, rng: &mut ChaCha20Rng) -> DMatrix<Complex64> {
    let g = DMatrix::<Complex64>::from_fn(m, m, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = if complex { rng.sample(StandardNormal) } else { 0.0 };
        Complex64::new(re, im)
    });
    g.qr().q()
}

#[derive(Clone, Debug)]
pub struct TheoryInstanceParams {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    pub illuminations: usize,
    /// Highest spatial frequency index present in the ground truth.
    pub truth_bandwidth: usize,
    pub input_snr_db: Option<f64>,
    pub seed: u64,
}

impl TheoryInstanceParams {
    pub fn new(width: usize, height: usize, slices: usize, illuminations: usize) -> Self {
        Self {
            width,
            height,
            slices,
            illuminations,
            truth_bandwidth: 1,
            input_snr_db: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TheoryInstance {
    pub tf: TransferFunctionStack,
    pub measurements: MeasurementSet,
}

impl TheoryInstance {
    pub fn new(params: &TheoryInstanceParams) -> Result<Self> {
        let tf = tight_frame_tf(params.illuminations, params.slices, params.height, params.width, params.seed)?;
        let truth = smooth_truth(params)?;
        let measurements = simulate_measurements(&truth, &tf, params.input_snr_db, params.seed.wrapping_add(1))?;
        Ok(Self { tf, measurements })
    }

    pub fn problem(&self) -> FidelityProblem<'_> {
        FidelityProblem::new(&self.tf, &self.measurements).expect("consistent by construction")
    }
}

/// Sum of random cosines with frequency indices up to `truth_bandwidth`, plus an offset.
fn smooth_truth(params: &TheoryInstanceParams) -> Result<ContrastVolume> {
    let (s, h, w) = (params.slices, params.height, params.width);
    let b = params.truth_bandwidth as i64;
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed ^ 0x5eed_7007);
    let mut part = |amplitude: f64| -> Result<RealVolume> {
        let mut slices = Vec::with_capacity(s);
        for _ in 0..s {
            let offset = rng.random_range(0.2..1.0) * amplitude;
            let mut terms = Vec::new();
            for ky in -b..=b {
                for kx in -b..=b {
                    if (ky, kx) != (0, 0) {
                        terms.push((ky, kx, rng.random_range(0.0..amplitude / 2.0), rng.random_range(0.0..std::f64::consts::TAU)));
                    }
                }
            }
            slices.push(Array2::from_shape_fn((h, w), |(y, x)| {
                offset
                    + terms
                        .iter()
                        .map(|&(ky, kx, a, phi)| {
                            a * (std::f64::consts::TAU * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64) + phi).cos()
                        })
                        .sum::<f64>()
            }));
        }
        RealVolume::from_slices(&slices)
    };
    let re = part(1.0)?;
    let im = part(0.3)?;
    ContrastVolume::new(re, im)
}

#[derive(Clone, Debug)]
pub struct TheorySuiteConfig {
    pub batches: Vec<usize>,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub tau: f64,
    pub schedule: GammaSchedule,
    /// Denoiser radius and spatial sigma of the Gaussian kernel.
    pub kernel_radius: usize,
    pub kernel_sigma: f64,
}

impl TheorySuiteConfig {
    pub fn new(batches: Vec<usize>, seeds: u64, iterations: usize) -> Self {
        Self {
            batches,
            seeds: (0..seeds).collect(),
            iterations,
            tau: 0.2,
            schedule: GammaSchedule::Constant,
            kernel_radius: 2,
            kernel_sigma: 0.7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    /// `(1/t) sum_{k<=t} ||G(x^{k-1})||^2` for `t = 1..`; empty if the run diverged.
    pub running_average: Vec<f64>,
    /// `||G(x^{k-1})||^2` per iteration.
    pub g_sq: Vec<f64>,
    pub passed: bool,
    pub diverged: bool,
    /// Relative distance `||x^t - x*|| / ||x*||` at the end of the run.
    pub final_relative_distance: f64,
}

impl SeedOutcome {
    /// Mean of `||G||^2` over the last fifth of the run.
    pub fn floor(&self) -> f64 {
        let n = self.g_sq.len();
        let tail = &self.g_sq[n - (n / 5).max(1)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn min_g_sq(&self) -> f64 {
        self.g_sq.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub batch: usize,
    pub gamma: f64,
    /// `nu^2` such that the minibatch gradient variance is at most `nu^2 / B`.
    pub nu2: f64,
    /// Bound value per `t = 1..=iterations`.
    pub bound: Vec<f64>,
    pub seeds: Vec<SeedOutcome>,
}

impl BatchOutcome {
    pub fn pass_count(&self) -> usize {
        self.seeds.iter().filter(|s| s.passed).count()
    }

    /// Seed-averaged error floor.
    pub fn floor(&self) -> f64 {
        self.seeds.iter().map(SeedOutcome::floor).sum::<f64>() / self.seeds.len() as f64
    }

    pub fn mean_min_g_sq(&self) -> f64 {
        self.seeds.iter().map(SeedOutcome::min_g_sq).sum::<f64>() / self.seeds.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct TheoryReport {
    pub lipschitz: f64,
    pub tau: f64,
    pub dist0_sq: f64,
    pub x_star_norm: f64,
    pub batches: Vec<BatchOutcome>,
}

impl TheoryReport {
    pub fn seeds_used(&self) -> Vec<u64> {
        self.batches.first().map(|b| b.seeds.iter().map(|s| s.seed).collect()).unwrap_or_default()
    }
}

/// Runs SIMBA per batch size and seed with full `||G||^2` tracing and compares the
/// running averages with the convergence bound.
pub fn run_convergence_suite(instance: &TheoryInstance, cfg: &TheorySuiteConfig) -> Result<TheoryReport> {
    if !(cfg.tau > 0.0) {
        return Err(Error::InvalidParameter(
            "the convergence suite needs tau > 0 so the fixed point is unique".into(),
        ));
    }
    let p = instance.problem();
    let denoiser = DenoiserSpec::gaussian(cfg.kernel_radius, cfg.kernel_sigma)?;
    let lipschitz = estimate_lipschitz(&p)?;
    let x_star = fixed_point_oracle(&p, &denoiser, cfg.tau)?;
    let x0 = p.zero_volume();
    let dist0_sq = x0.sub(&x_star).norm_sq();
    // The variance is a convex quadratic in x, so on the segment from x0 to x* it peaks at an end.
    let nu2 = component_variance(&p, &x0)?.max(component_variance(&p, &x_star)?);

    let mut batches = Vec::new();
    for &batch in &cfg.batches {
        let mut solver = SolverConfig::new(cfg.tau, batch, cfg.iterations).with_denoiser(denoiser.clone());
        solver.lipschitz = Some(lipschitz);
        solver.gamma = StepSize::Auto;
        solver.schedule = cfg.schedule;
        solver.trace_full_gradient = true;
        solver.theory_mode = true;
        let gamma = crate::solver::resolve_step(&p, &solver)?.0;
        let bound = (1..=cfg.iterations)
            .map(|t| convergence_bound(lipschitz, cfg.tau, gamma, batch, nu2, dist0_sq, t))
            .collect::<Result<Vec<_>>>()?;
        let seeds = cfg
            .seeds
            .par_iter()
            .map(|&seed| {
                let mut sampler = UniformWithReplacement::new(seed);
                match run_with_sampler(&p, &solver, &mut sampler, Some(&x0), &mut |_: &IterRecord| Ok(())) {
                    Ok(out) => {
                        let avg = out.trace.running_average_g().expect("full tracing on");
                        let g_sq = out.trace.records.iter().map(|r| r.g_sq_norm.unwrap_or(f64::NAN)).collect();
                        let passed = avg.iter().zip(&bound).all(|(a, b)| a <= b);
                        Ok(SeedOutcome {
                            seed,
                            running_average: avg,
                            g_sq,
                            passed,
                            diverged: false,
                            final_relative_distance: out.x.sub(&x_star).norm() / x_star.norm(),
                        })
                    }
                    Err(Error::Diverged { .. }) => Ok(SeedOutcome {
                        seed,
                        running_average: Vec::new(),
                        g_sq: vec![f64::INFINITY],
                        passed: false,
                        diverged: true,
                        final_relative_distance: f64::INFINITY,
                    }),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        batches.push(BatchOutcome {
            batch,
            gamma,
            nu2,
            bound,
            seeds,
        });
    }
    Ok(TheoryReport {
        lipschitz,
        tau: cfg.tau,
        dist0_sq,
        x_star_norm: x_star.norm(),
        batches,
    })
}

/// Runs SIMBA with the given (possibly inadmissible) step and reports whether any seed diverged.
pub fn divergence_witness(instance: &TheoryInstance, tau: f64, gamma: f64, batch: usize, iterations: usize, seeds: &[u64]) -> Result<bool> {
    let p = instance.problem();
    let d = DenoiserSpec::gaussian(2, 0.7)?;
    let mut cfg = SolverConfig::new(tau, batch, iterations).with_denoiser(d);
    cfg.gamma = StepSize::Fixed(gamma);
    for &seed in seeds {
        let mut sampler = UniformWithReplacement::new(seed);
        match run_with_sampler(&p, &cfg, &mut sampler, None, &mut |_: &IterRecord| Ok(())) {
            Err(Error::Diverged { .. }) => return Ok(true),
            Err(e) => return Err(e),
            Ok(_) => {}
        }
    }
    Ok(false)
}

/// Outcome of one randomized inequality check: `worst_margin` is the smallest
/// `rhs - lhs` seen (negative means a violation beyond the tolerance).
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub trials: usize,
    pub worst_margin: f64,
    pub passed: bool,
}

impl PropertyCheck {
    fn new(name: &'static str, trials: usize, margins: impl IntoIterator<Item = f64>, tol: f64) -> Self {
        let worst = margins.into_iter().fold(f64::INFINITY, f64::min);
        Self {
            name,
            trials,
            worst_margin: worst,
            passed: worst >= -tol,
        }
    }
}

/// Circular 2D correlation with a small kernel centred at its middle tap.
pub(crate) fn circular_correlate(img: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (kh, kw) = kernel.dim();
    let (ry, rx) = ((kh / 2) as i64, (kw / 2) as i64);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for a in 0..kh {
            for b in 0..kw {
                let yy = (y as i64 + a as i64 - ry).rem_euclid(h as i64) as usize;
                let xx = (x as i64 + b as i64 - rx).rem_euclid(w as i64) as usize;
                acc += kernel[[a, b]] * img[[yy, xx]];
            }
        }
        acc
    })
}

fn flipped(kernel: &Array2<f64>) -> Array2<f64> {
    let (kh, kw) = kernel.dim();
    Array2::from_shape_fn((kh, kw), |(a, b)| kernel[[kh - 1 - a, kw - 1 - b]])
}

/// Random 3x3 kernel with l1 norm equal to `l1`.
fn random_kernel(rng: &mut ChaCha20Rng, l1: f64) -> Array2<f64> {
    let k = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
    let n = k.mapv(f64::abs).sum();
    k * (l1 / n)
}

fn norm(a: &Array2<f64>) -> f64 {
    a.mapv(|v| v * v).sum().sqrt()
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum()
}

fn random_image(rng: &mut ChaCha20Rng, dims: (usize, usize)) -> Array2<f64> {
    let scale = rng.random_range(0.1..3.0);
    Array2::from_shape_simple_fn(dims, || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Randomized checks of four averaged-operator facts on `pairs` random pairs each.
pub fn operator_property_suite(rng: &mut ChaCha20Rng, dims: (usize, usize), pairs: usize) -> Vec<PropertyCheck> {
    let tol = 1e-9;
    let mut m1 = Vec::with_capacity(pairs);
    let mut m2 = Vec::with_capacity(pairs);
    let mut m3 = Vec::with_capacity(pairs);
    let mut m4 = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let x = random_image(rng, dims);
        let y = random_image(rng, dims);
        let d = &x - &y;

        // Convex combination of nonexpansive convolutions.
        let count = rng.random_range(2..5);
        let kernels: Vec<Array2<f64>> = (0..count).map(|_| {
            let l1 = rng.random_range(0.1..1.0);
            random_kernel(rng, l1)
        }).collect();
        let mut theta: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = theta.iter().sum();
        theta.iter_mut().for_each(|t| *t /= total);
        let mut td = Array2::<f64>::zeros(dims);
        for (k, t) in kernels.iter().zip(&theta) {
            td = td + circular_correlate(&d, k) * *t;
        }
        m1.push(norm(&d) - norm(&td));

        // R = Id - T is 1/2-cocoercive for nonexpansive T (linear, so Rx - Ry = R(x - y)).
        let l1 = rng.random_range(0.1..1.0);
        let k = random_kernel(rng, l1);
        let rd = &d - &circular_correlate(&d, &k);
        m2.push(dot(&rd, &d) - 0.5 * dot(&rd, &rd));

        // Averaged operator inequality.
        let alpha = rng.random_range(0.05..0.95);
        let l1 = rng.random_range(0.1..1.0);
        let n = random_kernel(rng, l1);
        let tdiff = &d * (1.0 - alpha) + circular_correlate(&d, &n) * alpha;
        let rdiff = &d - &tdiff;
        m3.push(dot(&d, &d) - ((1.0 - alpha) / alpha) * dot(&rdiff, &rdiff) - dot(&tdiff, &tdiff));

        // Id - 2 beta grad g is nonexpansive for beta = 1/L, g = 0.5 ||A x - b||^2.
        let l1 = rng.random_range(0.5..3.0);
        let a = random_kernel(rng, l1);
        let l = convolution_norm_sq(&a, dims);
        let ad = circular_correlate(&d, &a);
        let grad_d = circular_correlate(&ad, &flipped(&a));
        let step = &d - &(grad_d * (2.0 / l));
        m4.push(norm(&d) - norm(&step));
    }
    vec![
        PropertyCheck::new("convex combination of nonexpansive maps is nonexpansive", pairs, m1, tol),
        PropertyCheck::new("Id - T is 1/2-cocoercive for nonexpansive T", pairs, m2, tol),
        PropertyCheck::new("alpha-averaged operator inequality", pairs, m3, tol),
        PropertyCheck::new("Id - 2 beta T is nonexpansive for beta-cocoercive T", pairs, m4, tol),
    ]
}

/// Squared operator norm of circular correlation with `kernel` on a `dims` grid.
fn convolution_norm_sq(kernel: &Array2<f64>, dims: (usize, usize)) -> f64 {
    let (h, w) = dims;
    let mut impulse = Array2::<f64>::zeros(dims);
    impulse[[0, 0]] = 1.0;
    let response = circular_correlate(&impulse, kernel);
    let spectrum = fft2_real_unchecked(response.view());
    // Unitary transform: the multiplier is sqrt(hw) times the transformed impulse response.
    let scale = (h * w) as f64;
    spectrum.view().iter().map(|c| c.norm_sqr() * scale).fold(0.0, f64::max)
}

/// Checks on a theory instance: nonexpansiveness of `Id - 2/(L+2tau) G`, the single-step
/// contraction toward `x*`, and the exact one-step expectation identity for `B = 1`.
pub fn contraction_checks(
    instance: &TheoryInstance,
    tau: f64,
    d: &DenoiserSpec,
    points: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<PropertyCheck>> {
    let p = instance.problem();
    let l = estimate_lipschitz(&p)?;
    let x_star = fixed_point_oracle(&p, d, tau)?;
    let c = l + 2.0 * tau;
    let gamma = 1.0 / c;
    let dim = p.volume_dim();
    let scale = x_star.norm() / (x_star.len() as f64).sqrt();
    let draw = |rng: &mut ChaCha20Rng| {
        let mut v = random_volume(dim, scale * rng.random_range(0.1..3.0), rng);
        v.axpy(1.0, &x_star);
        v
    };

    let mut nonexp = Vec::with_capacity(points);
    let mut contraction = Vec::with_capacity(points);
    for _ in 0..points {
        let x = draw(rng);
        let y = draw(rng);
        let gx = red_operator(&p, d, tau, &x)?;
        let gy = red_operator(&p, d, tau, &y)?;
        let mut tx = x.clone();
        tx.axpy(-2.0 / c, &gx);
        let mut ty = y.clone();
        ty.axpy(-2.0 / c, &gy);
        nonexp.push(x.sub(&y).norm() - tx.sub(&ty).norm());

        let e = x.sub(&x_star);
        let mut stepped = e.clone();
        stepped.axpy(-gamma, &gx);
        contraction.push(e.norm_sq() - (gamma / c) * gx.norm_sq() - stepped.norm_sq());
    }

    // Exhaustive B = 1 expectation over every index.
    let i_count = p.illuminations();
    let mut identity = Vec::new();
    let mut recursion = Vec::new();
    for _ in 0..points.min(50) {
        let x = draw(rng);
        let g = red_operator(&p, d, tau, &x)?;
        let prior = x.sub(&denoise_contrast(d, &x)?).scaled(tau);
        let e = x.sub(&x_star);
        let mut expected = 0.0;
        let mut variance = 0.0;
        for i in 0..i_count {
            let mut ghat = p.minibatch_gradient(&x, 1, &mut FixedSubset(vec![i]))?;
            ghat.axpy(1.0, &prior);
            let mut next = e.clone();
            next.axpy(-gamma, &ghat);
            expected += next.norm_sq() / i_count as f64;
            variance += g.sub(&ghat).norm_sq() / i_count as f64;
        }
        let mut det = e.clone();
        det.axpy(-gamma, &g);
        let predicted = det.norm_sq() + gamma * gamma * variance;
        identity.push(-(expected - predicted).abs() / expected.max(1.0));
        recursion.push(e.norm_sq() - (gamma / c) * g.norm_sq() + gamma * gamma * variance - expected);
    }

    Ok(vec![
        PropertyCheck::new("Id - 2/(L+2tau) G is nonexpansive", points, nonexp, 1e-9),
        PropertyCheck::new("single-step contraction toward x*", points, contraction, 1e-9),
        PropertyCheck::new("one-step expectation splits into bias and variance", identity.len(), identity, 1e-10),
        PropertyCheck::new("one-step expected distance recursion", recursion.len(), recursion, 1e-10),
    ])
}

/// Least-squares slope of `log(y)` against `log(x)`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Dense `(1/I) sum A_i^T A_i` for small problems, used by tests as an independent oracle.
pub fn dense_normal_matrix(p: &FidelityProblem) -> Result<DMatrix<f64>> {
    let (s, h, w) = p.volume_dim();
    let n = 2 * s * h * w;
    let mut m = DMatrix::zeros(n, n);
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let v = ContrastVolume::from_flat(s, h, w, &e)?;
        let out = p.normal_apply(&v)?.to_vec();
        m.set_column(col, &DVector::from_vec(out));
    }
    Ok(m)
}
