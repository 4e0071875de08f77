//! RED iterations: batch gradient (GM-RED), online minibatch (SIMBA) and their
//! Nesterov-accelerated variants.
//!
//! Every run evaluates the RED operator `G(x) = grad g(x) + tau (x - D(x))`, or its
//! minibatch estimate, and steps `x <- x - gamma * G(x)`.

use std::sync::Arc;
use std::time::Instant;

use log::warn;

use crate::denoise::{denoise_contrast, Denoiser, DenoiserSpec};
use crate::error::{Error, Result};
use crate::fidelity::{estimate_lipschitz, FidelityProblem, FixedSubset, IndexSampler, UniformWithReplacement};
use crate::forward::ContrastVolume;
use crate::metrics::snr;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSize {
    /// `1 / (L + 2 tau)`
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GammaSchedule {
    #[default]
    Constant,
    /// Constant step divided by `sqrt(max_iter)`, fixed for the whole run.
    InvSqrtHorizon,
}

#[derive(Clone)]
pub struct SolverConfig {
    pub tau: f64,
    pub gamma: StepSize,
    pub schedule: GammaSchedule,
    pub batch: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub accelerated: bool,
    pub denoiser: Arc<dyn Denoiser>,
    /// Also evaluate the full `||G||^2` at every iterate (one full gradient per step).
    pub trace_full_gradient: bool,
    /// Turns step-size violations into errors instead of warnings.
    pub theory_mode: bool,
    /// Runs stop with [`Error::Diverged`] once `||x||` exceeds this.
    pub divergence_threshold: f64,
    /// Known Lipschitz constant; estimated when `None` and needed.
    pub lipschitz: Option<f64>,
}

impl std::fmt::Debug for SolverConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SolverConfig")
            .field("tau", &self.tau)
            .field("gamma", &self.gamma)
            .field("schedule", &self.schedule)
            .field("batch", &self.batch)
            .field("max_iter", &self.max_iter)
            .field("seed", &self.seed)
            .field("accelerated", &self.accelerated)
            .field("denoiser", &self.denoiser.describe())
            .field("trace_full_gradient", &self.trace_full_gradient)
            .field("theory_mode", &self.theory_mode)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl SolverConfig {
    pub fn new(tau: f64, batch: usize, max_iter: usize) -> Self {
        Self {
            tau,
            gamma: StepSize::Auto,
            schedule: GammaSchedule::Constant,
            batch,
            max_iter,
            seed: 0,
            accelerated: false,
            denoiser: Arc::new(DenoiserSpec::identity()),
            trace_full_gradient: false,
            theory_mode: false,
            divergence_threshold: 1e6,
            lipschitz: None,
        }
    }

    pub fn with_denoiser(mut self, d: impl Denoiser + 'static) -> Self {
        self.denoiser = Arc::new(d);
        self
    }
}

/// Diagnostics for iteration `iter` (1-based), describing the step from `x^{iter-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// `||G_hat(x^{k-1})||^2`
    pub ghat_sq_norm: f64,
    /// `||G(x^{k-1})||^2` when full tracing is on.
    pub g_sq_norm: Option<f64>,
    /// Minibatch estimate of `g(x^{k-1})`.
    pub fidelity: f64,
    /// SNR of the phase part of `x^k` against the ground truth.
    pub snr_db: Option<f64>,
    pub wall_seconds: f64,
    pub batch_indices: Vec<usize>,
    /// 2D FFTs spent on this iteration's data term (excluding tracing).
    pub fft_calls: usize,
    /// Operator and measurement bytes touched by this iteration's minibatch.
    pub bytes_touched: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterateTrace {
    pub records: Vec<IterRecord>,
}

impl IterateTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Running averages `(1/t) sum_{k<=t} ||G(x^{k-1})||^2`, if full tracing was on.
    pub fn running_average_g(&self) -> Option<Vec<f64>> {
        let mut sum = 0.0;
        self.records
            .iter()
            .enumerate()
            .map(|(k, r)| {
                sum += r.g_sq_norm?;
                Some(sum / (k + 1) as f64)
            })
            .collect()
    }

    pub fn final_snr(&self) -> Option<f64> {
        self.records.last()?.snr_db
    }
}

#[derive(Clone, Debug)]
pub struct SolverOutput {
    pub x: ContrastVolume,
    pub trace: IterateTrace,
    /// Step size actually used.
    pub gamma: f64,
    pub lipschitz: Option<f64>,
}

/// `G(x) = grad g(x) + tau (x - D(x))`, with `D` applied to both parts slice-wise.
pub fn red_operator(p: &FidelityProblem, d: &dyn Denoiser, tau: f64, x: &ContrastVolume) -> Result<ContrastVolume> {
    let mut g = p.full_gradient(x)?;
    if tau != 0.0 {
        let dx = denoise_contrast(d, x)?;
        g.axpy(tau, &x.sub(&dx));
    }
    Ok(g)
}

/// Momentum sequence `q_k = (1 + sqrt(1 + 4 q_{k-1}^2)) / 2`, `q_0 = 1`.
pub fn momentum_q(k: usize) -> f64 {
    (0..k).fold(1.0, |q, _| (1.0 + (1.0 + 4.0 * q * q).sqrt()) / 2.0)
}

/// Step size `config` resolves to, together with the Lipschitz value used (if any).
pub fn resolve_step(p: &FidelityProblem, config: &SolverConfig) -> Result<(f64, Option<f64>)> {
    if !(config.tau.is_finite() && config.tau >= 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be non-negative, got {}", config.tau)));
    }
    let needs_l = matches!(config.gamma, StepSize::Auto) || config.theory_mode;
    let lipschitz = match (config.lipschitz, needs_l) {
        (Some(l), _) => Some(l),
        (None, true) => Some(estimate_lipschitz(p)?),
        (None, false) => None,
    };
    let base = match config.gamma {
        StepSize::Auto => 1.0 / (lipschitz.expect("estimated above") + 2.0 * config.tau),
        StepSize::Fixed(g) => {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::InvalidParameter(format!("step size must be positive, got {g}")));
            }
            g
        }
    };
    if let Some(l) = lipschitz {
        let limit = 1.0 / (l + 2.0 * config.tau);
        if base > limit * (1.0 + 1e-12) {
            if config.theory_mode {
                return Err(Error::InvalidParameter(format!(
                    "step size {base} exceeds 1/(L+2tau) = {limit}"
                )));
            }
            warn!("step size {base} exceeds 1/(L+2tau) = {limit}; convergence is not guaranteed");
        }
    }
    let gamma = match config.schedule {
        GammaSchedule::Constant => base,
        GammaSchedule::InvSqrtHorizon => base / (config.max_iter.max(1) as f64).sqrt(),
    };
    Ok((gamma, lipschitz))
}

/// Runs the iteration with an explicit index source. `observer` sees every record as it
/// is produced, so long runs can be streamed.
pub fn run_with_sampler(
    p: &FidelityProblem,
    config: &SolverConfig,
    sampler: &mut dyn IndexSampler,
    x0: Option<&ContrastVolume>,
    observer: &mut dyn FnMut(&IterRecord) -> Result<()>,
) -> Result<SolverOutput> {
    if config.batch == 0 {
        return Err(Error::InvalidParameter("minibatch size must be at least 1".into()));
    }
    if config.batch > p.illuminations() {
        warn!(
            "minibatch size {} exceeds the {} illuminations (indices are drawn with replacement)",
            config.batch,
            p.illuminations()
        );
    }
    let (gamma, lipschitz) = resolve_step(p, config)?;
    let mut x = match x0 {
        Some(v) => {
            p.tf().check_volume(v)?;
            v.clone()
        }
        None => p.zero_volume(),
    };
    // SNR is undefined against an all-zero phase, so such truths are not scored.
    let truth = p.measurements().ground_truth.as_ref().filter(|t| t.re.norm_sq() > 0.0);
    let start = Instant::now();
    let mut trace = IterateTrace::default();
    // Extrapolated point for the accelerated variant; equals x otherwise.
    let mut s = x.clone();
    let mut q_prev = 1.0_f64;
    for k in 1..=config.max_iter {
        let point = if config.accelerated { &s } else { &x };
        let indices = sampler.draw(p.illuminations(), config.batch)?;
        let eval = p.evaluate(point, &indices)?;
        let denoised = denoise_contrast(config.denoiser.as_ref(), point)?;
        let prior = point.sub(&denoised);
        let mut ghat = eval.gradient;
        ghat.axpy(config.tau, &prior);
        let g_sq_norm = if config.trace_full_gradient {
            let mut g = p.full_gradient(point)?;
            g.axpy(config.tau, &prior);
            Some(g.norm_sq())
        } else {
            None
        };
        let mut next = point.clone();
        next.axpy(-gamma, &ghat);
        let norm = next.norm();
        if !norm.is_finite() || norm > config.divergence_threshold {
            return Err(Error::Diverged { iteration: k });
        }
        if config.accelerated {
            let q = (1.0 + (1.0 + 4.0 * q_prev * q_prev).sqrt()) / 2.0;
            let mut extrapolated = next.clone();
            extrapolated.axpy((q_prev - 1.0) / q, &next.sub(&x));
            s = extrapolated;
            q_prev = q;
        }
        x = next;
        let snr_db = match truth {
            Some(t) => Some(snr(&x.re, &t.re)?),
            None => None,
        };
        let record = IterRecord {
            iter: k,
            ghat_sq_norm: ghat.norm_sq(),
            g_sq_norm,
            fidelity: eval.loss,
            snr_db,
            wall_seconds: start.elapsed().as_secs_f64(),
            bytes_touched: p.bytes_touched(&indices),
            batch_indices: indices,
            fft_calls: eval.fft_calls,
        };
        observer(&record)?;
        trace.records.push(record);
    }
    Ok(SolverOutput {
        x,
        trace,
        gamma,
        lipschitz,
    })
}

fn ignore(_: &IterRecord) -> Result<()> {
    Ok(())
}

/// Full-gradient RED; `config.batch` is ignored.
pub fn gm_red_run(p: &FidelityProblem, config: &SolverConfig) -> Result<SolverOutput> {
    let mut cfg = config.clone();
    cfg.batch = p.illuminations();
    run_with_sampler(p, &cfg, &mut FixedSubset::full(p.illuminations()), None, &mut ignore)
}

/// Online minibatch RED with i.i.d. uniform indices seeded by `config.seed`.
pub fn simba_run(p: &FidelityProblem, config: &SolverConfig) -> Result<SolverOutput> {
    run_with_sampler(p, config, &mut UniformWithReplacement::new(config.seed), None, &mut ignore)
}

/// [`simba_run`] with Nesterov momentum.
pub fn accelerated_run(p: &FidelityProblem, config: &SolverConfig) -> Result<SolverOutput> {
    let mut cfg = config.clone();
    cfg.accelerated = true;
    simba_run(p, &cfg)
}
