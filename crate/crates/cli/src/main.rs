//! `simba` command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 non-convergence.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use simba_core::denoise::{nonexpansiveness_probe, CnnWeights, Denoiser, DenoiserSpec, TvOptions};
use simba_core::fidelity::{FidelityProblem, FixedSubset, IndexSampler, UniformWithReplacement, WithoutReplacement};
use simba_core::forward::{synth_tf, tikhonov_reconstruct, Acquisition, SynthParams, TikhonovMethod, TikhonovOptions};
use simba_core::io;
use simba_core::metrics::{mean_align, snr, snr_fixed};
use simba_core::sim::{make_phantom, simulate_measurements, PhantomKind, PhantomParams};
use simba_core::solver::{run_with_sampler, GammaSchedule, IterRecord, SolverConfig, StepSize};
use simba_core::theory::{contraction_checks, operator_property_suite, run_convergence_suite, TheoryInstance, TheoryInstanceParams, TheorySuiteConfig};
use simba_core::Error;

const THREADS_ENV: &str = "SIMBA_THREADS";

#[derive(Parser, Debug)]
#[command(name = "simba", version, about = "Minibatch RED reconstruction for intensity diffraction tomography")]
struct Cli {
    /// File of `key = value` lines, one per long flag of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a phantom, its transfer functions and noisy measurements.
    Simulate(SimulateArgs),
    /// Reconstruct a volume from measurements.
    Reconstruct(ReconstructArgs),
    /// Run the convergence and operator-theory suites.
    Theory(TheoryArgs),
    /// Estimate the Lipschitz constant of a denoiser on random pairs.
    Probe(ProbeArgs),
    /// SNR of one or more volumes against a reference.
    Compare(CompareArgs),
    /// Render SNR curves from trace CSV files.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    slices: usize,
    #[arg(long, default_value_t = 60)]
    illuminations: usize,
    /// Omit for noiseless data.
    #[arg(long)]
    input_snr_db: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    slice_spacing_um: f64,
    /// Grayscale image used as the phase of every slice instead of random disks.
    #[arg(long)]
    phantom: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    max_contrast: f64,
    #[arg(long, default_value = "measurements.idtm")]
    measurements: PathBuf,
    #[arg(long, default_value = "tf.idtf")]
    tf: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Algo {
    Simba,
    GmRed,
    Tikhonov,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sampler {
    Uniform,
    WithoutReplacement,
    /// Every illumination once per iteration, in order.
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Schedule {
    Constant,
    InvSqrt,
}

impl From<Schedule> for GammaSchedule {
    fn from(s: Schedule) -> Self {
        match s {
            Schedule::Constant => GammaSchedule::Constant,
            Schedule::InvSqrt => GammaSchedule::InvSqrtHorizon,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct DenoiserArgs {
    /// identity, gaussian, tv or cnn:PATH.dnw
    #[arg(long, default_value = "gaussian")]
    denoiser: String,
    #[arg(long, default_value_t = 2)]
    gaussian_radius: usize,
    #[arg(long, default_value_t = 1.0)]
    gaussian_sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    tv_weight: f64,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long, default_value = "measurements.idtm")]
    measurements: PathBuf,
    #[arg(long, default_value = "tf.idtf")]
    tf: PathBuf,
    #[arg(long, value_enum, default_value_t = Algo::Simba)]
    algo: Algo,
    #[command(flatten)]
    denoiser: DenoiserArgs,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// `auto` for 1/(L + 2 tau), or a number.
    #[arg(long, default_value = "auto")]
    gamma: String,
    #[arg(long, value_enum, default_value_t = Schedule::Constant)]
    schedule: Schedule,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, value_enum, default_value_t = Sampler::Uniform)]
    sampler: Sampler,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    accelerated: bool,
    /// Also record the full ||G||^2 at every iterate.
    #[arg(long)]
    full_trace: bool,
    /// Reject step sizes above 1/(L + 2 tau).
    #[arg(long)]
    theory_mode: bool,
    /// Regularization weight for `--algo tikhonov`.
    #[arg(long, default_value_t = 1e-3)]
    tikhonov_weight: f64,
    #[arg(long, default_value = "trace.csv")]
    trace: PathBuf,
    #[arg(long, default_value = "reconstruction.idtv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    slices: usize,
    #[arg(long, default_value_t = 6)]
    illuminations: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
    batches: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = Schedule::Constant)]
    schedule: Schedule,
    #[arg(long, default_value_t = 20.0)]
    input_snr_db: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run the operator-property and single-step checks.
    #[arg(long)]
    operator_checks: bool,
    #[arg(long, default_value = "theory_report.csv")]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    denoiser: DenoiserArgs,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Reference volume (.idtv, or the ground truth inside an .idtm).
    reference: PathBuf,
    #[arg(required = true)]
    estimates: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Writes PREFIX_iter.png and PREFIX_seconds.png.
    #[arg(long, default_value = "snr")]
    prefix: String,
    #[arg(long, default_value_t = 640)]
    width: u32,
    #[arg(long, default_value_t = 400)]
    height: u32,
}

enum Failure {
    Usage(String),
    Data(String),
    NonConvergence(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_non_convergence() {
            Failure::NonConvergence(e.to_string())
        } else if matches!(e, Error::InvalidParameter(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match run(std::env::args().collect()) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            3
        }
        Err(Failure::NonConvergence(msg)) => {
            eprintln!("error: {msg}");
            4
        }
    };
    ExitCode::from(code)
}

fn run(argv: Vec<String>) -> CliResult {
    let argv = expand_config(argv)?;
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return Ok(());
            }
            return Err(Failure::Usage(e.render().to_string().trim_end().trim_start_matches("error: ").to_owned()));
        }
    };
    configure_threads()?;
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Theory(a) => theory(a),
        Command::Probe(a) => probe(a),
        Command::Compare(a) => compare(a),
        Command::Plot(a) => plot(a),
    }
}

/// Splices `--key value` pairs from the config file in front of the explicit flags,
/// so flags given on the command line win.
fn expand_config(argv: Vec<String>) -> CliResult<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let mut argv = argv;
    let path = if let Some(v) = argv[pos].strip_prefix("--config=") {
        let v = v.to_owned();
        argv.remove(pos);
        v
    } else {
        if pos + 1 >= argv.len() {
            return Err(Failure::Usage("--config needs a file path".into()));
        }
        let v = argv.remove(pos + 1);
        argv.remove(pos);
        v
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Data(format!("cannot read config {path}: {e}")))?;
    let entries = io::parse_config(&text)?;
    let Some(sub) = argv.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Err(Failure::Usage("a subcommand is required".into()));
    };
    let mut injected = Vec::new();
    for (k, v) in entries {
        let flag = format!("--{}", k.replace('_', "-"));
        let explicit = argv.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if explicit {
            continue;
        }
        match v.as_str() {
            "true" => injected.push(flag),
            "false" => {}
            _ => {
                injected.push(flag);
                injected.push(v);
            }
        }
    }
    argv.splice(sub + 1..sub + 1, injected);
    Ok(argv)
}

fn configure_threads() -> CliResult {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    if n == 0 {
        return Err(Failure::Usage(format!("{THREADS_ENV} must be positive")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Data(format!("thread pool: {e}")))
}

fn simulate(a: SimulateArgs) -> CliResult {
    let mut params = SynthParams::new(a.size, a.size, a.slices, a.illuminations);
    params.acquisition = Acquisition::simulation();
    params.slice_spacing_um = a.slice_spacing_um;
    params.seed = a.seed;
    let tf = synth_tf(&params)?;
    let kind = match &a.phantom {
        Some(path) => PhantomKind::Grayscale(io::load_grayscale(path)?),
        None => PhantomKind::Disks,
    };
    let phantom = PhantomParams {
        kind,
        max_contrast: a.max_contrast,
        ..PhantomParams::disks(a.size, a.size, a.slices, a.seed)
    };
    let x = make_phantom(&phantom)?;
    let m = simulate_measurements(&x, &tf, a.input_snr_db, a.seed)?;
    io::write_transfer_functions(&a.tf, &tf)?;
    io::write_measurements(&a.measurements, &m)?;
    println!(
        "wrote {} measurements of {}x{} to {} and transfer functions to {}",
        m.len(),
        a.size,
        a.size,
        a.measurements.display(),
        a.tf.display()
    );
    Ok(())
}

fn build_denoiser(a: &DenoiserArgs) -> CliResult<DenoiserSpec> {
    let spec = match a.denoiser.as_str() {
        "identity" => DenoiserSpec::identity(),
        "gaussian" => DenoiserSpec::gaussian(a.gaussian_radius, a.gaussian_sigma)?,
        "tv" => DenoiserSpec::total_variation(TvOptions::new(a.tv_weight))?,
        other => match other.strip_prefix("cnn:") {
            Some(path) => {
                let w: CnnWeights = io::read_weights(Path::new(path))?;
                DenoiserSpec::cnn(w)?
            }
            None => {
                return Err(Failure::Usage(format!(
                    "unknown denoiser {other:?} for --denoiser (expected identity, gaussian, tv or cnn:PATH)"
                )))
            }
        },
    };
    Ok(spec)
}

fn reconstruct(a: ReconstructArgs) -> CliResult {
    let gamma = match a.gamma.as_str() {
        "auto" => StepSize::Auto,
        v => StepSize::Fixed(
            v.parse()
                .map_err(|_| Failure::Usage(format!("invalid value {v:?} for --gamma (expected auto or a number)")))?,
        ),
    };
    let denoiser = build_denoiser(&a.denoiser)?;
    let tf = io::read_transfer_functions(&a.tf)?;
    let m = io::read_measurements(&a.measurements)?;
    let p = FidelityProblem::new(&tf, &m)?;

    if let Algo::Tikhonov = a.algo {
        let opts = TikhonovOptions {
            method: if tf.frequency_diagonal && tf.convention == Default::default() {
                TikhonovMethod::PerFrequency
            } else {
                TikhonovMethod::ConjugateGradient
            },
            ..Default::default()
        };
        let r = tikhonov_reconstruct(&m, &tf, a.tikhonov_weight, &opts)?;
        report_final(&r.volume, &m);
        io::write_volume(&a.out, &r.volume)?;
        return Ok(());
    }

    let illuminations = p.illuminations();
    let mut cfg = SolverConfig::new(a.tau, a.batch as usize, a.iters);
    cfg.denoiser = Arc::new(denoiser);
    cfg.gamma = gamma;
    cfg.schedule = a.schedule.into();
    cfg.seed = a.seed;
    cfg.accelerated = a.accelerated;
    cfg.trace_full_gradient = a.full_trace;
    cfg.theory_mode = a.theory_mode;
    let mut sampler: Box<dyn IndexSampler> = match (a.algo, a.sampler) {
        (Algo::GmRed, _) | (_, Sampler::Full) => {
            cfg.batch = illuminations;
            Box::new(FixedSubset::full(illuminations))
        }
        (_, Sampler::Uniform) => Box::new(UniformWithReplacement::new(a.seed)),
        (_, Sampler::WithoutReplacement) => Box::new(WithoutReplacement::new(a.seed)),
    };
    info!("{cfg:?} with {}", sampler.describe());

    let file = File::create(&a.trace).map_err(|e| Failure::Data(format!("cannot create {}: {e}", a.trace.display())))?;
    let mut trace = io::TraceWriter::new(BufWriter::new(file))?;
    let out = run_with_sampler(&p, &cfg, sampler.as_mut(), None, &mut |r: &IterRecord| trace.write(r))?;
    trace.into_inner()?;
    println!("gamma = {:.6e}", out.gamma);
    report_final(&out.x, &m);
    io::write_volume(&a.out, &out.x)?;
    Ok(())
}

fn report_final(x: &simba_core::forward::ContrastVolume, m: &simba_core::forward::MeasurementSet) {
    if let Some(t) = &m.ground_truth {
        if let Ok(db) = snr(&x.re, &t.re) {
            println!("final SNR = {db:.3} dB");
        }
    }
}

fn theory(a: TheoryArgs) -> CliResult {
    let mut params = TheoryInstanceParams::new(a.size, a.size, a.slices, a.illuminations);
    params.input_snr_db = Some(a.input_snr_db);
    params.seed = a.seed;
    let instance = TheoryInstance::new(&params)?;
    let mut cfg = TheorySuiteConfig::new(a.batches, a.seeds, a.iters);
    cfg.tau = a.tau;
    cfg.schedule = a.schedule.into();
    let report = run_convergence_suite(&instance, &cfg)?;
    io::write_atomic(&a.report, &io::theory_report_csv(&report)?)?;
    let summary = io::theory_report_summary(&report);
    io::write_atomic(&a.report.with_extension("txt"), summary.as_bytes())?;
    print!("{summary}");
    if a.operator_checks {
        let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
        let mut checks = operator_property_suite(&mut rng, (16, 16), 500);
        let d = DenoiserSpec::gaussian(cfg.kernel_radius, cfg.kernel_sigma)?;
        checks.extend(contraction_checks(&instance, cfg.tau, &d, 500, &mut rng)?);
        for c in checks {
            println!(
                "{} {} ({} trials, worst margin {:.3e})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.trials,
                c.worst_margin
            );
        }
    }
    Ok(())
}

fn probe(a: ProbeArgs) -> CliResult {
    let d = build_denoiser(&a.denoiser)?;
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let r = nonexpansiveness_probe(&d, (1, a.size, a.size), a.pairs, &mut rng)?;
    println!(
        "{}: max ||D(x)-D(y)||/||x-y|| = {:.9} over {} pairs (pair {}); certified nonexpansive: {}",
        d.describe(),
        r.max_ratio,
        a.pairs,
        r.argmax_pair,
        d.certified_nonexpansive()
    );
    Ok(())
}

fn compare(a: CompareArgs) -> CliResult {
    let reference = io::read_volume(&a.reference)?;
    println!("{:<40} {:>14} {:>20}", "estimate", "snr_db", "snr_mean_aligned_db");
    for path in &a.estimates {
        let x = io::read_volume(path)?;
        let fitted = snr(&x.re, &reference.re)?;
        let aligned = snr_fixed(&mean_align(&x.re, &reference.re), &reference.re)?;
        println!("{:<40} {:>14.3} {:>20.3}", path.display(), fitted, aligned);
    }
    Ok(())
}

fn plot(a: PlotArgs) -> CliResult {
    let mut by_iter = Vec::new();
    let mut by_time = Vec::new();
    for path in &a.traces {
        let rows = io::read_trace(path)?;
        by_iter.push(rows.iter().map(|r| (r.iter as f64, r.snr_db.unwrap_or(f64::NAN))).collect());
        by_time.push(rows.iter().map(|r| (r.wall_seconds, r.snr_db.unwrap_or(f64::NAN))).collect());
    }
    let iter_path = PathBuf::from(format!("{}_iter.png", a.prefix));
    let time_path = PathBuf::from(format!("{}_seconds.png", a.prefix));
    io::plot_lines(&iter_path, &by_iter, a.width, a.height).map_err(|e| match e {
        Error::InvalidParameter(_) => Failure::Data("traces hold no SNR values to plot".into()),
        other => other.into(),
    })?;
    io::plot_lines(&time_path, &by_time, a.width, a.height)?;
    println!("wrote {} and {}", iter_path.display(), time_path.display());
    Ok(())
}
