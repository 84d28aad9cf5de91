//! `convprior` command-line driver.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! computation fails numerically.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use convprior::decoder::{decoder_fit, DecoderConfig, DecoderState, Variant};
use convprior::experiment::{
    halving_iterations, kernel_label, run, Experiment, ExperimentConfig, ExperimentResult, SpectralReportConfig,
    SCHEMA_VERSION,
};
use convprior::jacobian::{concentration_gap, initial_output_check, sigma_closed_form, sigma_eigensystem, svd_track, DEFAULT_DELTA};
use convprior::spectral::dual_kernel;
use convprior::{CirculantOperator, GdConfig, GeneratorConfig, GeneratorState, Kernel, KernelPreset, StoppingRule, TrigBasis};

#[derive(Parser, Debug)]
#[command(name = "convprior", version, about = "Spectral bias of untrained convolutional generators")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-frequency weights of a filter.
    DualKernel(KernelArgs),
    /// Early-stopped denoising benchmark (needs --config).
    Denoise,
    /// Iterations to halve the residual coefficient of single trig targets.
    Dynamics(DynamicsArgs),
    /// Expected Jacobian Gram spectrum and concentration at one draw.
    Jacobian(JacobianArgs),
    /// Fit a 1-D deep decoder to a step function.
    Decoder(DecoderArgs),
    /// Structured-vs-noise fitting speed (needs --config).
    FitCurves,
    /// Dual kernels and Gram eigenvalues for a list of kernels.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KernelKind {
    Delta,
    Triangular,
    Gaussian,
}

#[derive(Args, Debug, Clone)]
struct KernelArgs {
    #[arg(long, value_enum, default_value_t = KernelKind::Triangular)]
    kernel: KernelKind,
    /// Width of the triangular kernel (odd).
    #[arg(long, default_value_t = 3)]
    width: usize,
    /// Standard deviation of the Gaussian kernel.
    #[arg(long, default_value_t = 2.0)]
    std: f64,
    /// Signal length.
    #[arg(long, default_value_t = 256)]
    n: usize,
}

impl KernelArgs {
    fn preset(&self) -> KernelPreset {
        match self.kernel {
            KernelKind::Delta => KernelPreset::Delta,
            KernelKind::Triangular => KernelPreset::Triangular { width: self.width },
            KernelKind::Gaussian => KernelPreset::Gaussian { std: self.std },
        }
    }
}

#[derive(Args, Debug)]
struct DynamicsArgs {
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long, default_value_t = 1024)]
    k: usize,
    /// Step size; `1/beta^2` when absent.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    omega: f64,
    /// Comma-separated trig indices.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 8, 20, 32])]
    indices: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
}

#[derive(Args, Debug)]
struct JacobianArgs {
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long, default_value_t = 256)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Draws for the initial-output check.
    #[arg(long, default_value_t = 50)]
    trials: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    BilinearUpsample,
    FixedKernelNoUpsample,
    LearnedConv,
    LearnedDeconv,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::BilinearUpsample => Variant::BilinearUpsample,
            VariantArg::FixedKernelNoUpsample => Variant::FixedKernelNoUpsample,
            VariantArg::LearnedConv => Variant::LearnedConv,
            VariantArg::LearnedDeconv => Variant::LearnedDeconv,
        }
    }
}

#[derive(Args, Debug)]
struct DecoderArgs {
    #[arg(long, value_enum, default_value_t = VariantArg::FixedKernelNoUpsample)]
    variant: VariantArg,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    filter_width: usize,
    #[arg(long, default_value_t = 1e-3)]
    eta: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Also write the top singular vectors' trig matches at the start and end (needs --out).
    #[arg(long)]
    top_s: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, default_value_t = 256)]
    n: usize,
}

/// Delta, hats of width 3, 15 and 63 (those narrower than `n`) and two Gaussians.
fn default_report_kernels(n: usize) -> Vec<KernelPreset> {
    let mut kernels = vec![KernelPreset::Delta];
    kernels.extend(
        [3, 15, 63]
            .into_iter()
            .filter(|&w| w < n)
            .map(|width| KernelPreset::Triangular { width }),
    );
    kernels.extend([KernelPreset::Gaussian { std: 2.0 }, KernelPreset::Gaussian { std: 8.0 }]);
    kernels
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl From<convprior::Error> for Failure {
    fn from(e: convprior::Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

struct Output<'a> {
    dir: Option<&'a Path>,
}

impl Output<'_> {
    fn write(&self, name: &str, contents: &str) -> Result<(), Failure> {
        if let Some(dir) = self.dir {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let path = dir.join(name);
            fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let out = Output { dir: cli.out.as_deref() };
    let seed = cli.seed.unwrap_or(0);
    let needs_config = matches!(cli.command, Command::Denoise | Command::FitCurves);
    if cli.config.is_some() && !needs_config && !matches!(cli.command, Command::Report(_)) {
        return Err(Failure::Config("--config is only used by denoise, fit-curves and report".into()));
    }
    let text = match (&cli.command, &cli.format) {
        (Command::DualKernel(args), fmt) => {
            let dual = dual_kernel(&Kernel::from_preset(&args.preset(), args.n)?)?;
            let text = match fmt {
                Format::Csv => dual.to_csv(),
                Format::Json => json(&serde_json::json!({
                    "kernel": args.preset(),
                    "n": args.n,
                    "sigma": dual.sigma(),
                    "symmetric_kernel": dual.symmetric_kernel(),
                })),
            };
            out.write(&format!("dual_kernel.{}", ext(*fmt)), &text)?;
            text
        }
        (Command::Denoise | Command::FitCurves, fmt) => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Failure::Config("this subcommand needs --config <path>".into()))?;
            let mut cfg = load_config(path, cli.seed)?;
            let wanted = matches!(cli.command, Command::Denoise);
            let kind_ok = match cfg.experiment {
                Experiment::Denoise(_) => wanted,
                Experiment::FitCurves(_) => !wanted,
                Experiment::SpectralReport(_) => false,
            };
            if !kind_ok {
                return Err(Failure::Config("configuration describes a different experiment".into()));
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let result = run(&cfg)?;
            emit_experiment(&out, &result, *fmt)?
        }
        (Command::Report(args), fmt) => {
            let cfg = match &cli.config {
                Some(path) => load_config(path, cli.seed)?,
                None => ExperimentConfig {
                    schema_version: SCHEMA_VERSION,
                    seed,
                    repetitions: 1,
                    experiment: Experiment::SpectralReport(SpectralReportConfig {
                        n: args.n,
                        kernels: default_report_kernels(args.n),
                        low_count: None,
                    }),
                },
            };
            if !matches!(cfg.experiment, Experiment::SpectralReport(_)) {
                return Err(Failure::Config("configuration describes a different experiment".into()));
            }
            let result = run(&cfg)?;
            emit_experiment(&out, &result, *fmt)?
        }
        (Command::Dynamics(args), fmt) => {
            let preset = args.kernel.preset();
            let op = CirculantOperator::new(Kernel::from_preset(&preset, args.kernel.n)?);
            let beta = op.operator_norm();
            let eta = args.eta.unwrap_or(1.0 / (beta * beta));
            let pts = halving_iterations(&preset, args.kernel.n, args.k, args.omega, eta, &args.indices, args.max_iters, seed)?;
            let text = match fmt {
                Format::Csv => {
                    let mut s = String::from("index,sigma,halving_iters,linear_prediction\n");
                    for p in &pts {
                        let pred = (0.5f64).ln() / (-eta * p.sigma * p.sigma).ln_1p();
                        let iters = p.iters.map(|v| v.to_string()).unwrap_or_default();
                        let _ = writeln!(s, "{},{:.17e},{},{:.17e}", p.index, p.sigma, iters, pred);
                    }
                    s
                }
                Format::Json => json(&serde_json::json!({ "eta": eta, "points": pts })),
            };
            out.write(&format!("dynamics.{}", ext(*fmt)), &text)?;
            text
        }
        (Command::Jacobian(args), fmt) => {
            let preset = args.kernel.preset();
            let kernel = Kernel::from_preset(&preset, args.kernel.n)?;
            let op = CirculantOperator::new(kernel.clone());
            let sigma = sigma_closed_form(&op)?;
            let eig = sigma_eigensystem(&sigma)?;
            let basis = TrigBasis::new(args.kernel.n)?;
            let gcfg = GeneratorConfig {
                k: args.k,
                kernel,
                omega: 1.0,
                seed,
            };
            let state = GeneratorState::init(&gcfg)?;
            let gap = concentration_gap(&state, args.delta)?;
            let frac = initial_output_check(&gcfg, args.trials, args.delta)?;
            out.write("sigma_matrix.csv", &sigma.to_csv())?;
            let text = match fmt {
                Format::Csv => {
                    let mut s = String::from("rank,trig_index,frequency,eigenvalue\n");
                    for (r, v) in eig.values.iter().enumerate() {
                        let idx = eig.trig_index.as_ref().map(|t| t[r]);
                        let (i, f) = match idx {
                            Some(i) => (i.to_string(), basis.frequency(i).to_string()),
                            None => (String::new(), String::new()),
                        };
                        let _ = writeln!(s, "{},{},{},{:.17e}", r + 1, i, f, v);
                    }
                    s
                }
                Format::Json => json(&serde_json::json!({
                    "kernel": preset,
                    "eigenvalues": eig.values,
                    "trig_index": eig.trig_index,
                    "concentration_gap": gap.gap,
                    "concentration_bound": gap.bound,
                    "initial_output_fraction": frac,
                })),
            };
            out.write(&format!("jacobian.{}", ext(*fmt)), &text)?;
            text
        }
        (Command::Decoder(args), fmt) => {
            let mut cfg = DecoderConfig::new(args.d, args.k, args.n, args.variant.into(), seed);
            cfg.filter_width = args.filter_width;
            let state = DecoderState::init(&cfg)?;
            let y: Vec<f64> = (0..args.n).map(|t| if t < args.n / 2 { -1.0 } else { 1.0 }).collect();
            let gd = GdConfig {
                eta: args.eta,
                max_iters: args.iters,
                record_spectrum: false,
            };
            let fitted = decoder_fit(&state, &y, &gd, &StoppingRule::Fixed(args.iters), None)?;
            if let Some(top) = args.top_s {
                if cli.out.is_none() {
                    return Err(Failure::Config("--top-s needs --out".into()));
                }
                let track = svd_track(&[(0, &state), (args.iters, &fitted.state)], top)?;
                for t in &track {
                    out.write(&format!("spectrum_iter_{}.csv", t.iter), &t.to_csv())?;
                }
            }
            let text = match fmt {
                Format::Csv => fitted.trace.to_csv(),
                Format::Json => {
                    let losses: Vec<f64> = fitted.trace.records.iter().map(|r| r.loss).collect();
                    json(&serde_json::json!({
                        "config": cfg,
                        "num_params": cfg.num_params(),
                        "loss": losses,
                        "final_layer_drift": fitted.trace.last().and_then(|r| r.layer_drift.clone()),
                    }))
                }
            };
            out.write(&format!("decoder_trace.{}", ext(*fmt)), &text)?;
            text
        }
    };
    print!("{text}");
    Ok(())
}

fn ext(f: Format) -> &'static str {
    match f {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

fn json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Writes the resolved config, per-seed table, summary and traces; returns stdout text.
fn emit_experiment(out: &Output, result: &ExperimentResult, fmt: Format) -> Result<String, Failure> {
    out.write("config.json", &(result.config.to_json() + "\n"))?;
    out.write("result.json", &(result.to_json(true) + "\n"))?;
    let table = result.per_seed_csv();
    out.write("per_seed.csv", &table)?;
    for (label, trace) in &result.traces {
        out.write(&format!("trace_{label}.csv"), &trace.to_csv())?;
    }
    if let convprior::experiment::PerSeed::SpectralReport(rows) = &result.per_seed {
        let mut s = String::from("kernel,low_frequency_mass\n");
        for r in rows {
            let _ = writeln!(s, "{},{:.17e}", kernel_label(&r.kernel), r.low_frequency_mass);
        }
        out.write("low_frequency_mass.csv", &s)?;
    }
    Ok(match fmt {
        Format::Csv => table,
        Format::Json => result.to_json(true) + "\n",
    })
}
