use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};

use cista_core::bench::{bench, bench_solver_options};
use cista_core::csc::{code_evidence, save_codes, solve, SolverOptions, StepSize};
use cista_core::dataset::{generate_dataset, read_dataset, GenerateOptions};
use cista_core::eval::{
    detect_depths, evaluate_lightfields, DepthEstimator, DepthReadoutOptions, EvalReport,
    LightFieldEvalOptions, PeakThreshold, EVAL_CSV_HEADER,
};
use cista_core::net::{
    infer, init_params, load_model, save_model, train, AdamConfig, Architecture, BiasSign,
    TrainHyper,
};
use cista_core::selftest;
use cista_core::synth::{build_dictionary, EpiDictionary, OpticsConfig};
use cista_core::{Error, Matrix2};

#[derive(Parser, Debug)]
#[command(name = "cista", version, about = "Depth localisation from light-field EPIs")]
struct Cli {
    /// key=value file whose keys mirror long flags; command-line flags win
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for every stochastic step
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Run all per-sample work on the calling thread
    #[arg(long, global = true)]
    single_thread: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a labelled EPI dataset
    GenData(GenDataArgs),
    /// Build the depth dictionary of unit-norm EPI atoms
    BuildDict(BuildDictArgs),
    /// Solve the sparse coding problem for one dataset EPI
    Solve(SolveArgs),
    /// Train a network on a dataset
    Train(TrainArgs),
    /// Print depths (one per line) for one dataset EPI
    Infer(InferArgs),
    /// Localise sources in rendered light fields and report RMSE
    Eval(EvalArgs),
    /// Time CSC solving against network inference
    Bench(BenchArgs),
    /// Run the adjoint, gradient and ISTA-descent self checks
    Selftest,
}

#[derive(Args, Debug, Clone)]
struct OpticsArgs {
    #[arg(long, default_value_t = 19)]
    theta_u: usize,
    #[arg(long, default_value_t = 19)]
    theta_v: usize,
    #[arg(long, default_value_t = 63)]
    n_x: usize,
    #[arg(long, default_value_t = 63)]
    n_y: usize,
    /// Spatial shift in pixels per angular step per micrometre
    #[arg(long, default_value_t = 0.025, allow_negative_numbers = true)]
    kappa: f64,
    #[arg(long, default_value_t = 1.0)]
    psf_sigma: f64,
    #[arg(long, default_value_t = -18.0, allow_negative_numbers = true)]
    depth_min: f64,
    #[arg(long, default_value_t = 36.0, allow_negative_numbers = true)]
    depth_max: f64,
    #[arg(long, default_value_t = 55)]
    depth_count: usize,
}

impl OpticsArgs {
    fn config(&self) -> OpticsConfig {
        OpticsConfig {
            theta_u: self.theta_u,
            theta_v: self.theta_v,
            n_x: self.n_x,
            n_y: self.n_y,
            kappa: self.kappa,
            psf_sigma: self.psf_sigma,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
            depth_count: self.depth_count,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct SampleArgs {
    #[arg(long, default_value_t = 1)]
    sources_min: usize,
    #[arg(long, default_value_t = 2)]
    sources_max: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    /// Soft-label width in grid steps
    #[arg(long, default_value_t = 1.5)]
    sigma_label: f64,
    #[arg(long, default_value_t = 0.8)]
    amplitude_min: f64,
    #[arg(long, default_value_t = 1.2)]
    amplitude_max: f64,
}

impl SampleArgs {
    fn options(&self, count: usize, seed: u64) -> GenerateOptions {
        GenerateOptions {
            count,
            sources_min: self.sources_min,
            sources_max: self.sources_max,
            noise_sigma: self.noise_sigma,
            sigma_label: self.sigma_label,
            amplitude_min: self.amplitude_min,
            amplitude_max: self.amplitude_max,
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    optics: OpticsArgs,
    #[command(flatten)]
    samples: SampleArgs,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildDictArgs {
    #[command(flatten)]
    optics: OpticsArgs,
    #[arg(long, default_value_t = 19)]
    atom_theta: usize,
    #[arg(long, default_value_t = 31)]
    atom_n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    rel_tol: f64,
    /// Fixed step size; estimated from the dictionary when omitted
    #[arg(long)]
    gamma: Option<f64>,
}

impl SolverArgs {
    fn options(&self, seed: u64) -> SolverOptions {
        SolverOptions {
            lambda: self.lambda,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            step: self.gamma.map_or(StepSize::Auto, StepSize::Fixed),
            power_seed: seed,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ReadoutArgs {
    /// Peak threshold; absolute for network probabilities, a fraction of the
    /// maximum for CSC evidence. Defaults: 0.5 and 0.1.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 3)]
    min_separation: usize,
    #[arg(long, default_value_t = 1)]
    centroid_radius: usize,
}

impl ReadoutArgs {
    fn network(&self) -> DepthReadoutOptions {
        DepthReadoutOptions {
            threshold: PeakThreshold::Absolute(self.threshold.unwrap_or(0.5)),
            min_separation: self.min_separation,
            centroid_radius: self.centroid_radius,
        }
    }

    fn csc(&self) -> DepthReadoutOptions {
        DepthReadoutOptions {
            threshold: PeakThreshold::Relative(self.threshold.unwrap_or(0.1)),
            min_separation: self.min_separation,
            centroid_radius: self.centroid_radius,
        }
    }
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    dict: PathBuf,
    /// Dataset file holding the EPI
    #[arg(long)]
    epi: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    readout: ReadoutArgs,
    /// Write the codes here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated odd kernel sizes, one per layer
    #[arg(long, default_value = "3,5,7,9,11,13")]
    kernel_sizes: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// "-" subtracts the layer bias, "+" adds it
    #[arg(long, default_value = "-", allow_hyphen_values = true)]
    bias_sign: String,
    /// Initialise input filters from this dictionary
    #[arg(long)]
    init_dict: Option<PathBuf>,
    /// Per-epoch losses as CSV; printed to stdout when omitted
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset file holding the EPI
    #[arg(long)]
    epi: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    readout: ReadoutArgs,
    /// Print the full probability vector instead of depths
    #[arg(long)]
    probs: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dict: Option<PathBuf>,
    #[command(flatten)]
    optics: OpticsArgs,
    #[command(flatten)]
    samples: SampleArgs,
    /// Number of held-out light fields
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    readout: ReadoutArgs,
    /// Lateral detection threshold as a fraction of the central-view maximum
    #[arg(long, default_value_t = 0.5)]
    lateral_threshold: f64,
    #[arg(long, default_value_t = 3)]
    lateral_min_separation: usize,
    /// Depth matching gate in micrometres
    #[arg(long, default_value_t = 3.0)]
    gate: f64,
    /// Per-source CSV; printed to stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Use at most this many EPIs from the dataset
    #[arg(long, default_value_t = 50)]
    limit: usize,
    /// CSC iterations per EPI
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kernel_sizes(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|k| k % 2 == 1)
                .ok_or_else(|| Error::Config(format!("bad kernel size {t:?}, expected odd")))
        })
        .collect()
}

fn dataset_epi(path: &Path, index: usize) -> Result<Matrix2, Error> {
    let (_, samples) = read_dataset(path)?;
    let n = samples.len();
    samples
        .into_iter()
        .nth(index)
        .map(|s| s.epi)
        .ok_or_else(|| Error::Bounds(format!("EPI index {index} but dataset holds {n}")))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::GenData(a) => {
            let cfg = a.optics.config();
            let h = generate_dataset(&cfg, &a.samples.options(a.count, seed), &a.out)?;
            eprintln!(
                "wrote {} samples ({}x{}, {} depths) to {}",
                h.count,
                h.theta,
                h.n,
                h.m,
                a.out.display()
            );
        }
        Cmd::BuildDict(a) => {
            let dict = build_dictionary(&a.optics.config(), a.atom_theta, a.atom_n)?;
            dict.save(&a.out)?;
            eprintln!("wrote {} atoms to {}", dict.len(), a.out.display());
        }
        Cmd::Solve(a) => {
            let dict = EpiDictionary::load(&a.dict)?;
            let x = dataset_epi(&a.epi, a.index)?;
            let opts = a.solver.options(seed);
            let (z, trace) = solve(&x, &dict.atoms, &opts)?;
            if let Some(out) = &a.out {
                save_codes(out, &z, opts.lambda, &trace)?;
            }
            eprintln!(
                "iterations={} converged={} objective={:.6e} gamma={:.6e}",
                trace.iterations,
                trace.converged,
                trace.objectives.last().copied().unwrap_or(f64::NAN),
                trace.gamma
            );
            for d in detect_depths(&code_evidence(&z), &dict.depths, &a.readout.csc()) {
                println!("{d}");
            }
        }
        Cmd::Train(a) => {
            let kernels = parse_kernel_sizes(&a.kernel_sizes)?;
            let bias_sign = BiasSign::parse(&a.bias_sign)?;
            let (header, samples) = read_dataset(&a.data)?;
            let mut arch = Architecture::new(header.m, header.theta, header.n, kernels);
            arch.bias_sign = bias_sign;
            let dict = a.init_dict.as_deref().map(EpiDictionary::load).transpose()?;
            let init = init_params(&arch, (header.depth_min, header.depth_max), seed, dict.as_ref())?;
            let hyper = TrainHyper {
                epochs: a.epochs,
                batch: a.batch,
                adam: AdamConfig {
                    lr: a.lr,
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                },
                seed,
                val_fraction: a.val_fraction,
                single_thread: cli.single_thread,
            };
            let (best, report) = train(&samples, init, &hyper)?;
            save_model(&best, &a.out)?;
            write_or_print(a.log.as_deref(), &report.to_csv())?;
            eprintln!(
                "best epoch {:?} (val loss {:?}); {} parameters; model written to {}",
                report.best_epoch,
                report.best_val_loss(),
                arch.param_count(),
                a.out.display()
            );
        }
        Cmd::Infer(a) => {
            let p = load_model(&a.model)?;
            let x = dataset_epi(&a.epi, a.index)?;
            let probs = infer(&x, &p)?;
            if a.probs {
                for v in probs {
                    println!("{v}");
                }
            } else {
                for d in detect_depths(&probs, &p.depth_grid(), &a.readout.network()) {
                    println!("{d}");
                }
            }
        }
        Cmd::Eval(a) => {
            if a.model.is_none() && a.dict.is_none() {
                return Err(Error::Config("eval needs --model and/or --dict".into()));
            }
            let cfg = a.optics.config();
            let samples = a.samples.options(a.count, seed);
            let mut reports: Vec<EvalReport> = Vec::new();
            if let Some(path) = &a.model {
                let p = load_model(path)?;
                let mut opts = LightFieldEvalOptions::new(cfg.clone(), samples.clone(), a.readout.network());
                opts.lateral_threshold = a.lateral_threshold;
                opts.lateral_min_separation = a.lateral_min_separation;
                opts.gate_um = a.gate;
                reports.push(evaluate_lightfields(&DepthEstimator::Network(&p), &opts)?);
            }
            if let Some(path) = &a.dict {
                let dict = EpiDictionary::load(path)?;
                let est = DepthEstimator::csc_with_fixed_step(
                    &dict,
                    (cfg.theta_u, cfg.n_x),
                    a.solver.options(seed),
                )?;
                let mut opts = LightFieldEvalOptions::new(cfg.clone(), samples.clone(), a.readout.csc());
                opts.lateral_threshold = a.lateral_threshold;
                opts.lateral_min_separation = a.lateral_min_separation;
                opts.gate_um = a.gate;
                reports.push(evaluate_lightfields(&est, &opts)?);
            }
            let mut csv = format!("{EVAL_CSV_HEADER}\n");
            for r in &reports {
                csv.push_str(&r.csv_rows());
            }
            write_or_print(a.out.as_deref(), &csv)?;
            for r in &reports {
                eprintln!("{}", r.summary());
            }
            if let [net, csc] = reports.as_slice() {
                let axes = ["x", "y", "z"];
                let order: Vec<String> = (0..3)
                    .map(|k| {
                        let rel = if net.rmse[k] <= csc.rmse[k] { "<=" } else { ">" };
                        format!("{} {rel}", axes[k])
                    })
                    .collect();
                eprintln!("ordering cista-infer vs csc-solve: {}", order.join(", "));
            }
        }
        Cmd::Bench(a) => {
            let p = load_model(&a.model)?;
            let dict = EpiDictionary::load(&a.dict)?;
            let (_, samples) = read_dataset(&a.data)?;
            let epis: Vec<Matrix2> = samples.into_iter().take(a.limit).map(|s| s.epi).collect();
            let base = SolverOptions {
                lambda: a.lambda,
                power_seed: seed,
                ..Default::default()
            };
            let report = bench(&p, &dict, &epis, a.repeats, &bench_solver_options(&base, a.iters))?;
            write_or_print(a.out.as_deref(), &report.to_csv())?;
        }
        Cmd::Selftest => {
            let suites = selftest::run_all(seed)?;
            let mut ok = true;
            for s in &suites {
                println!("{}", s.line());
                ok &= s.passed;
            }
            if !ok {
                return Err(Error::Degenerate("self test failed".into()));
            }
        }
    }
    Ok(())
}

/// Appends `--key value` pairs from the config file for every key not
/// already given on the command line. Keys that belong to a different
/// subcommand are ignored so one file can serve a whole pipeline.
fn apply_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;

    let root = Cli::command();
    let sub = argv
        .iter()
        .skip(1)
        .find_map(|a| root.find_subcommand(a).map(|c| c.get_name().to_string()));
    let Some(sub) = sub else {
        return Ok(argv);
    };
    let sub_cmd = root.find_subcommand(&sub).expect("found above");
    let lookup = |key: &str| {
        sub_cmd
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key))
            .map(|a| matches!(a.get_action(), ArgAction::SetTrue))
    };
    let known_elsewhere = |key: &str| {
        root.get_subcommands()
            .any(|c| c.get_arguments().any(|a| a.get_long() == Some(key)))
    };

    let mut out = argv.clone();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected key=value", lineno + 1))?;
        let key = k.trim().replace('_', "-");
        let value = v.trim();
        if key == "config" {
            continue;
        }
        let flag = format!("--{key}");
        let given = argv
            .iter()
            .any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        match lookup(&key) {
            _ if given => {}
            Some(true) => match value {
                "true" | "1" | "yes" => out.push(flag),
                "false" | "0" | "no" => {}
                _ => return Err(format!("{path}:{}: {key} expects true or false", lineno + 1)),
            },
            Some(false) => out.push(format!("{flag}={value}")),
            None if known_elsewhere(&key) => {}
            None => return Err(format!("{path}:{}: unknown key {key:?}", lineno + 1)),
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let argv = match apply_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() {
                2
            } else if e.is_numerical() {
                3
            } else {
                1
            })
        }
    }
}
