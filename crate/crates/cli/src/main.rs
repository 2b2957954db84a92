use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use diba::baselines::{quantize_rowwise, scale_retune};
use diba::io::{self, FactorContainer};
use diba::linalg::frobenius_dist_sq;
use diba::model::{snr_db, storage_report, Snr};
use diba::retune::{retune, CalibrationBatch, Optimizer, RetuneConfig};
use diba::solver::{Precision, SolverConfig};
use diba::sweep::{self, synthetic, SweepOptions};
use diba::{flops, DenseMatrix, Matrix};

#[derive(Parser)]
#[command(name = "diba", version, about = "Diagonal-binary matrix factorization toolkit")]
struct Cli {
    /// Print summaries as JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit factors to a matrix with the greedy alternating solver.
    Fit(FitArgs),
    /// Fit a range of k under a storage-ratio cap and report SNR.
    Sweep(SweepArgs),
    /// Evaluate factors or a quantized model against a matrix.
    Eval(EvalArgs),
    /// Apply factors to a vector.
    Matvec(MatvecArgs),
    /// Retune the diagonals of fitted factors on calibration data.
    Retune(RetuneArgs),
    /// Row-wise symmetric integer quantization baseline.
    Quantize(QuantizeArgs),
    /// Storage accounting for factors or a shape.
    Info(InfoArgs),
    /// Write a seeded synthetic matrix.
    Generate(GenerateArgs),
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 1e-6)]
    tau: f64,
    #[arg(long, default_value_t = 1024)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Middle-refit ridge; defaults to 1e-8 * max(1, mean diag F).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 100)]
    max_outer: usize,
    #[arg(long, default_value = "64", value_parser = ["32", "64"])]
    precision: String,
}

impl SolverArgs {
    fn config(&self, k: usize) -> Result<SolverConfig> {
        Ok(SolverConfig {
            k,
            tau: self.tau,
            batch_rows: self.batch,
            seed: self.seed,
            lambda: self.lambda,
            max_outer: self.max_outer,
            precision: self.precision.parse::<Precision>()?,
        })
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    solver: SolverArgs,
    /// Bits per real scalar recorded in the container for accounting.
    #[arg(long, default_value_t = 16)]
    q: u16,
    #[arg(long)]
    out: PathBuf,
    /// Write the per-update trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = sweep::DEFAULT_KS.to_vec())]
    ks: Vec<usize>,
    #[arg(long, default_value_t = sweep::DEFAULT_Q_BITS)]
    q: u32,
    #[arg(long, default_value_t = sweep::DEFAULT_CAP)]
    cap: f64,
    #[command(flatten)]
    solver: SolverArgs,
    /// CSV report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json_out: Option<PathBuf>,
    /// Matrix id written into the report (defaults to the input file stem).
    #[arg(long)]
    id: Option<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, conflicts_with = "quant", required_unless_present = "quant")]
    factors: Option<PathBuf>,
    #[arg(long)]
    quant: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    q: u32,
}

#[derive(Args)]
struct MatvecArgs {
    #[arg(long)]
    factors: PathBuf,
    /// Matrix container holding an n×1 or 1×n vector.
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    count_multiplies: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Gd,
    Adam,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Calibration inputs, n×s.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Calibration targets, m×s.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Gd)]
    optimizer: OptimizerArg,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Write the loss curve as `step,loss` CSV.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
}

impl TrainArgs {
    fn config(&self) -> RetuneConfig {
        RetuneConfig {
            learning_rate: self.lr,
            steps: self.steps,
            optimizer: match self.optimizer {
                OptimizerArg::Gd => Optimizer::GradientDescent,
                OptimizerArg::Adam => Optimizer::adam(),
            },
            grad_clip_norm: (self.clip > 0.0).then_some(self.clip),
        }
    }

    fn batch(&self) -> Result<CalibrationBatch> {
        let (Some(x), Some(y)) = (&self.calib, &self.target) else {
            bail!("--calib and --target are required for retuning");
        };
        let x: Matrix<f64> = load_matrix(x)?.cast();
        let y: Matrix<f64> = load_matrix(y)?.cast();
        Ok(CalibrationBatch::new(x, y)?)
    }
}

#[derive(Args)]
struct RetuneArgs {
    #[arg(long)]
    factors: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = ["2", "3", "4", "8"])]
    bits: String,
    #[arg(long)]
    out: PathBuf,
    /// Retune per-row scale multipliers with the codes frozen.
    #[arg(long)]
    scale_rt: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long, conflicts_with = "shape", required_unless_present = "shape")]
    factors: Option<PathBuf>,
    /// `MxN`, used with --k instead of a factor file.
    #[arg(long, requires = "k")]
    shape: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 16)]
    q: u32,
    /// Report even when k >= m*n.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gaussian,
    LowRank,
    HeavyRows,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    /// Noise energy as a fraction of signal energy (low-rank kind).
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    io::load_matrix(path).with_context(|| format!("reading matrix {}", path.display()))
}

fn load_factors(path: &Path) -> Result<FactorContainer> {
    io::load_factors(path).with_context(|| format!("reading factors {}", path.display()))
}

fn print_summary(json_mode: bool, value: serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    if json_mode {
        writeln!(out, "{value}")?;
    } else if let Some(obj) = value.as_object() {
        for (k, v) in obj {
            match v {
                serde_json::Value::String(s) => writeln!(out, "{k}: {s}")?,
                other => writeln!(out, "{k}: {other}")?,
            }
        }
    }
    Ok(())
}

fn snr_json(snr: &Snr) -> serde_json::Value {
    json!(snr.reported_db())
}

fn cmd_fit(args: FitArgs, json_mode: bool) -> Result<()> {
    let a = load_matrix(&args.input)?;
    let cfg = args.solver.config(args.k)?;
    let (factors, trace) = diba::fit(&a, &cfg)?;
    if let Some(path) = &args.trace {
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf)?;
        fs::write(path, buf).with_context(|| format!("writing trace {}", path.display()))?;
    }
    let snr = snr_db(&a, &factors.reconstruct())?;
    io::save_factors(&args.out, &FactorContainer { q_bits: args.q, factors })?;
    print_summary(
        json_mode,
        json!({
            "objective": trace.final_objective(),
            "snr_db": snr_json(&snr),
            "exact": snr.exact,
            "iterations": trace.iterations.len(),
            "flips": trace.total_flips(),
            "termination": format!("{:?}", trace.termination).to_lowercase(),
        }),
    )
}

fn cmd_sweep(args: SweepArgs, json_mode: bool) -> Result<()> {
    let a = load_matrix(&args.input)?;
    let id = args.id.clone().unwrap_or_else(|| {
        args.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "matrix".into())
    });
    let opts = SweepOptions {
        ks: args.ks.clone(),
        q_bits: args.q,
        cap: args.cap,
        solver: args.solver.config(args.ks.first().copied().unwrap_or(1))?,
        jobs: args.jobs,
    };
    let records = sweep::sweep(&a, &id, &opts)?;
    let csv = sweep::to_csv(&records);
    if let Some(path) = &args.json_out {
        fs::write(path, sweep::to_json(&records))?;
    }
    match &args.out {
        Some(path) => fs::write(path, &csv)?,
        None if json_mode => println!("{}", sweep::to_json(&records)),
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, json_mode: bool) -> Result<()> {
    let a = load_matrix(&args.input)?;
    let (m, n) = a.shape();
    if let Some(path) = &args.factors {
        let c = load_factors(path)?;
        let f = &c.factors;
        let (fm, k, fn_) = f.dims();
        if (fm, fn_) != (m, n) {
            bail!(diba::Error::ShapeMismatch(format!("factors are {fm}x{fn_}, matrix is {m}x{n}")));
        }
        let ahat = f.reconstruct();
        let snr = snr_db(&a, &ahat)?;
        let report = storage_report(m, n, k, args.q)?;
        return print_summary(
            json_mode,
            json!({
                "snr_db": snr_json(&snr),
                "exact": snr.exact,
                "objective": frobenius_dist_sq(&a, &ahat)?,
                "k": k,
                "q_bits": args.q,
                "rho": report.rho,
            }),
        );
    }
    let path = args.quant.as_ref().expect("clap enforces one of --factors/--quant");
    let q = io::load_quant(path).with_context(|| format!("reading quantized model {}", path.display()))?;
    if q.shape() != (m, n) {
        bail!(diba::Error::ShapeMismatch(format!("quantized model is {:?}, matrix is {m}x{n}", q.shape())));
    }
    let ahat = q.dequantize();
    let snr = snr_db(&a, &ahat)?;
    let bytes = q.storage_bytes(false);
    let dense_bytes = (args.q as u64 * (m * n) as u64).div_ceil(8);
    print_summary(
        json_mode,
        json!({
            "snr_db": snr_json(&snr),
            "exact": snr.exact,
            "objective": frobenius_dist_sq(&a, &ahat)?,
            "bits": q.bits(),
            "bytes": bytes,
            "q_bits": args.q,
            "rho": bytes as f64 / dense_bytes as f64,
        }),
    )
}

fn cmd_matvec(args: MatvecArgs, json_mode: bool) -> Result<()> {
    let f = load_factors(&args.factors)?.factors;
    let x = load_matrix(&args.x)?;
    if x.rows() != 1 && x.cols() != 1 {
        bail!(diba::Error::ShapeMismatch(format!("x must be a vector, got {}x{}", x.rows(), x.cols())));
    }
    let x: Vec<f64> = x.as_slice().iter().map(|&v| f64::from(v)).collect();
    flops::reset();
    let y = f.matvec(&x)?;
    let muls = flops::count();
    let mut out = std::io::stdout().lock();
    if json_mode {
        let mut v = json!({ "y": y });
        if args.count_multiplies {
            v["multiplies"] = json!(muls);
        }
        writeln!(out, "{v}")?;
    } else {
        for v in &y {
            writeln!(out, "{v}")?;
        }
        if args.count_multiplies {
            writeln!(out, "multiplies: {muls}")?;
        }
    }
    Ok(())
}

fn cmd_retune(args: RetuneArgs, json_mode: bool) -> Result<()> {
    let c = load_factors(&args.factors)?;
    let batch = args.train.batch()?;
    let out = retune(&c.factors, &[batch], &args.train.config())?;
    if let Some(path) = &args.train.loss_curve {
        fs::write(path, out.loss_curve_csv())?;
    }
    io::save_factors(&args.out, &FactorContainer { q_bits: c.q_bits, factors: out.factors.clone() })?;
    print_summary(
        json_mode,
        json!({
            "initial_loss": out.initial_loss(),
            "final_loss": out.final_loss,
            "best_step": out.best_step,
            "trainable_scalars": out.factors.trainable_scalars(),
        }),
    )
}

fn cmd_quantize(args: QuantizeArgs, json_mode: bool) -> Result<()> {
    let a = load_matrix(&args.input)?;
    let bits: u8 = args.bits.parse()?;
    let mut q = quantize_rowwise(&a, bits)?;
    let mut summary = json!({
        "bits": bits,
        "bytes": q.storage_bytes(false),
        "snr_db": snr_json(&snr_db(&a, &q.dequantize())?),
    });
    if args.scale_rt {
        let batch = args.train.batch()?;
        let out = scale_retune(&q, &[batch], &args.train.config())?;
        if let Some(path) = &args.train.loss_curve {
            fs::write(path, out.loss_curve_csv())?;
        }
        summary["scale_rt_initial_loss"] = json!(out.initial_loss());
        summary["scale_rt_best_loss"] = json!(out.losses[out.best_step].1);
        q = out.model;
    }
    io::save_quant(&args.out, &q)?;
    print_summary(json_mode, summary)
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let (m, n) = s.split_once(['x', 'X']).context("shape must look like MxN")?;
    Ok((m.trim().parse()?, n.trim().parse()?))
}

fn cmd_info(args: InfoArgs, json_mode: bool) -> Result<()> {
    let (report, container_bytes) = match (&args.factors, &args.shape) {
        (Some(path), _) => {
            let c = load_factors(path)?;
            let size = fs::metadata(path)?.len();
            (c.factors.storage_report(args.q, args.force)?, size)
        }
        (None, Some(shape)) => {
            let (m, n) = parse_shape(shape)?;
            let k = args.k.expect("clap requires --k with --shape");
            if !args.force && k >= m * n {
                bail!(diba::Error::InvalidArgument(format!("k={k} >= m*n; pass --force to report anyway")));
            }
            (storage_report(m, n, k, args.q)?, io::factor_container_len(m, k, n))
        }
        (None, None) => unreachable!("clap requires --factors or --shape"),
    };
    print_summary(
        json_mode,
        json!({
            "m": report.m,
            "n": report.n,
            "k": report.k,
            "q_bits": report.q_bits,
            "dense_bits": report.dense_bits,
            "diba_bits": report.diba_bits,
            "dense_bytes": report.dense_bytes(),
            "diba_bytes": report.diba_bytes(),
            "rho": format!("{:.4}", report.rho),
            "compression_factor": format!("{:.2}", report.compression_factor),
            "container_bytes": container_bytes,
        }),
    )
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    if args.rows == 0 || args.cols == 0 {
        bail!(diba::Error::InvalidArgument("rows and cols must be >= 1".into()));
    }
    let a = match args.kind {
        Kind::Gaussian => synthetic::gaussian(args.rows, args.cols, args.seed),
        Kind::LowRank => synthetic::low_rank_plus_noise(args.rows, args.cols, args.rank, args.noise, args.seed),
        Kind::HeavyRows => synthetic::heavy_tailed_rows(args.rows, args.cols, args.seed),
    };
    io::save_matrix(&args.out, &a)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let json_mode = cli.json;
    match cli.command {
        Command::Fit(a) => cmd_fit(a, json_mode),
        Command::Sweep(a) => cmd_sweep(a, json_mode),
        Command::Eval(a) => cmd_eval(a, json_mode),
        Command::Matvec(a) => cmd_matvec(a, json_mode),
        Command::Retune(a) => cmd_retune(a, json_mode),
        Command::Quantize(a) => cmd_quantize(a, json_mode),
        Command::Info(a) => cmd_info(a, json_mode),
        Command::Generate(a) => cmd_generate(a),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<diba::Error>().map(diba::Error::kind))
        .unwrap_or("error")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
