use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use jumpqla::csvio::{read_path, write_path};
use jumpqla::filter::{local_filter_set, FilterConfig, FilterResult, ScaleKind};
use jumpqla::harness::{run_to_dir, Experiment, ExperimentConfig};
use jumpqla::model::{increments, BlockLayout, ParamBox, SamplePath, TriangularVolatility};
use jumpqla::pipeline::{run_method, Method, MethodArgs, Settings};
use jumpqla::simulate::{simulate_ou_jump, OuJumpParams};

#[derive(Parser)]
#[command(name = "jumpqla", version, about = "Global jump filtering and quasi-likelihood volatility estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a path and write it as CSV.
    Simulate(SimulateArgs),
    /// Run a jump filter over a path.
    Detect(DetectArgs),
    /// Estimate the volatility parameter of a path.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo experiment.
    Mc(McArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SimModel {
    OuJump,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "ou-jump")]
    model: SimModel,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 20.0)]
    lambda: f64,
    /// Variance of each jump mark.
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    #[arg(long, default_value_t = 1.0)]
    x0: f64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long = "T", default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    substeps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FilterArg {
    Global,
    Moving,
    Local,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Sbar,
    Identity,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long, value_enum)]
    filter: FilterArg,
    #[arg(long, conflicts_with = "rho")]
    alpha: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_enum, default_value = "sbar")]
    scale: ScaleArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    QmleAlpha,
    QbeAlphaBeta,
    QmleMoving,
    QbeMoving,
    OnestepM,
    OnestepB,
    Local,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::QmleAlpha => Method::QmleAlpha,
            MethodArg::QbeAlphaBeta => Method::QbeAlphaBeta,
            MethodArg::QmleMoving => Method::QmleMoving,
            MethodArg::QbeMoving => Method::QbeMoving,
            MethodArg::OnestepM => Method::OnestepM,
            MethodArg::OnestepB => Method::OnestepB,
            MethodArg::Local => Method::Local,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    /// σ = θ on a scalar path.
    Scalar,
    /// Independent scalar coordinates, σ_k = θ_k.
    Diag,
    /// One block with a lower-triangular factor.
    Cholesky,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.45)]
    beta: f64,
    #[arg(long, default_value_t = 4)]
    kappa: usize,
    #[arg(long)]
    rho: Option<f64>,
    /// Known drift rate of the local comparator.
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, value_enum, default_value = "scalar")]
    model: ModelArg,
    /// Parameter box as `lo:hi`; one value applies to every coordinate,
    /// otherwise give one per parameter.
    #[arg(long = "box")]
    bounds: Vec<String>,
    #[arg(long, value_enum, default_value = "sbar")]
    scale: ScaleArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Table1,
    AlphaSweep,
    Compare,
    Rate,
}

#[derive(Args)]
struct McArgs {
    #[arg(long, value_enum)]
    experiment: ExperimentArg,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn load_path(p: &PathBuf) -> Result<SamplePath<f64>, Box<dyn std::error::Error>> {
    let f = File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
    Ok(read_path(BufReader::new(f))?)
}

fn scale_kind(s: ScaleArg) -> ScaleKind {
    match s {
        ScaleArg::Sbar => ScaleKind::Sbar,
        ScaleArg::Identity => ScaleKind::Identity,
    }
}

fn simulate(a: SimulateArgs) -> CliResult {
    let SimModel::OuJump = a.model;
    let params = OuJumpParams { eta: a.eta, sigma: a.sigma, lambda: a.lambda, eps: a.eps, x0: a.x0, n: a.n, horizon: a.horizon, seed: a.seed, substeps: a.substeps };
    let path = simulate_ou_jump::<f64>(&params)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    write_path(&path, &mut w)?;
    w.flush()?;
    Ok(())
}

fn detect(a: DetectArgs) -> CliResult {
    let path = load_path(&a.input)?;
    let dy = increments(&path);
    let layout = BlockLayout::single(path.dim_y());
    let config = FilterConfig { scale: scale_kind(a.scale), ..Default::default() };
    let result: FilterResult<f64> = match a.filter {
        FilterArg::Global => {
            let alpha = a.alpha.ok_or("global filter needs --alpha")?;
            config.fixed_alpha(&dy, &layout, path.h(), &[alpha])?.remove(0)
        }
        FilterArg::Moving => config.moving(&dy, &layout, path.h())?.remove(0),
        FilterArg::Local => {
            let rho = a.rho.ok_or("local filter needs --rho")?;
            local_filter_set(&dy, path.h(), rho)?
        }
    };
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&a.out)?));
    w.write_record(["j", "kept", "scaled_norm", "cap", "truth"])?;
    let truth = path.jump_truth();
    for j in 0..result.n() {
        w.write_record([
            (j + 1).to_string(),
            u8::from(result.mask[j]).to_string(),
            result.scaled_norms[j].to_string(),
            u8::from(result.cap[j]).to_string(),
            truth.map_or(String::new(), |t| u8::from(t[j]).to_string()),
        ])?;
    }
    w.flush()?;
    eprintln!("kept {} of {} increments", result.kept_count(), result.n());
    Ok(())
}

fn parse_bounds(spec: &[String], p: usize, default: impl Fn(usize) -> (f64, f64)) -> Result<ParamBox<f64>, Box<dyn std::error::Error>> {
    let parsed: Vec<(f64, f64)> = spec
        .iter()
        .map(|s| {
            let (lo, hi) = s.split_once(':').ok_or_else(|| format!("box {s:?} is not lo:hi"))?;
            Ok::<_, Box<dyn std::error::Error>>((lo.trim().parse()?, hi.trim().parse()?))
        })
        .collect::<Result<_, _>>()?;
    let pairs: Vec<(f64, f64)> = match parsed.len() {
        0 => (0..p).map(default).collect(),
        1 => vec![parsed[0]; p],
        k if k == p => parsed,
        k => return Err(format!("got {k} box entries for {p} parameters").into()),
    };
    Ok(ParamBox::new(pairs.iter().map(|b| b.0).collect(), pairs.iter().map(|b| b.1).collect())?)
}

fn build_model(kind: ModelArg, m: usize, bounds: &[String]) -> Result<TriangularVolatility<f64>, Box<dyn std::error::Error>> {
    let positive = |_| (1e-3, 10.0);
    Ok(match kind {
        ModelArg::Scalar => {
            if m != 1 {
                return Err(format!("scalar model needs one observed coordinate, the path has {m}").into());
            }
            TriangularVolatility::new(BlockLayout::single(1), parse_bounds(bounds, 1, positive)?)?
        }
        ModelArg::Diag => TriangularVolatility::diagonal(parse_bounds(bounds, m, positive)?)?,
        ModelArg::Cholesky => {
            let p = m * (m + 1) / 2;
            // diagonal entries sit at positions i(i+3)/2 of the row-wise listing
            let diag: Vec<usize> = (0..m).map(|i| i * (i + 3) / 2).collect();
            let bx = parse_bounds(bounds, p, |k| if diag.contains(&k) { (1e-3, 10.0) } else { (-10.0, 10.0) })?;
            TriangularVolatility::new(BlockLayout::single(m), bx)?
        }
    })
}

fn estimate(a: EstimateArgs) -> CliResult {
    let path = load_path(&a.input)?;
    let model = build_model(a.model, path.dim_y(), &a.bounds)?;
    let settings = Settings { filter: FilterConfig { scale: scale_kind(a.scale), ..Default::default() }, kappa: a.kappa, beta: a.beta, ..Default::default() };
    let args = MethodArgs { alpha: a.alpha, rho: a.rho, eta: Some(a.eta) };
    let report = run_method(a.method.into(), &model, &path, &settings, args)?;
    fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    eprintln!("theta_hat = {:?}", report.theta_hat);
    Ok(())
}

fn mc(a: McArgs) -> CliResult {
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::from_toml(&fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)?,
        None => ExperimentConfig::default(),
    };
    let exp = match a.experiment {
        ExperimentArg::Table1 => Experiment::Table1,
        ExperimentArg::AlphaSweep => Experiment::AlphaSweep,
        ExperimentArg::Compare => Experiment::Compare,
        ExperimentArg::Rate => Experiment::Rate,
    };
    let out = run_to_dir(&cfg, exp, &a.out)?;
    let failures = out.rows.iter().filter(|r| !r.error.is_empty()).count();
    eprintln!("{}: {} rows ({failures} failed) written to {}", exp.name(), out.rows.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Simulate(a) => simulate(a),
        Command::Detect(a) => detect(a),
        Command::Estimate(a) => estimate(a),
        Command::Mc(a) => mc(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
