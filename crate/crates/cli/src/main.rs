use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spatreg::eval;
use spatreg::hyperopt::{self, HyperOptConfig};
use spatreg::io::{self, ArrayContainer, ArrayHeader, ArrayKind, ExperimentManifest};
use spatreg::net::{self, RunConfig, TrainOptions};
use spatreg::synth::{self, PairConfig};
use spatreg::weighting::WeightMode;
use spatreg::Error;

const SEED_ENV: &str = "SPATREG_SEED";

#[derive(Parser)]
#[command(name = "spatreg", version, about = "Registration with spatially-variant, conditioned regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenData),
    /// Train a model on a dataset.
    Train(Train),
    /// Register one pair.
    Register(Register),
    /// Evaluate a model on a dataset at a fixed weight vector.
    Evaluate(Evaluate),
    /// Search per-region weights on a validation set.
    OptimizeLambda(OptimizeLambda),
    /// Vary one region's weight over a grid.
    SweepLambda(SweepLambda),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    seed: u64,
    /// Grid shape, e.g. "64,64"; a single value means a square 2-D grid.
    #[arg(long)]
    shape: String,
    #[arg(long)]
    pairs: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    regions: usize,
    /// Pyramid depth the data must support.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Per-region roughness, background first.
    #[arg(long)]
    roughness: Option<String>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    log_every: usize,
}

#[derive(Args)]
struct WeightArgs {
    /// Comma-separated per-region weights.
    #[arg(long)]
    lambda: String,
    /// Condition on the unsmoothed weight field.
    #[arg(long)]
    raw_weights: bool,
}

#[derive(Args)]
struct Register {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Fixed-image labels; they define the weight field.
    #[arg(long)]
    labels: PathBuf,
    /// Moving-image labels, enabling Dice in the report.
    #[arg(long)]
    moving_labels: Option<PathBuf>,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "csain")]
    method: String,
    /// Add a row to an existing report instead of replacing it.
    #[arg(long)]
    append: bool,
}

#[derive(Args)]
struct OptimizeLambda {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    val_data: PathBuf,
    #[arg(long, default_value_t = hyperopt::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = hyperopt::DEFAULT_LR)]
    lr: f64,
    /// Start point; all ones by default.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    raw_weights: bool,
}

#[derive(Args)]
struct SweepLambda {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    region: usize,
    #[arg(long, default_value = "0.5,1,2,4,8")]
    grid: String,
    /// Weights of the other regions; all ones by default.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    raw_weights: bool,
    #[arg(long)]
    out: PathBuf,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> spatreg::Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| bad(format!("cannot parse {what} entry {v:?}"))))
        .collect()
}

fn mode(raw: bool) -> WeightMode {
    if raw {
        WeightMode::Raw
    } else {
        WeightMode::Smoothed
    }
}

/// Creates `dir`, reporting the path on failure.
fn out_dir(dir: &Path) -> spatreg::Result<()> {
    fs::create_dir_all(dir).map_err(|e| bad(format!("cannot write {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> spatreg::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| bad(format!("cannot write {}: {e}", path.display())))
}

fn gen_data(a: GenData) -> spatreg::Result<()> {
    let mut shape: Vec<usize> = parse_list(&a.shape, "shape")?;
    if shape.len() == 1 {
        shape.push(shape[0]);
    }
    net::check_network_shape(&shape, a.levels)?;
    let roughness = match &a.roughness {
        Some(s) => parse_list(s, "roughness")?,
        None => synth::default_roughness(a.regions),
    };
    let mut cfg = PairConfig::new(roughness);
    if let Some(amp) = a.amplitude {
        cfg.amplitude = amp;
    }
    cfg.noise_std = a.noise;
    if a.pairs == 0 {
        return Err(bad("--pairs must be positive"));
    }
    out_dir(&a.out)?;
    let pairs = synth::gen_dataset(a.seed, a.pairs, &shape, a.regions, &cfg)?;
    let manifest = io::write_dataset(&a.out, a.seed, &cfg, &pairs)?;
    log::info!(
        "wrote {} pairs to {} (manifest {})",
        manifest.pairs.len(),
        a.out.display(),
        io::file_hash(&a.out.join(io::MANIFEST_FILE))?
    );
    Ok(())
}

fn train(a: Train) -> spatreg::Result<()> {
    let text = fs::read(&a.config).map_err(|e| bad(format!("cannot read {}: {e}", a.config.display())))?;
    let mut config: RunConfig = serde_json::from_slice(&text)?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        config.seed = seed.parse().map_err(|_| bad(format!("{SEED_ENV}={seed:?} is not an integer")))?;
    }
    config.validate()?;
    let (manifest, pairs) = io::read_dataset(&a.data)?;
    if manifest.shape != config.image_shape || manifest.regions != config.regions {
        return Err(bad(format!(
            "dataset is {:?} with {} regions, config expects {:?} with {}",
            manifest.shape, manifest.regions, config.image_shape, config.regions
        )));
    }
    out_dir(&a.out)?;
    let opts = TrainOptions {
        dump_dir: Some(a.out.clone()),
        log_every: a.log_every,
    };
    let (model, curve) = net::train(&pairs, &config, &opts)?;
    let ckpt = a.out.join("model.ckpt");
    io::save_checkpoint(&ckpt, &model)?;
    let mut csv = String::from("level,iteration,total,similarity,regularizer\n");
    for p in &curve {
        csv.push_str(&format!("{},{},{},{},{}\n", p.level, p.iteration, p.total, p.similarity, p.regularizer));
    }
    let curve_path = a.out.join("training_curve.csv");
    write_file(&curve_path, csv)?;
    write_file(&a.out.join("config.json"), serde_json::to_vec_pretty(&config)?)?;
    ExperimentManifest {
        config_hash: config.hash(),
        seed: config.seed,
        dataset_manifest: a.data.join(io::MANIFEST_FILE),
        checkpoint: ckpt,
        metric_csvs: vec![curve_path],
    }
    .write(&a.out.join("experiment.json"))?;
    Ok(())
}

fn register(a: Register) -> spatreg::Result<()> {
    let model = io::load_checkpoint(&a.checkpoint)?;
    let fixed = io::read_image(&a.fixed)?;
    let moving = io::read_image(&a.moving)?;
    let labels = io::read_labels(&a.labels)?;
    let moving_labels = a.moving_labels.as_deref().map(io::read_labels).transpose()?;
    let lambdas: Vec<f64> = parse_list(&a.weights.lambda, "lambda")?;
    let reg = eval::register(
        &model,
        &fixed,
        &moving,
        &labels,
        moving_labels.as_ref(),
        &lambdas,
        mode(a.weights.raw_weights),
    )?;
    out_dir(&a.out)?;
    io::write_image(&a.out.join("warped.sra"), &reg.warped)?;
    io::write_displacement(&a.out.join("displacement.sra"), &reg.displacement)?;
    io::write_tensor(&a.out.join("deformation.sra"), ArrayKind::Displacement, reg.deformation.tensor())?;
    let jac = reg.jacobian.values.iter().map(|&v| v as f32).collect();
    ArrayContainer::new(ArrayHeader::new(ArrayKind::Image, &reg.jacobian.shape), jac)?
        .write(&a.out.join("jacobian.sra"))?;
    if let Some(wl) = &reg.warped_labels {
        io::write_labels(&a.out.join("warped_labels.sra"), wl)?;
    }
    write_file(&a.out.join("metrics.json"), serde_json::to_vec_pretty(&reg.report)?)
}

fn evaluate(a: Evaluate) -> spatreg::Result<()> {
    let model = io::load_checkpoint(&a.checkpoint)?;
    let (_, pairs) = io::read_dataset(&a.data)?;
    let lambdas: Vec<f64> = parse_list(&a.weights.lambda, "lambda")?;
    let regs = eval::evaluate_pairs(&model, &pairs, &lambdas, mode(a.weights.raw_weights))?;
    let summary = eval::summarize_registrations(&regs)?;
    let row = eval::report_row(&a.method, &summary, &lambdas);
    let csv = if a.append && a.report.exists() {
        let mut old = fs::read_to_string(&a.report)?;
        old.push_str(&row);
        old.push('\n');
        old
    } else {
        format!("{}\n{row}\n", eval::REPORT_HEADER)
    };
    write_file(&a.report, csv)?;
    let mut jsonl = String::new();
    for (i, r) in regs.iter().enumerate() {
        let line = serde_json::json!({ "method": a.method, "pair": i, "metrics": r.report });
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
    }
    write_file(&a.report.with_extension("jsonl"), jsonl)
}

fn optimize_lambda(a: OptimizeLambda) -> spatreg::Result<()> {
    let model = io::load_checkpoint(&a.checkpoint)?;
    let (_, val) = io::read_dataset(&a.val_data)?;
    let mut cfg = HyperOptConfig::new(model.config().regions);
    cfg.steps = a.steps;
    cfg.lr = a.lr;
    cfg.mode = mode(a.raw_weights);
    if let Some(init) = &a.init {
        cfg.lambda_init = parse_list(init, "init")?;
    }
    let state = hyperopt::optimize_lambda(&model, &val, &cfg)?;
    let out = serde_json::json!({ "lambda_star": state.lambda_star(), "state": state });
    write_file(&a.out, serde_json::to_vec_pretty(&out)?)
}

fn sweep_lambda(a: SweepLambda) -> spatreg::Result<()> {
    let model = io::load_checkpoint(&a.checkpoint)?;
    let (_, pairs) = io::read_dataset(&a.data)?;
    let grid: Vec<f64> = parse_list(&a.grid, "grid")?;
    let base = match &a.lambda {
        Some(s) => parse_list(s, "lambda")?,
        None => vec![1.0; model.config().regions],
    };
    let rows = hyperopt::sweep_lambda(&model, &pairs, a.region, &grid, &base, mode(a.raw_weights))?;
    write_file(&a.out, hyperopt::sweep_csv(&rows))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::VersionMismatch(_) => 3,
        Error::InvalidArgument(_) | Error::Io(_) | Error::Json(_) | Error::Format(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Register(a) => register(a),
        Command::Evaluate(a) => evaluate(a),
        Command::OptimizeLambda(a) => optimize_lambda(a),
        Command::SweepLambda(a) => sweep_lambda(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
