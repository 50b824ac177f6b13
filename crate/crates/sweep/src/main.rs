use std::path::PathBuf;
use std::process::ExitCode;

use cfscale::data::{load_interactions, stats};
use cfscale::{AugmentKind, DatasetStats, DropConfig, InteractionFormat, ModelKind, SglConfig, SplitSpec, TrainConfig};
use cfscale_sweep::runner::{write_comparison, DEFAULT_DIM_CAP};
use cfscale_sweep::{
    classify_curve, compare_drop, load_records, mean_curve, powers_of_two, run_sweep, ClassifyOptions, Precision, Prepared,
    SweepConfig, SweepError, SweepResult,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cfscale", version, about = "Embedding-dimension sweeps for collaborative filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model across dimensions and seeds; append results to a CSV.
    Sweep(SweepArgs),
    /// Baseline against drop-loss variants over a save-ratio grid.
    CompareDrop(CompareArgs),
    /// Classify the mean NDCG curve of a sweep CSV, or of explicit values.
    Classify(ClassifyArgs),
    /// Print `m,n,count,sparsity` for an interaction file.
    Stats(DataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Bpr,
    Neumf,
    Lightgcn,
    Sgl,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    TsvUi,
    TsvUirt,
}

impl From<FormatArg> for InteractionFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::TsvUi => InteractionFormat::TsvUi,
            FormatArg::TsvUirt => InteractionFormat::TsvUirt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentArg {
    Edge,
    Mask,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "tsv-uirt")]
    format: FormatArg,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[command(flatten)]
    data: DataArgs,
    /// Value of the dataset column; defaults to the file stem.
    #[arg(long)]
    name: Option<String>,
    /// `LO..HI` for powers of two, or a comma-separated list.
    #[arg(long, default_value = "2..1024", value_parser = parse_dims)]
    dims: Dims,
    #[arg(long, default_value = "1", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 2048)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long)]
    noise_delta: Option<f64>,
    #[arg(long, default_value_t = 0.2)]
    sgl_tau: f64,
    #[arg(long, default_value_t = 0.1)]
    sgl_gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    sgl_rho: f64,
    #[arg(long, value_enum, default_value = "edge")]
    sgl_augment: AugmentArg,
    /// Contrast item nodes as well as users.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    sgl_item_term: bool,
    /// Propagation depth for lightgcn and sgl.
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = DEFAULT_DIM_CAP)]
    dim_cap: usize,
    #[command(flatten)]
    classify: ClassifyFlags,
}

#[derive(Args)]
struct ClassifyFlags {
    /// Peak prominence as a fraction of the curve range.
    #[arg(long, default_value_t = 0.02)]
    prominence: f64,
    #[arg(long, default_value_t = 0.9)]
    min_r2: f64,
}

impl ClassifyFlags {
    fn options(&self) -> ClassifyOptions {
        ClassifyOptions {
            prominence: self.prominence,
            min_r2: self.min_r2,
            ..ClassifyOptions::default()
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    drop_save_ratio: Option<f64>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    drop_get_low: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.85,0.9,0.95")]
    drop_save_ratio: Vec<f64>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    drop_get_low: bool,
    /// Output of the `dim,variant,ndcg` table.
    #[arg(long)]
    table: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Sweep CSV to read.
    #[arg(long, conflicts_with = "values", required_unless_present = "values")]
    input: Option<PathBuf>,
    #[arg(long, default_value = "baseline")]
    variant: String,
    /// Explicit curve values, paired with `--dims`.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long, default_value = "2..1048576", value_parser = parse_dims)]
    dims: Dims,
    #[command(flatten)]
    flags: ClassifyFlags,
}

#[derive(Clone, Debug)]
struct Dims(Vec<usize>);

fn parse_dims(s: &str) -> Result<Dims, String> {
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
        let hi: usize = hi.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
        if lo == 0 || !lo.is_power_of_two() || lo > hi {
            return Err("range must be LO..HI with LO a power of two and LO <= HI".into());
        }
        return Ok(Dims(powers_of_two(lo, hi)));
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|e| format!("bad dimension {x:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(Dims)
}

fn model_kind(c: &CommonArgs) -> ModelKind {
    match c.model {
        ModelArg::Bpr => ModelKind::Bpr,
        ModelArg::Neumf => ModelKind::neumf(),
        ModelArg::Lightgcn => ModelKind::LightGcn { layers: c.layers },
        ModelArg::Sgl => ModelKind::Sgl(SglConfig {
            layers: c.layers,
            rho: c.sgl_rho,
            gamma: c.sgl_gamma,
            tau: c.sgl_tau,
            augment: match c.sgl_augment {
                AugmentArg::Edge => AugmentKind::EdgeDropout,
                AugmentArg::Mask => AugmentKind::FeatureMask,
            },
            item_term: c.sgl_item_term,
        }),
    }
}

fn sweep_config(c: &CommonArgs) -> SweepConfig {
    let mut cfg = SweepConfig::new(model_kind(c), &c.data.data, &c.out);
    if let Some(name) = &c.name {
        cfg.dataset_name = name.clone();
    }
    cfg.format = c.data.format.into();
    cfg.dims = c.dims.0.clone();
    cfg.seeds = c.seeds.clone();
    cfg.train = TrainConfig {
        lr: c.lr,
        batch_size: c.batch_size,
        max_epochs: c.epochs,
        patience: c.patience,
        ..TrainConfig::default()
    };
    cfg.noise_delta = c.noise_delta;
    cfg.split = SplitSpec {
        seed: c.split_seed,
        ..SplitSpec::default()
    };
    cfg.jobs = c.jobs;
    cfg.precision = match c.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    cfg.dim_cap = c.dim_cap;
    cfg
}

/// Prints the mean curve and its class when there are enough points.
fn report(result: &SweepResult, variant: &str, opts: &ClassifyOptions) {
    let curve = result.mean_curve(variant);
    for (dim, ndcg) in &curve {
        println!("{variant} dim {dim}: mean ndcg@20 {ndcg:.5}");
    }
    if curve.len() >= 3 {
        match classify_curve(&curve, opts) {
            Ok(c) => println!("{variant} curve: {} (peaks at {:?}, log fit R² {:.3})", c.variant, c.evidence.peaks, c.evidence.r_squared),
            Err(e) => eprintln!("classification failed: {e}"),
        }
    }
}

fn run(cli: Cli) -> Result<bool, SweepError> {
    match cli.command {
        Command::Stats(args) => {
            let d = load_interactions(&args.data, args.format.into())?;
            println!("{}", DatasetStats::CSV_HEADER);
            println!("{}", stats(&d).to_csv_row());
            Ok(true)
        }
        Command::Sweep(args) => {
            let mut cfg = sweep_config(&args.common);
            cfg.drop = args.drop_save_ratio.map(|r| DropConfig::new(r, args.drop_get_low));
            let result = run_sweep(&cfg)?;
            let variant = cfscale_sweep::Variant::for_model(&cfg.model, cfg.drop)?.name;
            report(&result, &variant, &args.common.classify.options());
            println!("trained {} points, {} failed", result.trained, result.failures.len());
            Ok(result.all_completed())
        }
        Command::CompareDrop(args) => {
            let cfg = sweep_config(&args.common);
            cfg.validate()?;
            let full = load_interactions(&cfg.data, cfg.format)?;
            let data = Prepared::new(&full, &cfg.split)?;
            let (result, rows) = compare_drop(&cfg, &data, &args.drop_save_ratio, args.drop_get_low)?;
            write_comparison(&args.table, &rows)?;
            for r in &rows {
                println!("dim {} {}: {:.5}", r.dim, r.variant, r.ndcg);
            }
            println!("trained {} points, {} failed", result.trained, result.failures.len());
            Ok(result.all_completed())
        }
        Command::Classify(args) => {
            let curve: Vec<(usize, f64)> = match (&args.input, &args.values) {
                (Some(path), _) => mean_curve(&load_records(path)?, &args.variant),
                (None, Some(values)) => {
                    if values.len() > args.dims.0.len() {
                        return Err(SweepError::Config("more values than dimensions".into()));
                    }
                    args.dims.0.iter().copied().zip(values.iter().copied()).collect()
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            let c = classify_curve(&curve, &args.flags.options())?;
            println!("{}", c.variant);
            println!("peaks: {:?}", c.evidence.peaks);
            println!("log fit: slope {:.6}, R² {:.4}", c.evidence.log_slope, c.evidence.r_squared);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
