use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use geogcn::dataset::{
    build_split_manifest, desk_test_shapes, desk_train_shapes, ShapeKind, ShapeSpec, DEFAULT_SCALES,
};
use geogcn::filter::FilterMode;
use geogcn::pipeline::{self, PipelineConfig, Stage, TrainMode};
use geogcn::vn::VnSampleSet;
use geogcn::Error;

/// Graph-convolutional point cloud denoising.
#[derive(Debug, Parser)]
#[command(name = "geogcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic clean/noisy pairs and a manifest.
    GenData(GenDataArgs),
    /// Train both networks on the training split of a manifest.
    Train(TrainArgs),
    /// Denoise a point cloud with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Compare a denoised cloud to its clean reference.
    Eval(EvalArgs),
    /// Compare the pipeline stages on a manifest.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Shape kinds, or "desk" for the built-in four sharp-edged and four smooth shapes.
    #[arg(long, value_delimiter = ',', default_value = "desk")]
    shapes: Vec<String>,
    /// Noise levels as fractions of the bounding-box diagonal.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SCALES)]
    scales: Vec<f64>,
    #[arg(long, default_value_t = 5000)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise levels of the held-out split (desk shapes only); empty disables it.
    #[arg(long, value_delimiter = ',', default_value = "0.005")]
    test_scales: Vec<f64>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON pipeline configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    filter_iters: Option<usize>,
    #[arg(long)]
    filter_sigma: Option<f64>,
    #[arg(long)]
    filter_lambda: Option<f64>,
    #[arg(long)]
    filter_k: Option<usize>,
    /// Use scalar weights n_iᵀn_i and n_jᵀn_j instead of the normal projectors.
    #[arg(long)]
    eq5_literal: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Where to write the loss-curve report (default: next to the checkpoint).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    train_mode: Option<TrainMode>,
    /// Stage whose losses are trained.
    #[arg(long)]
    stage: Option<Stage>,
    /// Write the triangle sets of the first batch as JSON.
    #[arg(long)]
    dump_vn_samples: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "s3")]
    stage: Stage,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    denoised: PathBuf,
    #[arg(long)]
    clean: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    filter: FilterArgs,
    /// Training seeds; the report holds the cell-wise median.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Directory for per-seed checkpoints.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    Ok(cfg)
}

fn apply_filter_args(cfg: &mut PipelineConfig, f: &FilterArgs) -> Result<(), Error> {
    if let Some(v) = f.filter_iters {
        cfg.filter.iterations = v;
    }
    if let Some(v) = f.filter_sigma {
        cfg.filter.sigma = v;
    }
    if let Some(v) = f.filter_lambda {
        cfg.filter.lambda = v;
    }
    if let Some(v) = f.filter_k {
        cfg.filter.k_neighbors = v;
    }
    if f.eq5_literal {
        cfg.filter.mode = FilterMode::Scalar;
    }
    cfg.validate()
}

fn gen_data(args: &GenDataArgs) -> Result<(), Error> {
    let (train, test) = if args.shapes.len() == 1 && args.shapes[0] == "desk" {
        let test = if args.test_scales.is_empty() {
            Vec::new()
        } else {
            desk_test_shapes(args.points, args.seed)
        };
        (desk_train_shapes(args.points, args.seed), test)
    } else {
        let mut specs = Vec::new();
        for (i, name) in args.shapes.iter().enumerate() {
            let kind: ShapeKind = name.parse()?;
            let mut spec = ShapeSpec::with_defaults(
                kind,
                args.points,
                args.seed.wrapping_mul(101).wrapping_add(i as u64),
            );
            spec.name = format!("{kind}-{i}");
            specs.push(spec);
        }
        (specs, Vec::new())
    };
    let manifest = build_split_manifest(&train, &args.scales, &test, &args.test_scales, &args.out)?;
    println!(
        "wrote {} entries to {}",
        manifest.entries.len(),
        args.out.join("manifest.json").display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct VnDump<'a> {
    model: &'a str,
    seed_index: usize,
    samples: &'a VnSampleSet,
}

fn train(args: &TrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config)?;
    if let Some(mode) = args.train_mode {
        cfg.train_mode = mode;
    }
    if let Some(stage) = args.stage {
        cfg.stage = stage;
    }
    cfg.validate()?;
    let mut dumps: Vec<String> = Vec::new();
    let want_dump = args.dump_vn_samples.is_some();
    let mut observe = |event: &pipeline::PatchEvent<'_>| {
        if want_dump && event.phase == 0 && event.epoch == 0 && event.batch == 0 {
            if let Some(set) = &event.loss.vn_set {
                let dump = VnDump {
                    model: event.model,
                    seed_index: event.seed_index,
                    samples: set,
                };
                dumps.push(serde_json::to_string(&dump).expect("plain data serializes"));
            }
        }
    };
    let report = pipeline::train_observed(&args.manifest, &cfg, &args.out, &mut observe)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    report.save(&report_path)?;
    if let Some(path) = &args.dump_vn_samples {
        let text = format!("[{}]\n", dumps.join(",\n"));
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
        info!("total loss {:.6} -> {:.6}", first.total, last.total);
    }
    println!(
        "checkpoint {} report {}",
        args.out.display(),
        report_path.display()
    );
    Ok(())
}

fn denoise(args: &DenoiseArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config)?;
    apply_filter_args(&mut cfg, &args.filter)?;
    let out = pipeline::denoise(&args.input, &args.ckpt, &cfg, args.stage, &args.out)?;
    info!(
        "{} patches, coverage {}..{} per point",
        out.patches, out.min_coverage, out.max_coverage
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Error> {
    let record = pipeline::evaluate(&args.denoised, &args.clean)?;
    println!(
        "{}",
        serde_json::to_string(&record).expect("plain data serializes")
    );
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config)?;
    apply_filter_args(&mut cfg, &args.filter)?;
    let report = pipeline::ablate(&args.manifest, &cfg, &args.seeds, args.work_dir.as_deref())?;
    report.save(&args.out)?;
    let md = report.to_markdown();
    let md_path = args.out.with_extension("md");
    std::fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    print!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
