//! `deepscan` — the full restoration workflow as one binary:
//! simulate -> train -> predict -> evaluate -> ensemble -> bench.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use deepscan_core::data::{write_split, SplitManifest};
use deepscan_core::image::{read_mpi, read_report, write_mpi, write_report, BenchBlock, Image, MetricReport};
use deepscan_core::models::{
    load_checkpoint, predict_patch_image, predict_unet, save_checkpoint, ArchId, HeadActivation,
    Model,
};
use deepscan_core::optim::{write_loss_csv, LossKind};
use deepscan_core::pipeline::{run_training, TrainRequest};
use deepscan_core::sim::{
    make_paired_dataset, read_manifest, AcquisitionConfig, AcquisitionMode, Manifest,
};
use deepscan_core::{metrics, Result};

#[derive(Parser)]
#[command(name = "deepscan", version, about = "Deep-learning restoration of two-photon fluorescence images")]
struct Cli {
    /// Cap on worker threads (default: machine parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Power,
    Frames,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Patches,
    Unet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Mse,
    Laplace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum HeadArg {
    Linear,
    Relu,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a paired low/high-quality acquisition dataset.
    Simulate(SimulateArgs),
    /// Train one of the two restoration models on a paired dataset.
    Train(TrainArgs),
    /// Restore one image with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against ground truth (MSE + SSIM report).
    Evaluate(EvaluateArgs),
    /// Pixelwise average of two restorations.
    Ensemble(EnsembleArgs),
    /// Parameter count and median prediction latency of a checkpoint.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Read defaults from an existing dataset manifest; explicit flags win.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    power_mw: Option<f64>,
    #[arg(long)]
    ref_power_mw: Option<f64>,
    #[arg(long)]
    frames_total: Option<usize>,
    #[arg(long)]
    frames_used: Option<usize>,
    /// Expected photons per pixel at reference power for unit density.
    #[arg(long)]
    brightness: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pairs held out for testing.
    #[arg(long, default_value_t = 31)]
    test_count: usize,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Final dense activation of the patch regressor.
    #[arg(long, value_enum, default_value_t = HeadArg::Linear)]
    head: HeadArg,
    /// Patches sampled across the training images (patch method).
    #[arg(long, default_value_t = 200_000)]
    patch_count: usize,
    /// Training tile side (U-Net).
    #[arg(long, default_value_t = 128)]
    tile: usize,
    #[arg(long, default_value_t = 4)]
    tiles_per_image: usize,
    #[arg(long, default_value_t = 32)]
    base_filters: usize,
    /// Loss trace CSV path (default: `<out>.loss.csv`).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Tile side for U-Net prediction.
    #[arg(long, default_value_t = 128)]
    tile: usize,
    #[arg(long, default_value_t = 16)]
    overlap: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// SSIM dynamic range override (default: ground-truth set maximum).
    #[arg(long = "ssim-L")]
    ssim_l: Option<f64>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
    /// Report JSON to create or update with the bench block.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    tile: usize,
    #[arg(long, default_value_t = 16)]
    overlap: usize,
}

fn seed_or_env(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("DEEPSCAN_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(42)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let base: Option<Manifest> = match &args.manifest {
        Some(path) => Some(read_manifest(path)?),
        None => None,
    };
    let defaults = AcquisitionConfig::default();
    let from_base = base.map(|m| m.config());
    let config = AcquisitionConfig {
        mode: args
            .mode
            .map(|m| match m {
                ModeArg::Power => AcquisitionMode::Power,
                ModeArg::Frames => AcquisitionMode::Frames,
            })
            .or(from_base.map(|c| c.mode))
            .unwrap_or(defaults.mode),
        power_mw: args.power_mw.or(from_base.map(|c| c.power_mw)).unwrap_or(defaults.power_mw),
        ref_power_mw: args
            .ref_power_mw
            .or(from_base.map(|c| c.ref_power_mw))
            .unwrap_or(defaults.ref_power_mw),
        frames_total: args
            .frames_total
            .or(from_base.map(|c| c.frames_total))
            .unwrap_or(defaults.frames_total),
        frames_used: args
            .frames_used
            .or(from_base.map(|c| c.frames_used))
            .unwrap_or(defaults.frames_used),
        k: args.brightness.or(from_base.map(|c| c.k)).unwrap_or(defaults.k),
        seed: seed_or_env(args.seed.or(from_base.map(|c| c.seed))),
    };
    let n = args.n.or(base.map(|m| m.n_images)).unwrap_or(16);
    let width = args.width.or(base.map(|m| m.width)).unwrap_or(256);
    let height = args.height.or(base.map(|m| m.height)).unwrap_or(256);
    let channels = args.channels.or(base.map(|m| m.channels)).unwrap_or(1);

    if config.mode == AcquisitionMode::Frames && config.frames_used == config.frames_total {
        eprintln!(
            "warning: frames-used equals frames-total ({}); source and target will be identical",
            config.frames_total
        );
    }
    let summary = make_paired_dataset(&config, n, width, height, channels, &args.out)?;
    println!(
        "pairs={} mean_source={:.3} mean_target={:.3} out={}",
        summary.pairs,
        summary.mean_source,
        summary.mean_target,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut req = match args.method {
        MethodArg::Unet => TrainRequest::unet_defaults(&args.data),
        MethodArg::Patches => TrainRequest::patches_defaults(&args.data),
    };
    if let Some(e) = args.epochs {
        req.epochs = e;
    }
    req.steps_per_epoch = args.steps_per_epoch.or(match args.method {
        MethodArg::Unet => Some(30),
        MethodArg::Patches => None,
    });
    if let Some(b) = args.batch {
        req.batch_size = b;
    }
    if let Some(lr) = args.lr {
        req.lr = lr;
    }
    req.seed = seed_or_env(args.seed);
    req.test_count = args.test_count;
    if let Some(loss) = args.loss {
        req.loss = match loss {
            LossArg::Mse => LossKind::Mse,
            LossArg::Laplace => LossKind::Laplace,
        };
    }
    req.head = match args.head {
        HeadArg::Linear => HeadActivation::Linear,
        HeadArg::Relu => HeadActivation::Relu,
    };
    req.patch_count = args.patch_count;
    req.tile = args.tile;
    req.tiles_per_image = args.tiles_per_image;
    req.base_filters = args.base_filters;

    let outcome = run_training(&req)?;
    save_checkpoint(&outcome.model, &args.out)?;
    let csv_path = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    write_loss_csv(&outcome.trace, &csv_path)?;
    write_split(
        &SplitManifest { seed: outcome.split.seed, test: outcome.split.test.clone() },
        &args.data.join("split.json"),
    )?;
    println!(
        "trained={} steps={} final_loss={:.6} checkpoint={} test_held_out={}",
        match args.method {
            MethodArg::Unet => "unet",
            MethodArg::Patches => "patches",
        },
        outcome.trace.len(),
        outcome.trace.last().copied().unwrap_or(f64::NAN),
        args.out.display(),
        outcome.split.test.len()
    );
    Ok(())
}

fn run_prediction(model: &Model, image: &Image, tile: usize, overlap: usize) -> Result<(Image, f64)> {
    let start = Instant::now();
    let restored = match model.arch() {
        ArchId::Patches => predict_patch_image(model, image)?,
        ArchId::Unet => predict_unet(model, image, tile, overlap)?,
    };
    Ok((restored, start.elapsed().as_secs_f64()))
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let image = read_mpi(&args.input)?;
    let (restored, seconds) = run_prediction(&model, &image, args.tile, args.overlap)?;
    write_mpi(&restored, &args.output)?;
    println!("predict_seconds={seconds}");
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let report = metrics::evaluate_set(&args.pred, &args.gt, args.ssim_l)?;
    write_report(&report, &args.report)?;
    println!(
        "n={} mean_mse={} mean_ssim={}",
        report.images.len(),
        report.aggregate.mean_mse.map_or("null".into(), |v| format!("{v}")),
        report.aggregate.mean_ssim.map_or("null".into(), |v| format!("{v}")),
    );
    Ok(())
}

fn cmd_ensemble(args: &EnsembleArgs) -> Result<()> {
    let a = read_mpi(&args.a)?;
    let b = read_mpi(&args.b)?;
    let avg = metrics::ensemble_average(&a, &b)?;
    write_mpi(&avg, &args.output)?;
    println!("ensemble={}", args.output.display());
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    if args.repeat == 0 {
        return Err(deepscan_core::Error::InvalidConfig("--repeat must be >= 1".into()));
    }
    let model = load_checkpoint(&args.model)?;
    let image = read_mpi(&args.input)?;
    let param_count = deepscan_core::models::count_params(&model);
    let mut times = Vec::with_capacity(args.repeat);
    for _ in 0..args.repeat {
        let (_, seconds) = run_prediction(&model, &image, args.tile, args.overlap)?;
        times.push(seconds);
    }
    times.sort_by(|a, b| a.total_cmp(b));
    let median = times[times.len() / 2];
    println!("param_count={param_count}");
    println!("predict_seconds={median}");
    if let Some(report_path) = &args.report {
        let mut report = if report_path.exists() {
            read_report(report_path)?
        } else {
            MetricReport::new(vec![])
        };
        report.bench = Some(BenchBlock { param_count, predict_seconds: median });
        write_report(&report, report_path)?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ensemble(args) => cmd_ensemble(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // A second invocation (e.g. in tests) would fail; the cap is advisory.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
