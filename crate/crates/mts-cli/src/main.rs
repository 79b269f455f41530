//! Command-line front end for the move-to-see toolkit.
//!
//! One binary, five subcommands — `gen-data`, `train`, `servo`, `eval`,
//! `render` — wired so that pipeline stages communicate only through the
//! documented file formats. Every artifact embeds the effective
//! configuration and seeds, and identical command lines produce
//! byte-identical outputs (including with `--threads` > 1: parallel workers
//! compute pure per-item results that are reassembled in order).
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use mts_core::dataset::{
    generate_dataset_with, manifest_path, plan_training_scenes, read_dataset, write_dataset,
    GenConfig,
};
use mts_core::deep::run_deep;
use mts_core::eval::{
    assemble_report, plan_trials, report_csv, report_json, run_trial, EvalConfig, Series,
};
use mts_core::nn::{load_model, save_model, train, write_loss_csv, Model, ModelShape, TrainConfig};
use mts_core::render::{render_color, write_ppm};
use mts_core::scene::sample_scene;
use mts_core::servo::{run_baseline, start_pose, SimConfig, TrajectoryRecord};

#[derive(Parser)]
#[command(
    name = "mts",
    version,
    about = "Move-to-see visual servoing toolkit: generate occluded-fruit datasets, train the single-camera gradient regressor, run servo trajectories, and evaluate the learned controller against the camera-array baseline."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run baseline trajectories on eligible random scenes and write the
    /// harvested (image, gradient) dataset with its sidecar manifest.
    GenData(GenDataArgs),
    /// Train the convolutional gradient regressor on a generated dataset;
    /// writes the model JSON and a per-epoch loss CSV next to it.
    Train(TrainArgs),
    /// Run one servo trajectory (baseline camera array or learned
    /// single-camera controller) on the first eligible scene of the seed's
    /// scene stream and write the trajectory JSON.
    Servo(ServoArgs),
    /// Run paired deep-vs-baseline trials and write the series report.
    Eval(EvalArgs),
    /// Render the start view of the scene drawn from a seed to a binary PPM.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of eligible trajectories to record.
    #[arg(long, default_value_t = 55)]
    trajectories: usize,
    /// Master seed; the scene-stream, split, and jitter seeds derive from it.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output dataset path; the manifest lands at <OUT>.manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Maximum random translation applied to training images, in pixels.
    #[arg(long, default_value_t = 0)]
    jitter: u32,
    /// Training fraction of the sample-level split.
    #[arg(long, default_value_t = 0.7)]
    split: f64,
    /// Worker threads for the per-scene trajectory runs.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset written by gen-data (requires its sidecar manifest).
    #[arg(long)]
    data: PathBuf,
    /// Output model JSON path; loss curves land at <OUT stem>.loss.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Master seed for weight init and shuffling; the documented default
    /// sub-seeds are used when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ServoArgs {
    /// Which controller drives the run.
    #[arg(long, value_enum)]
    mode: Mode,
    /// Scene-stream seed; the run uses the stream's first eligible scene.
    #[arg(long)]
    seed: u64,
    /// Trained model JSON (required for --mode deep).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output trajectory JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// 1 = nominal starts, 2 = per-component uniform start offsets.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
    series: u32,
    #[arg(long, default_value_t = 12)]
    trials: usize,
    /// Trained model JSON for the deep controller.
    #[arg(long)]
    model: PathBuf,
    /// Master seed for trial scene/start draws.
    #[arg(long, default_value_t = 99)]
    seed: u64,
    /// Output report path.
    #[arg(long)]
    out: PathBuf,
    /// Report format; csv writes the config echo to <OUT>.manifest.json.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Worker threads for the paired trials.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene seed (drawn directly, without the eligibility filter).
    #[arg(long)]
    seed: u64,
    /// Output PPM path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Baseline,
    Deep,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

/// Usage errors exit 1 like clap's own; everything else is runtime (exit 2).
enum AppError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for AppError {
    fn from(e: E) -> Self {
        AppError::Runtime(e.into())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Servo(args) => run_servo(args),
        Command::Eval(args) => run_eval(args),
        Command::Render(args) => run_render(args),
    };
    match result {
        Ok(()) => {}
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn thread_pool(threads: u32) -> Result<rayon::ThreadPool, AppError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads as usize)
        .build()
        .context("building worker thread pool")
        .map_err(AppError::from)
}

/// Creates the parent directory of an output artifact so commands can write
/// to paths like `runs/eval/series1.json` without a prior `mkdir`.
fn ensure_parent(path: &Path) -> Result<(), AppError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating output directory {}", dir.display()))?;
        }
    }
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<(), AppError> {
    let sim = SimConfig::default();
    let gen = GenConfig {
        n_trajectories: args.trajectories,
        master_seed: args.seed,
        split_ratio: args.split,
        jitter_px: args.jitter,
    };
    let run_all = |scenes: &[mts_core::scene::SceneInstance]| {
        if args.threads == 1 {
            scenes.iter().map(|scene| run_baseline(scene, &sim)).collect()
        } else {
            // Trajectories are pure per scene; an ordered parallel collect
            // is bit-identical to the serial run.
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(args.threads as usize)
                .build()
                .expect("building worker thread pool");
            pool.install(|| scenes.par_iter().map(|scene| run_baseline(scene, &sim)).collect())
        }
    };
    let outcome = generate_dataset_with(&sim, &gen, run_all)
        .context("generating dataset")?;
    ensure_parent(&args.out)?;
    write_dataset(&outcome.split, &args.out, &outcome.generation)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!(
        "wrote {} samples ({} train / {} validation) from {} trajectories ({} scenes rejected) to {}",
        outcome.split.len(),
        outcome.split.train.len(),
        outcome.split.validation.len(),
        outcome.trajectory_seeds.len(),
        outcome.rejected_scenes,
        args.out.display(),
    );
    Ok(())
}

fn loss_csv_path(model_out: &Path) -> PathBuf {
    model_out.with_extension("loss.csv")
}

fn run_train(args: TrainArgs) -> Result<(), AppError> {
    let split = read_dataset(&args.data)
        .with_context(|| format!("reading dataset {}", args.data.display()))?;
    let mut config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        ..TrainConfig::default()
    };
    if let Some(seed) = args.seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        config.shuffle_seed = rng.gen();
        config.init_seed = rng.gen();
    }
    let manifest_bytes = std::fs::read(manifest_path(&args.data))
        .with_context(|| format!("reading dataset manifest for {}", args.data.display()))?;
    let dataset_manifest: serde_json::Value =
        serde_json::from_slice(&manifest_bytes).context("parsing dataset manifest")?;
    let model = Model::new(ModelShape::default(), config.init_seed).context("initializing model")?;
    let (trained, curves) = train(model, &split, &config).context("training")?;
    let first = curves.first().expect("at least one epoch");
    let last = curves.last().expect("at least one epoch");
    let metadata = serde_json::json!({
        "train_config": config,
        "seed_flag": args.seed,
        "data_path": args.data.to_string_lossy(),
        "dataset_manifest": dataset_manifest,
        "epoch1_train_mse": first.train_mse,
        "final_train_mse": last.train_mse,
        "final_val_mse": last.val_mse,
    });
    ensure_parent(&args.out)?;
    save_model(&trained, &args.out, &metadata)
        .with_context(|| format!("writing model to {}", args.out.display()))?;
    let loss_path = loss_csv_path(&args.out);
    write_loss_csv(&curves, &loss_path)
        .with_context(|| format!("writing loss curves to {}", loss_path.display()))?;
    println!(
        "trained {} epochs: train mse {:.6} -> {:.6}; model {}, losses {}",
        curves.len(),
        first.train_mse,
        last.train_mse,
        args.out.display(),
        loss_path.display(),
    );
    Ok(())
}

fn run_servo(args: ServoArgs) -> Result<(), AppError> {
    let sim = SimConfig::default();
    let model_path = match (args.mode, &args.model) {
        (Mode::Deep, None) => {
            return Err(AppError::Usage(
                "--model is required with --mode deep (run `mts servo --help`)".into(),
            ));
        }
        (Mode::Deep, Some(p)) => Some(p.clone()),
        (Mode::Baseline, _) => None,
    };
    let (scenes, rejected) =
        plan_training_scenes(&sim, 1, args.seed).context("drawing an eligible scene")?;
    let scene = &scenes[0];
    let (mode_name, record): (&str, TrajectoryRecord) = match args.mode {
        Mode::Baseline => ("baseline", run_baseline(scene, &sim).context("running baseline servo")?),
        Mode::Deep => {
            let path = model_path.as_ref().expect("checked above");
            let (model, _) = load_model(path)
                .with_context(|| format!("loading model {}", path.display()))?;
            ("deep", run_deep(scene, &model, &sim).context("running deep servo")?)
        }
    };
    let doc = serde_json::json!({
        "config": {
            "sim": sim,
            "mode": mode_name,
            "seed": args.seed,
            "model": model_path.as_ref().map(|p| p.to_string_lossy().into_owned()),
            "scene_seed": scene.seed,
            "rejected_scenes": rejected,
        },
        "trajectory": record.export_json(),
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("trajectory serializes");
    text.push('\n');
    ensure_parent(&args.out)?;
    std::fs::write(&args.out, text)
        .with_context(|| format!("writing trajectory to {}", args.out.display()))?;
    println!(
        "{} run on scene {}: {} steps, {} (fruit {:.2}% -> {:.2}%), wrote {}",
        mode_name,
        scene.seed,
        record.moves(),
        record.termination,
        100.0 * record.start_p(),
        100.0 * record.final_p(),
        args.out.display(),
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), AppError> {
    let sim = SimConfig::default();
    let config = EvalConfig {
        series: Series::from_number(args.series).expect("clap range-checked"),
        n_trials: args.trials,
        master_seed: args.seed,
        ..EvalConfig::default()
    };
    let (model, _) = load_model(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let plans = plan_trials(&sim, &config).context("planning trials")?;
    let results: Result<Vec<_>, _> = if args.threads == 1 {
        plans.iter().map(|p| run_trial(p, &model, &sim)).collect()
    } else {
        // Trials are pure per plan; ordered parallel collect matches serial.
        let pool = thread_pool(args.threads)?;
        pool.install(|| plans.par_iter().map(|p| run_trial(p, &model, &sim)).collect())
    };
    let report = assemble_report(results.context("running trials")?, &sim, &config);
    ensure_parent(&args.out)?;
    match args.format {
        Format::Json => {
            std::fs::write(&args.out, report_json(&report))
                .with_context(|| format!("writing report to {}", args.out.display()))?;
        }
        Format::Csv => {
            std::fs::write(&args.out, report_csv(&report))
                .with_context(|| format!("writing report to {}", args.out.display()))?;
            let mut manifest = serde_json::to_string_pretty(&report.config).expect("config serializes");
            manifest.push('\n');
            let mpath = manifest_path(&args.out);
            std::fs::write(&mpath, manifest)
                .with_context(|| format!("writing report manifest to {}", mpath.display()))?;
        }
    }
    let endpoint = report.aggregates.get("endpoint_delta_mm").map(|a| a.mean);
    println!(
        "series {}: {} trials, deep fruit-large fraction {:.2}, baseline {:.2}, mean endpoint delta {} mm, wrote {}",
        report.series,
        report.n_trials,
        report.deep_fruit_large_fraction,
        report.baseline_fruit_large_fraction,
        endpoint.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}")),
        args.out.display(),
    );
    Ok(())
}

fn run_render(args: RenderArgs) -> Result<(), AppError> {
    let sim = SimConfig::default();
    let scene = sample_scene(&sim.scenario, args.seed);
    let pose = start_pose(&sim.scenario, sim.scenario.initial_ee_position);
    let image = render_color(&scene, &pose, &sim.intrinsics);
    let config = serde_json::json!({
        "sim": sim,
        "seed": args.seed,
        "scene": scene,
    });
    let comments = [format!("config: {config}")];
    let comment_refs: Vec<&str> = comments.iter().map(String::as_str).collect();
    ensure_parent(&args.out)?;
    let file = std::fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut writer = std::io::BufWriter::new(file);
    write_ppm(&image, &comment_refs, &mut writer)
        .with_context(|| format!("writing PPM to {}", args.out.display()))?;
    println!(
        "rendered scene {} start view ({}x{}) to {}",
        args.seed,
        image.width,
        image.height,
        args.out.display(),
    );
    Ok(())
}
