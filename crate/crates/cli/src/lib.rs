//! The `uags` command-line tool.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use uags_core::dataio::formats::{read_ply, write_pfm, write_png, write_png16, write_flo, PointCloud};
use uags_core::dataio::{lint_scene, load_scene, write_synth_scene, SceneBundle, SynthSpec};
use uags_core::densify::{densify_scene, to_point_cloud, DensifyConfig};
use uags_core::evalsuite::{evaluate, metrics_csv};
use uags_core::raster::Channels;
use uags_core::scene::Camera;
use uags_core::trainer::{gradient_self_check, parse_refiner, primitives_from_cloud, Checkpoint, Trainer};
use uags_core::uncertainty::{refresh_uncertainty, UncertaintyParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.uags";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

/// Largest relative gradient error accepted by `--f64-check`.
const F64_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "uags", version, about = "Dynamic Gaussian splatting with uncertainty-aware regularization")]
pub struct Cli {
    /// Print a JSON status object on stderr when done.
    #[arg(long, global = true)]
    pub json: bool,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives strictly reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic scene with ground-truth depth, flow and masks.
    Synth {
        #[arg(long, default_value = "one-ellipsoid")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample primitives on moving regions and write them as a PLY.
    InitDynamic {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DensifyConfig::default().samples)]
        samples: usize,
        /// Flow threshold in pixels after removing camera motion.
        #[arg(long, default_value_t = DensifyConfig::default().threshold)]
        threshold: f64,
        /// Also include the scene's static point cloud.
        #[arg(long)]
        merge_static: bool,
    },
    Train(TrainArgs),
    /// Render every frame of a split from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long, value_enum, default_value_t = Channel::Color)]
        channel: Channel,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a split and write a metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Write absolute-difference images here.
        #[arg(long)]
        diff_dir: Option<PathBuf>,
    },
    Scene {
        #[command(subcommand)]
        command: SceneCommand,
    },
}

#[derive(Subcommand, Debug)]
pub enum SceneCommand {
    /// Check a scene directory and summarize it.
    Lint { dir: PathBuf },
}

/// Train a model and write a checkpoint and a JSON-lines loss log.
#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `identity`, `blur`, or a command run as `CMD <manifest.json>`.
    #[arg(long, default_value = "identity")]
    pub refiner: String,
    /// Check analytic gradients against float64 finite differences before
    /// and after training.
    #[arg(long)]
    pub f64_check: bool,
    /// Extra initial points (repeatable); the scene's own points are always used.
    #[arg(long)]
    pub init: Vec<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub ua_start: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Channel {
    Color,
    Depth,
    Flow,
    Uncertainty,
}

/// Failure of a loss term during training.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Numerical(String);

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<Numerical>().is_some() {
        return EXIT_NUMERICAL;
    }
    match err.downcast_ref::<uags_core::Error>() {
        Some(uags_core::Error::NonFiniteLoss { .. }) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn frames_of(scene: &SceneBundle, split: Split) -> &[uags_core::dataio::Frame] {
    match split {
        Split::Train => &scene.frames,
        Split::Val => &scene.validation,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Runs one parsed command and returns a JSON summary of what it did.
pub fn execute(cli: &Cli) -> Result<Value> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Synth { preset, out } => {
            let spec = SynthSpec::preset(preset)?;
            let scene = write_synth_scene(out, &spec, seed)?;
            Ok(json!({"frames": scene.frames.len(), "validation": scene.validation.len()}))
        }
        Command::InitDynamic { scene, out, samples, threshold, merge_static } => {
            let bundle = load_scene(scene)?;
            let cfg = DensifyConfig { samples: *samples, threshold: *threshold, seed, ..Default::default() };
            let result = densify_scene(&bundle, &cfg)?;
            let mut cloud = to_point_cloud(&result.prims);
            let dynamic = cloud.len();
            if *merge_static {
                if let Some(points) = &bundle.points {
                    cloud.extend(points);
                }
            }
            uags_core::dataio::formats::write_ply(out, &cloud)?;
            Ok(json!({"dynamic_points": dynamic, "points": cloud.len()}))
        }
        Command::Train(args) => train(args, cli.seed),
        Command::Render { checkpoint, scene, split, channel, out } => {
            let ck = Checkpoint::load(checkpoint)?;
            let bundle = load_scene(scene)?;
            let mut model = ck.model;
            if *channel == Channel::Uncertainty {
                let cams: Vec<Camera<f32>> = bundle.train_cameras().iter().map(|c| c.cast()).collect();
                let params = UncertaintyParams::for_views(cams.len());
                let opts = model.options(Channels::all());
                refresh_uncertainty(&mut model.prims, model.field.as_ref(), &cams, params, &opts)?;
            }
            create_dir(out)?;
            let frames = frames_of(&bundle, *split);
            for (i, f) in frames.iter().enumerate() {
                let cam = &f.camera;
                let (w, h) = (cam.width, cam.height);
                let path = |ext: &str| out.join(format!("{}.{ext}", f.id));
                match channel {
                    Channel::Color => write_png(&path("png"), &model.render_image(cam)?)?,
                    Channel::Depth => {
                        let (o, _) = model.render(cam, None, Channels { color: false, depth: true, flow: false, uncertainty: false })?;
                        write_pfm(&path("pfm"), w, h, &o.depth)?;
                    }
                    Channel::Flow => {
                        let next = frames.get(i + 1).map(|n| &n.camera);
                        let Some(next) = next else { continue };
                        let (o, _) = model.render(cam, Some(next), Channels { color: false, depth: false, flow: true, uncertainty: false })?;
                        write_flo(&path("flo"), w, h, &o.flow)?;
                    }
                    Channel::Uncertainty => {
                        let (o, _) = model.render(cam, None, Channels { color: false, depth: false, flow: false, uncertainty: true })?;
                        let u: Vec<f64> = o.uncertainty.iter().map(|v| *v as f64).collect();
                        write_png16(&path("png"), w, h, &u)?;
                    }
                }
            }
            Ok(json!({"frames": frames.len()}))
        }
        Command::Eval { checkpoint, scene, split, out, diff_dir } => {
            let ck = Checkpoint::load(checkpoint)?;
            let bundle = load_scene(scene)?;
            let frames = frames_of(&bundle, *split);
            if frames.is_empty() {
                bail!("split {split:?} of {} has no frames", scene.display());
            }
            let rows = evaluate(&ck.model, frames, diff_dir.as_deref())?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            std::fs::write(out, metrics_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
            let mean = rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len() as f64;
            Ok(json!({"frames": rows.len(), "mean_psnr": mean}))
        }
        Command::Scene { command: SceneCommand::Lint { dir } } => {
            let report = serde_json::to_value(lint_scene(dir)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report)
        }
    }
}

fn train(args: &TrainArgs, seed: Option<u64>) -> Result<Value> {
    let mut flags = Vec::new();
    if let Some(n) = args.iterations {
        flags.push(("iterations", json!(n)));
    }
    if let Some(n) = args.ua_start {
        flags.push(("ua_start", json!(n)));
    }
    if let Some(s) = seed {
        flags.push(("seed", json!(s)));
    }
    let cfg = config::resolve(args.config.as_deref(), std::env::vars(), &flags)?;
    let scene = load_scene(&args.scene)?;
    let mut cloud = scene.points.clone().unwrap_or_else(PointCloud::default);
    for p in &args.init {
        cloud.extend(&read_ply(p)?);
    }
    if cloud.is_empty() {
        bail!("no initial points: the scene has no point cloud and no --init file was given");
    }
    let init = primitives_from_cloud(&cloud, cfg.init_opacity);
    let refiner = parse_refiner(&args.refiner, &cfg.refiner)?;
    create_dir(&args.out)?;
    std::fs::write(args.out.join(RESOLVED_CONFIG_FILE), serde_json::to_string_pretty(&cfg)?)?;

    let mut trainer = Trainer::new(&scene, cfg, init, refiner)?;
    let mut checks = Vec::new();
    let mut check = |t: &Trainer| -> Result<()> {
        if args.f64_check {
            let err = gradient_self_check(&t.model, &scene.frames[0], 32, t.config.seed)?;
            log::info!("f64 gradient check at iteration {}: relative error {err:.3e}", t.iteration);
            checks.push(err);
            if !(err < F64_CHECK_TOLERANCE) {
                return Err(Numerical(format!("f64 gradient check failed: relative error {err:.3e}")).into());
            }
        }
        Ok(())
    };
    check(&trainer)?;
    let log_path = args.out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let result = trainer.run(&mut log);
    log.flush()?;
    drop(log);
    let ck_path = args.out.join(CHECKPOINT_FILE);
    if let Err(e) = result {
        let partial = args.out.join("checkpoint.failed.uags");
        trainer.checkpoint().save(&partial)?;
        return Err(anyhow::Error::new(e).context(format!("training aborted; state saved to {}", partial.display())));
    }
    trainer.checkpoint().save(&ck_path)?;
    check(&trainer)?;
    Ok(json!({
        "iterations": trainer.iteration,
        "primitives": trainer.model.prims.len(),
        "refiner_calls": trainer.refiner_calls,
        "refiner_failures": trainer.refiner_failures,
        "f64_check": checks,
        "checkpoint": ck_path,
    }))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("UAGS_LOG").try_init();
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let (code, status) = match execute(&cli) {
        Ok(summary) => (EXIT_OK, json!({"status": "ok", "code": EXIT_OK, "result": summary})),
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            (code, json!({"status": "error", "code": code, "message": format!("{e:#}")}))
        }
    };
    if cli.json {
        eprintln!("{status}");
    }
    code
}
