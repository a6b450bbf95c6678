//! `mcc`: generate synthetic data, train, reconstruct and evaluate.
//!
//! Exit codes: 0 success, 1 selftest failure, 2 bad arguments or input,
//! 3 I/O failure, 4 non-finite numbers during training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use mcc_core::bundle::{read_bundle, write_bundle};
use mcc_core::config::RunConfig;
use mcc_core::eval::evaluate;
use mcc_core::geometry::build_gt_cloud;
use mcc_core::infer::{export_ply, import_ply, reconstruct, worker_count, ReconstructOptions};
use mcc_core::nn::read_checkpoint;
use mcc_core::selftest;
use mcc_core::synthdata::{
    generate_scene, object_views, render_views, scene_views, SceneMode, SceneParams, OBJECT_CAMERA_DISTANCE,
};
use mcc_core::train::{model_from_checkpoint, prepare_view, train_loop, Dataset, TrainOptions};
use mcc_core::Error;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "mcc", version, about = "Single-frame RGB-D to 3D occupancy and color")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Object,
    Scene,
}

impl From<Mode> for SceneMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Object => SceneMode::Object,
            Mode::Scene => SceneMode::Scene,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes into bundle directories plus a manifest.
    GenData {
        /// Output directory; bundles go to OUT/scene_NNNNN.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        scenes: usize,
        /// Views rendered per scene.
        #[arg(long, default_value_t = 32)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, value_enum, default_value_t = Mode::Object)]
        mode: Mode,
        /// Standard deviation of additive depth noise.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Fraction of pixels whose depth is marked unknown, in [0, 1).
        #[arg(long, default_value_t = 0.0)]
        unknown_frac: f64,
        /// Scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a bundle or a directory of bundles.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run configuration file (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss log; defaults to OUT with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop (and checkpoint) once this many steps are done.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Reconstruct occupied grid points from one frame of a bundle.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 0.1)]
        granularity: f64,
        /// Points with occupancy probability above this are kept.
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print accuracy, completeness, F1 and chamfer distance as CSV.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = mcc_core::eval::DEFAULT_RHO)]
        rho: f64,
    },
    /// Gradient, masking, labeling and metric checks at desk scale.
    Selftest,
}

/// Failure of a command, mapped to its exit code.
enum Failure {
    Core(Error),
    Checks(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::NonFinite(_) => 4,
        Error::Shape { .. } | Error::InvalidArgument(_) | Error::Parse { .. } | Error::ConfigMismatch(_) => 2,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: &Path,
    scenes: usize,
    views: usize,
    image_size: usize,
    mode: SceneMode,
    noise: f64,
    unknown_frac: f64,
    seed: u64,
) -> Result<(), Error> {
    if scenes == 0 || views == 0 || image_size == 0 {
        return Err(Error::InvalidArgument("--scenes, --views and --image-size must be positive".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("--noise {noise} must be non-negative")));
    }
    if !(0.0..1.0).contains(&unknown_frac) {
        return Err(Error::InvalidArgument(format!("--unknown-frac {unknown_frac} is outside [0, 1)")));
    }
    let params = match mode {
        SceneMode::Object => SceneParams::object(),
        SceneMode::Scene => SceneParams::scene(),
    };
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut manifest = String::from("bundle,seed\n");
    for i in 0..scenes {
        let s = seed.wrapping_add(i as u64);
        let scene = generate_scene(s, &params)?;
        let spec = match mode {
            SceneMode::Object => object_views(views, OBJECT_CAMERA_DISTANCE, image_size)?,
            SceneMode::Scene => scene_views(&scene, views, image_size, s)?,
        };
        let frames = render_views(&scene, &spec, noise, unknown_frac, &mut ChaCha8Rng::seed_from_u64(s))?;
        let name = format!("scene_{i:05}");
        write_bundle(&out.join(&name), &frames, &scene)?;
        manifest += &format!("{name},{s}\n");
    }
    write_text(&out.join("manifest.csv"), &manifest)?;
    println!("wrote {scenes} bundles to {}", out.display());
    Ok(())
}

fn train(
    data: &Path,
    config: &Path,
    out: &Path,
    resume: Option<PathBuf>,
    log: Option<PathBuf>,
    stop_after: Option<u64>,
) -> Result<(), Error> {
    let run = RunConfig::load(config)?;
    let data = Dataset::open(data)?;
    let log = log.unwrap_or_else(|| out.with_extension("csv"));
    let opts = TrainOptions {
        checkpoint: out.to_path_buf(),
        log: Some(log.clone()),
        resume,
        stop_after,
    };
    let t = Instant::now();
    let report = train_loop(&data, &run, &opts)?;
    let last = report
        .log
        .last()
        .map_or(String::new(), |r| format!(", last logged loss {:.5}", r.loss.total));
    println!(
        "trained to step {} on {} scenes in {:.1}s{last}; checkpoint {}, log {}",
        report.steps_done,
        data.len(),
        t.elapsed().as_secs_f64(),
        out.display(),
        log.display()
    );
    Ok(())
}

/// Values at the 0th, 10th, ..., 100th percentiles (nearest rank).
fn deciles(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (0..=10)
        .map(|k| v[((k * (v.len() - 1)) as f64 / 10.0).round() as usize])
        .collect()
}

fn reconstruct_cmd(
    ckpt: &Path,
    bundle: &Path,
    frame: usize,
    granularity: f64,
    threshold: f64,
    out: &Path,
) -> Result<(), Error> {
    let model = model_from_checkpoint(&read_checkpoint(ckpt)?, None)?;
    let (frames, scene) = read_bundle(bundle)?;
    if frame >= frames.len() {
        return Err(Error::InvalidArgument(format!(
            "--frame {frame} out of range ({} frames)",
            frames.len()
        )));
    }
    let gt = build_gt_cloud(&frames)?;
    let view = prepare_view(&frames, &gt, frame, scene.mode)?;
    let mut opts = ReconstructOptions::new(granularity, threshold, scene.mode);
    opts.threads = worker_count();
    let rec = reconstruct(&model, &view.input, view.norm, &opts)?;
    export_ply(&rec.denormalized(), out)?;
    let d: Vec<String> = deciles(&rec.sigma).iter().map(|s| format!("{s:.4}")).collect();
    println!("points {} of {} queries", rec.cloud.len(), rec.sigma.len());
    println!("sigma deciles {}", d.join(" "));
    println!("wrote {}", out.display());
    Ok(())
}

fn eval_cmd(pred: &Path, gt: &Path, rho: f64) -> Result<(), Error> {
    let m = evaluate(&import_ply(pred)?, &import_ply(gt)?, rho)?;
    print!("{}", m.to_csv());
    Ok(())
}

fn selftest_cmd() -> Result<(), Failure> {
    let checks = selftest::run_all(&mcc_core::config::ModelConfig::desk())?;
    let mut failed = Vec::new();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Checks(failed))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            out,
            scenes,
            views,
            image_size,
            mode,
            noise,
            unknown_frac,
            seed,
        } => gen_data(&out, scenes, views, image_size, mode.into(), noise, unknown_frac, seed)?,
        Command::Train {
            data,
            config,
            out,
            resume,
            log,
            stop_after,
        } => train(&data, &config, &out, resume, log, stop_after)?,
        Command::Reconstruct {
            ckpt,
            bundle,
            frame,
            granularity,
            threshold,
            out,
        } => reconstruct_cmd(&ckpt, &bundle, frame, granularity, threshold, &out)?,
        Command::Eval { pred, gt, rho } => eval_cmd(&pred, &gt, rho)?,
        Command::Selftest => selftest_cmd()?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Checks(names)) => {
            let _ = writeln!(std::io::stderr(), "failed checks: {}", names.join(", "));
            ExitCode::from(1)
        }
    }
}
