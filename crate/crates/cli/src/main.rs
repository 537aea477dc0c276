use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mf_core::conditioning::{build_control_package, read_spec, ConditioningOptions};
use mf_core::io::{read_frames, write_frames};
use mf_core::metrics::{aggregate_csv, evaluate, format_summary, EvalMode};
use mf_core::synth::{make_dataset, read_annotation, CameraMotion, DatasetOptions};
use mf_dit::eval::{evaluate_clips, load_dataset, mean_shift_error};
use mf_dit::generate::DEFAULT_STEPS;
use mf_dit::train::{load_training_set, read_run_config, Stage, CONFIG_FILE};
use mf_dit::{generate_from_spec, load_model, train, Branches, RunConfig};

use mf_cli::server::{serve, AppState, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "motionflow", version, about = "Camera and object motion control for a toy video generator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset of annotated clips.
    Synth(SynthArgs),
    /// Build the conditioning package for a control spec.
    Condition(ConditionArgs),
    /// Train a model on a synthetic dataset, resuming if interrupted.
    Train(TrainArgs),
    /// Generate frames for a control spec.
    Generate(GenerateArgs),
    /// Score videos against their control specs.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 17)]
    frames: usize,
    /// Frame width and height.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Restrict camera motion, e.g. `--camera pan --camera orbit`.
    #[arg(long, value_parser = parse_camera)]
    camera: Vec<CameraMotion>,
}

fn parse_camera(s: &str) -> Result<CameraMotion, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| "expected one of static, pan, dolly, orbit, random-smooth".to_string())
}

#[derive(Args)]
struct ConditionArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Temporal downsampling of the latent-rate outputs.
    #[arg(long, default_value_t = 4)]
    stride: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory for config, checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; defaults are used for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Steps for the base, camera and object stages.
    #[arg(long, num_args = 3, value_names = ["BASE", "CAMERA", "OBJECT"])]
    steps: Option<Vec<u64>>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train the camera branch on Plücker rays alone.
    #[arg(long)]
    no_pcd: bool,
    /// Start from these weights instead of the initializer.
    #[arg(long)]
    init_weights: Option<PathBuf>,
    /// Stop after this many total steps; rerun to continue.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct BranchFlags {
    /// Disable the camera branch.
    #[arg(long)]
    no_camera: bool,
    /// Disable the object branch.
    #[arg(long)]
    no_object: bool,
}

impl BranchFlags {
    fn branches(&self) -> Branches {
        Branches {
            vcm: !self.no_camera,
            omm: !self.no_object,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Training run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Weights file overriding the run's final weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[command(flatten)]
    branches: BranchFlags,
    /// Also encode `video.mp4` with ffmpeg, if it is installed.
    #[arg(long)]
    mp4: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Spec of a single video.
    #[arg(long, requires_all = ["video", "ann"], conflicts_with_all = ["checkpoint", "data"])]
    spec: Option<PathBuf>,
    /// Frame directory of that video.
    #[arg(long)]
    video: Option<PathBuf>,
    /// Ground-truth annotation of that video.
    #[arg(long)]
    ann: Option<PathBuf>,
    /// Treat the video as ground truth and also score the camera path.
    #[arg(long)]
    ground_truth: bool,
    /// Generate every clip of `--data` with this run and score it.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[command(flatten)]
    branches: BranchFlags,
    /// Write per-clip CSV and generated frames here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Artifact root; `MF_DATA_DIR`, else `./mf-data`.
    #[arg(long, env = "MF_DATA_DIR", default_value = "mf-data")]
    data_dir: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Cmd::Synth(a) => synth(a),
        Cmd::Condition(a) => condition(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Generate(a) => run_generate(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Serve(a) => {
            std::fs::create_dir_all(&a.data_dir).with_context(|| format!("creating {}", a.data_dir.display()))?;
            let state = AppState::new(a.data_dir.clone(), a.workers);
            eprintln!("serving {} on port {}", a.data_dir.display(), a.port);
            tokio::runtime::Runtime::new()?.block_on(serve(state, a.port))?;
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut opts = DatasetOptions {
        num_frames: a.frames,
        width: a.size,
        height: a.size,
        focal: a.size as f64,
        ..DatasetOptions::default()
    };
    if !a.camera.is_empty() {
        opts.camera_families = a.camera;
    }
    let index = make_dataset(a.count, a.seed, &a.out, &opts)?;
    println!("{} clips in {}", index.clips.len(), a.out.display());
    Ok(())
}

fn spec_dir(spec: &Path) -> PathBuf {
    spec.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn condition(a: ConditionArgs) -> Result<()> {
    let spec = read_spec(&a.spec)?;
    let opts = ConditioningOptions {
        stride: a.stride,
        ..ConditioningOptions::default()
    };
    let pkg = build_control_package(&spec, &spec_dir(&a.spec), &opts)?;
    pkg.write_to_dir(&a.out)?;
    println!("wrote conditioning for {} frames to {}", pkg.num_frames, a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut run: RunConfig = match (&a.config, read_run_config(&a.out)) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        // an existing run resumes with its own config unless flags change it
        (None, Ok(existing)) => existing,
        (None, Err(_)) => RunConfig::default(),
    };
    if let Some(s) = &a.steps {
        run.train.schedule = vec![(Stage::Base, s[0]), (Stage::Camera, s[1]), (Stage::Object, s[2])];
        run.train.schedule.retain(|(_, n)| *n > 0);
    }
    if let Some(b) = a.batch {
        run.train.batch = b;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if a.no_pcd {
        run.model.use_pcd = false;
    }
    if a.init_weights.is_some() {
        run.train.init_weights = a.init_weights;
    }
    let examples = load_training_set(&a.data, &run.model)?;
    let total = run.train.total_steps();
    let summary = train(&examples, &run, &a.out, a.stop_after, &mut |step, stage, loss| {
        if step % 50 == 0 || step == total {
            eprintln!("step {step}/{total} stage {} loss {loss:.5}", stage.index());
        }
    })?;
    println!(
        "{} of {} steps done in {} ({})",
        summary.completed,
        summary.total,
        a.out.display(),
        a.out.join(CONFIG_FILE).display()
    );
    Ok(())
}

fn run_generate(a: GenerateArgs) -> Result<()> {
    let spec = read_spec(&a.spec)?;
    let (model, store) = load_model(&a.checkpoint, a.weights.as_deref())?;
    let frames = generate_from_spec(&model, &store, &spec, &spec_dir(&a.spec), a.steps, a.branches.branches())?;
    write_frames(&a.out, &frames)?;
    println!("{} frames in {}", frames.len(), a.out.display());
    if a.mp4 {
        encode_mp4(&a.out)?;
    }
    Ok(())
}

fn encode_mp4(dir: &Path) -> Result<()> {
    let status = Command::new("ffmpeg")
        .args(["-y", "-loglevel", "error", "-framerate", "8", "-i"])
        .arg(dir.join("%03d.png"))
        .args(["-pix_fmt", "yuv420p", "-vf", "scale=256:-2:flags=neighbor"])
        .arg(dir.join("video.mp4"))
        .status();
    match status {
        Ok(s) if s.success() => Ok(()),
        Ok(s) => bail!("ffmpeg failed with {s}"),
        Err(_) => {
            eprintln!("ffmpeg not found; skipped video.mp4");
            Ok(())
        }
    }
}

fn run_eval(a: EvalArgs) -> Result<()> {
    if let (Some(spec), Some(video), Some(ann)) = (&a.spec, &a.video, &a.ann) {
        let spec = read_spec(spec)?;
        let frames = read_frames(video)?;
        let annotation = read_annotation(ann)?;
        let mode = if a.ground_truth { EvalMode::Conditioning } else { EvalMode::Generated };
        println!("{}", evaluate(&spec, &frames, &annotation, mode)?.to_json());
        return Ok(());
    }
    let (Some(checkpoint), Some(data)) = (&a.checkpoint, &a.data) else {
        bail!("give --spec, --video and --ann, or --checkpoint and --data");
    };
    let (model, store) = load_model(checkpoint, None)?;
    let clips = load_dataset(data)?;
    let frames_dir = a.out.as_ref().map(|o| o.join("frames"));
    let scores = evaluate_clips(&model, &store, &clips, a.steps, a.branches.branches(), frames_dir.as_deref())?;
    let reports: Vec<_> = scores.iter().map(|s| s.report.clone()).collect();
    if let Some(out) = &a.out {
        std::fs::write(out.join("metrics.csv"), aggregate_csv(&reports))
            .with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{}", format_summary(&reports));
    if let Some(e) = mean_shift_error(&scores, CameraMotion::Pan) {
        println!("pan background shift error {e:.3} px");
    }
    Ok(())
}
