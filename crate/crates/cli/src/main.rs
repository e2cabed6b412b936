//! `tridiff`: dataset generation, training, sampling and evaluation.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use tridiff::config::{load_model, RunConfig, DEFAULT_PRESET};
use tridiff::data::{build_dataset, hstack, load_dataset, DatasetConfig, ImageRgb, DEFAULT_FOV_DEG};
use tridiff::denoiser::{BoundDenoiser, CameraConditioning, Denoiser, Mode};
use tridiff::diffusion::{cosine_schedule, sample_loop, Condition, ViewShape};
use tridiff::evaluation::{evaluate_reconstruction, images_to_tensor, tensor_to_images};
use tridiff::geometry::{orbit_position, Camera, CameraIntrinsics, CameraPose, Vec3};
use tridiff::nerf::extract_mesh;
use tridiff::training::{run_training, RunOptions};

pub const CONFIG_ENV: &str = "TRIDIFF_CONFIG";
const TURNTABLE_VIEWS: usize = 8;
const CAMERA_RADIUS: f64 = 2.0;

#[derive(Parser)]
#[command(name = "tridiff", version, about = "Multi-view diffusion with a triplane NeRF denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural dataset of primitive scenes to PNG plus a manifest.
    GenData(GenDataArgs),
    /// Train the denoiser on a generated dataset.
    Train(TrainArgs),
    /// Generate a triplane from an image, a prompt or nothing; write views and a mesh.
    Sample(SampleArgs),
    /// Reconstruct every dataset scene from its first view and score it.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines; falls back to $TRIDIFF_CONFIG.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Base preset: micro, or small-paper (the published Small model and its training recipe).
    #[arg(long)]
    preset: Option<String>,
    /// Override one configuration key, repeatable: --set learning_rate=1e-4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || self.preset.is_some() || !self.set.is_empty()
    }

    /// Preset, then file, then `--set` entries.
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path, self.preset.as_deref())?,
            None => RunConfig::preset(self.preset.as_deref().unwrap_or(DEFAULT_PRESET))?,
        };
        for entry in &self.set {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| tridiff::Error::Config(format!("--set expects KEY=VALUE, got {entry:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    scenes: usize,
    /// Random orbit cameras rendered per scene.
    #[arg(long, default_value_t = 12)]
    views: usize,
    /// Scene i is generated from seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for manifest.json and images/.
    #[arg(long)]
    out: PathBuf,
    /// Field of view in degrees; 50 is the fixed published setting.
    #[arg(long, default_value_t = DEFAULT_FOV_DEG)]
    fov: f64,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory; defaults to the configuration's data_dir.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for logs, config.json and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Input views per example, one of 1, 2, 4, 6; four is the published default.
    #[arg(long)]
    views: Option<usize>,
    /// Supervise only the input views (the published "without novel views" ablation).
    #[arg(long)]
    no_novel_supervision: bool,
    /// Camera conditioning: plucker (published pixel-aligned rays) or adaln (camera in the modulation).
    #[arg(long)]
    camera_cond: Option<String>,
    /// Conditioning mode: uncond, image or text, the three published generation modes.
    #[arg(long)]
    mode: Option<String>,
    /// Total optimizer steps; must exceed warmup_steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Root seed for initialization and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Save an intermediate checkpoint every N steps (0 keeps only final.ckpt).
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Conditioning view for image mode, taken to sit at the normalized reference camera.
    #[arg(long, conflicts_with = "prompt")]
    image: Option<PathBuf>,
    /// Caption for text mode.
    #[arg(long)]
    prompt: Option<String>,
    /// Classifier-free guidance scale in text mode; 5 is the published value.
    #[arg(long, default_value_t = 5.0)]
    cfg_scale: f64,
    /// DDIM steps; 50 is the published sampler setting.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Seed of the initial noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving view_*.png, turntable.png and mesh.obj.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
    /// Held-out views scored per scene; 20 follows the published protocol.
    #[arg(long, default_value_t = 20)]
    holdout_views: usize,
    /// DDIM steps; defaults to the checkpoint configuration.
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance scale for text-mode checkpoints; defaults to the checkpoint configuration.
    #[arg(long)]
    cfg_scale: Option<f64>,
    /// Marching-cubes grid size; defaults to the checkpoint configuration.
    #[arg(long)]
    mesh_resolution: Option<usize>,
    /// Mixed with each scene seed to seed its sampling noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err
                .chain()
                .any(|e| matches!(e.downcast_ref::<tridiff::Error>(), Some(tridiff::Error::Config(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<ExitCode> {
    println!("root seed {}", a.seed);
    let cfg = DatasetConfig {
        num_scenes: a.scenes,
        views_per_scene: a.views,
        resolution: a.resolution,
        fov_deg: a.fov,
        seed: a.seed,
    };
    let entries = build_dataset(&cfg, &a.out)?;
    let views: usize = entries.iter().map(|e| e.views.len()).sum();
    println!("wrote {} scenes, {views} views to {}", entries.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = a.config.resolve()?;
    if let Some(v) = a.views {
        cfg.set("num_views", &v.to_string())?;
    }
    if a.no_novel_supervision {
        cfg.train.num_novel_views = 0;
    }
    if let Some(c) = &a.camera_cond {
        cfg.model.camera_cond = CameraConditioning::parse(c)?;
    }
    if let Some(m) = &a.mode {
        cfg.set("mode", m)?;
    }
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    if let Some(d) = &a.data {
        cfg.data_dir = Some(d.display().to_string());
    }
    cfg.validate()?;
    let data_dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| tridiff::Error::Config("no dataset: pass --data or set data_dir".into()))?;
    println!("root seed {}", cfg.seed);

    let dataset = load_dataset(Path::new(&data_dir)).context("loading dataset")?;
    let model = Denoiser::new(&cfg.model, DType::F32, cfg.seed)?;
    let schedule = cosine_schedule(cfg.num_timesteps)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let config_json = serde_json::to_string_pretty(&cfg.to_json())?;
    std::fs::write(a.out.join("config.json"), config_json + "\n")?;
    let opts = RunOptions {
        out_dir: a.out.clone(),
        checkpoint_every: cfg.checkpoint_every,
        // Batch sampling gets its own stream, distinct from initialization.
        seed: cfg.seed.wrapping_add(1),
        run_config: cfg.to_json(),
    };
    let total = cfg.train.total_steps;
    let summary = run_training(&model, &dataset, &cfg.train, &schedule, &opts, |e| {
        if e.step == 1 || e.step % 10 == 0 || e.step == total {
            println!("step {:>6}  loss {:.5}  lr {:.2e}  grad {:.3}", e.step, e.total, e.lr, e.grad_norm);
        }
    })?;
    for c in &summary.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Cameras on the sampling circle, `n` azimuths starting at `offset` radians.
fn ring(n: usize, offset: f64, intrinsics: CameraIntrinsics) -> Vec<Camera> {
    (0..n)
        .map(|k| {
            let azimuth = offset + 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let position = orbit_position(CAMERA_RADIUS, azimuth, 0.0);
            Camera::new(intrinsics, CameraPose::look_at(position, Vec3::zeros()))
        })
        .collect()
}

fn sample(a: SampleArgs) -> anyhow::Result<ExitCode> {
    let expected = if a.config.given() { Some(a.config.resolve()?) } else { None };
    let loaded = load_model(&a.checkpoint, expected.as_ref()).context("loading checkpoint")?;
    let (cfg, model) = (&loaded.config, &loaded.model);
    println!("root seed {}", a.seed);
    let res = cfg.model.image_resolution;
    let condition = match (cfg.model.mode, &a.image, &a.prompt) {
        (Mode::Image, Some(path), None) => {
            let img = ImageRgb::load_png(path)?;
            if img.width != res || img.height != res {
                return Err(tridiff::Error::Config(format!(
                    "conditioning image is {}x{}, the checkpoint expects {res}x{res}",
                    img.width, img.height
                ))
                .into());
            }
            Condition::Image(images_to_tensor(&[img], DType::F32)?.get(0)?)
        }
        (Mode::Text, None, Some(prompt)) => Condition::Text(prompt.clone()),
        (Mode::Unconditional, None, None) => Condition::Unconditional,
        (mode, _, _) => {
            let need = match mode {
                Mode::Image => "--image",
                Mode::Text => "--prompt",
                Mode::Unconditional => "neither --image nor --prompt",
            };
            return Err(tridiff::Error::Config(format!("checkpoint was trained in {} mode and needs {need}", mode.name())).into());
        }
    };
    let intrinsics = CameraIntrinsics::square(DEFAULT_FOV_DEG, res);
    let views = cfg.model.num_views;
    let bound = BoundDenoiser::new(model, ring(views, 0.0, intrinsics), a.cfg_scale);
    let shape = ViewShape {
        views,
        height: res,
        width: res,
    };
    let schedule = cosine_schedule(cfg.num_timesteps)?;
    let out = sample_loop(&bound, &condition, &schedule, a.steps, shape, DType::F32, a.seed)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (k, img) in tensor_to_images(&out.images)?.iter().enumerate() {
        img.save_png(&a.out.join(format!("view_{k}.png")))?;
    }
    // Offset by half a turntable step so no frame repeats a sampling view.
    let offset = std::f64::consts::PI / TURNTABLE_VIEWS as f64;
    let turntable = model.render_views_x0(&out.scene, &ring(TURNTABLE_VIEWS, offset, intrinsics))?;
    hstack(&tensor_to_images(&turntable)?).save_png(&a.out.join("turntable.png"))?;
    let mesh = extract_mesh(&out.scene, model.nerf(), cfg.eval.mesh_resolution, cfg.eval.density_threshold)?;
    mesh.save_obj(&a.out.join("mesh.obj"))?;
    println!(
        "{} denoiser calls; wrote {views} views, turntable and mesh ({} vertices) to {}",
        out.denoiser_calls,
        mesh.vertices.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let expected = if a.config.given() { Some(a.config.resolve()?) } else { None };
    let loaded = load_model(&a.checkpoint, expected.as_ref()).context("loading checkpoint")?;
    let mut ecfg = loaded.config.eval.clone();
    ecfg.holdout_views = a.holdout_views;
    ecfg.seed = a.seed;
    if let Some(s) = a.steps {
        ecfg.num_inference_steps = s;
    }
    if let Some(g) = a.cfg_scale {
        ecfg.guidance_scale = g;
    }
    if let Some(r) = a.mesh_resolution {
        ecfg.mesh_resolution = r;
    }
    println!("root seed {}", a.seed);
    let dataset = load_dataset(&a.data).context("loading dataset")?;
    let schedule = cosine_schedule(loaded.config.num_timesteps)?;
    let report = evaluate_reconstruction(&loaded.model, &dataset, &schedule, &ecfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("report.json"), report.to_json())?;
    std::fs::write(a.out.join("report.csv"), report.to_csv())?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} scenes: psnr_db {}  ssim {}  chamfer {}",
        report.scenes.len(),
        fmt(report.psnr_db),
        fmt(report.ssim),
        fmt(report.chamfer)
    );
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &failures {
        eprintln!("scene {} failed: {}", f.seed, f.error.as_deref().unwrap_or("unknown error"));
    }
    bail!("{} of {} scenes failed", failures.len(), report.scenes.len())
}
