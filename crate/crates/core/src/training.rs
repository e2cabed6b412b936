//! Training: per-record view noising, crop rendering at input and novel
//! cameras, the reconstruction loss and a decoupled-weight-decay Adam update
//! under a warmup-then-cosine learning rate.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetRecord, ImageRgb};
use crate::denoiser::{save_checkpoint, Denoiser, Mode, ScheduleInfo};
use crate::diffusion::{clean_mask, gaussian_tensor, q_sample, NoiseSchedule, NoisyViewSet};
use crate::error::{Error, Result};
use crate::geometry::{generate_rays_in, normalize_poses, Camera, PixelRect, RayMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub num_input_views: usize,
    pub num_novel_views: usize,
    pub render_patch: usize,
    pub lambda_l2: f64,
    pub lambda_perceptual: f64,
    pub cond_drop_prob: f64,
    pub mode: Mode,
}

pub const ALLOWED_INPUT_VIEWS: [usize; 4] = [1, 2, 4, 6];

impl TrainConfig {
    /// Published optimizer settings with the desk-scale perceptual weight of 0.
    pub fn paper() -> Self {
        Self {
            learning_rate: 4e-4,
            warmup_steps: 3000,
            total_steps: 100_000,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 8,
            num_input_views: 4,
            num_novel_views: 2,
            render_patch: 64,
            lambda_l2: 1.0,
            lambda_perceptual: 0.0,
            cond_drop_prob: 0.1,
            mode: Mode::Image,
        }
    }

    /// Overfit-scale run on a handful of scenes.
    pub fn micro() -> Self {
        Self {
            warmup_steps: 50,
            total_steps: 500,
            batch_size: 1,
            render_patch: 32,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup steps {} must be below total steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !ALLOWED_INPUT_VIEWS.contains(&self.num_input_views) {
            return fail(format!("input views must be one of 1, 2, 4, 6, got {}", self.num_input_views));
        }
        if self.batch_size == 0 || self.render_patch == 0 {
            return fail("batch size and render patch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return fail(format!("conditioning drop probability {} outside [0, 1]", self.cond_drop_prob));
        }
        Ok(())
    }

    pub fn views_per_record(&self) -> usize {
        self.num_input_views + self.num_novel_views
    }
}

/// Linear warmup from 0, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.learning_rate * step as f64 / cfg.warmup_steps as f64;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay applied to every parameter.
pub struct AdamW {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

impl AdamW {
    pub fn new(vars: Vec<Var>, betas: (f64, f64), eps: f64, weight_decay: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with gradients aligned to the variable list.
    pub fn step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.vars.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.vars.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, var) in self.vars.iter().enumerate() {
            let g = &grads[i];
            let m = ((&self.m[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let theta = (var.as_tensor() * (1.0 - lr * self.weight_decay))?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(theta - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.iter() {
        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = (&*g * s)?;
        }
    }
    Ok(norm)
}

/// A perceptual distance between rendered and target crops in `[0, 1]`.
pub trait PerceptualLoss {
    /// Scalar tensor, differentiable with respect to `rendered`.
    fn loss(&self, rendered: &Tensor, target: &Tensor) -> Result<Tensor>;
}

/// The default perceptual functional: identically zero.
pub struct ZeroPerceptual;

impl PerceptualLoss for ZeroPerceptual {
    fn loss(&self, rendered: &Tensor, _target: &Tensor) -> Result<Tensor> {
        Ok(rendered.zeros_like()?.sum_all()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l2: f64,
    pub perceptual: f64,
    /// Mean squared error over the input-view crops.
    pub input_l2: f64,
    /// Mean squared error over the novel-view crops; `None` without novel views.
    pub novel_l2: Option<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `lambda_l2 * MSE + lambda_perceptual * perceptual` over `[N, h, w, 3]`
/// crops whose first `num_input` entries come from input views.
pub fn reconstruction_loss(
    rendered: &Tensor,
    target: &Tensor,
    num_input: usize,
    lambda_l2: f64,
    lambda_perceptual: f64,
    perceptual: &dyn PerceptualLoss,
) -> Result<(Tensor, LossReport)> {
    if rendered.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "rendered crops {:?} do not match targets {:?}",
            rendered.dims(),
            target.dims()
        )));
    }
    let n = rendered.dims()[0];
    if num_input == 0 || num_input > n {
        return Err(Error::Shape(format!("{num_input} input crops out of {n}")));
    }
    let sq = (rendered - target)?.sqr()?;
    let l2 = sq.mean_all()?;
    let p = perceptual.loss(rendered, target)?;
    let total = ((&l2 * lambda_l2)? + (&p * lambda_perceptual)?)?;
    let input_l2 = scalar(&sq.narrow(0, 0, num_input)?.mean_all()?)?;
    let novel_l2 = if num_input < n {
        Some(scalar(&sq.narrow(0, num_input, n - num_input)?.mean_all()?)?)
    } else {
        None
    };
    let report = LossReport {
        total: scalar(&total)?,
        l2: scalar(&l2)?,
        perceptual: scalar(&p)?,
        input_l2,
        novel_l2,
    };
    Ok((total, report))
}

/// One record prepared for a training step: noisy inputs, normalized
/// cameras for inputs followed by novel views, and their clean images.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub seed: u64,
    pub noisy: NoisyViewSet,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageRgb>,
    pub num_input: usize,
    /// Caption to condition on; `None` is the null caption in text mode.
    pub caption: Option<String>,
}

/// Draws `t`, the input/novel split, the noise and (in text mode) the
/// conditioning dropout for one record.
pub fn prepare_example(
    record: &DatasetRecord,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    dtype: DType,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    let needed = cfg.views_per_record();
    if record.views.len() < needed {
        return Err(Error::Config(format!(
            "scene {} has {} views, training needs {needed}",
            record.scene.seed,
            record.views.len()
        )));
    }
    let t = rng.random_range(1..=schedule.num_timesteps());
    let mut order: Vec<usize> = (0..record.views.len()).collect();
    order.shuffle(rng);
    order.truncate(needed);
    let poses: Vec<_> = order.iter().map(|&i| record.views[i].camera.pose).collect();
    let poses = normalize_poses(&poses, 0)?;
    let cameras: Vec<Camera> = order
        .iter()
        .zip(poses)
        .map(|(&i, p)| Camera::new(record.views[i].camera.intrinsics, p))
        .collect();
    let images: Vec<ImageRgb> = order.iter().map(|&i| record.views[i].image.clone()).collect();

    let k = cfg.num_input_views;
    let x0 = Tensor::stack(
        &images[..k]
            .iter()
            .map(|img| img.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let x0 = ((x0 * 2.0)? - 1.0)?;
    let noise = gaussian_tensor(rng, x0.dims(), dtype)?;
    let noisy = q_sample(&x0, t, &noise, schedule, &clean_mask(k, cfg.mode == Mode::Image))?;
    let caption = match cfg.mode {
        Mode::Text if rng.random::<f64>() >= cfg.cond_drop_prob => Some(record.scene.caption.clone()),
        _ => None,
    };
    Ok(TrainingExample {
        seed: record.scene.seed,
        noisy,
        cameras,
        images,
        num_input: k,
        caption,
    })
}

/// Loss of one example with a random `render_patch` crop per supervised view.
pub fn example_loss(
    model: &Denoiser,
    example: &TrainingExample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    perceptual: &dyn PerceptualLoss,
) -> Result<(Tensor, LossReport)> {
    let text = match (&example.caption, cfg.mode) {
        (Some(c), _) => model.text_tokens(Some(c))?,
        (None, Mode::Text) => model.text_tokens(None)?,
        (None, _) => None,
    };
    let triplane = model.reconstruct(
        &example.noisy,
        &example.cameras[..example.num_input],
        text.as_ref(),
    )?;
    let mut rays: Vec<RayMap> = Vec::with_capacity(example.cameras.len());
    let mut targets = Vec::with_capacity(example.cameras.len());
    for (cam, img) in example.cameras.iter().zip(&example.images) {
        let p = cfg.render_patch.min(img.width).min(img.height);
        let x = rng.random_range(0..=img.width - p);
        let y = rng.random_range(0..=img.height - p);
        let rect = PixelRect {
            x,
            y,
            width: p,
            height: p,
        };
        rays.push(generate_rays_in(&cam.intrinsics, &cam.pose, rect)?);
        targets.push(img.crop(x, y, p, p).to_tensor(model.dtype())?);
    }
    let refs: Vec<&RayMap> = rays.iter().collect();
    let renders = model.render(&triplane, &refs, Some(rng))?;
    let rendered = Tensor::stack(&renders.into_iter().map(|r| r.rgb).collect::<Vec<_>>(), 0)?;
    let target = Tensor::stack(&targets, 0)?;
    let (loss, report) = reconstruction_loss(
        &rendered,
        &target,
        example.num_input,
        cfg.lambda_l2,
        cfg.lambda_perceptual,
        perceptual,
    )?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss for scene seed {} at t = {}",
            example.seed, example.noisy.t
        )));
    }
    Ok((loss, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossReport,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Gradients of `loss` for every variable, zeros where it does not depend on one.
fn gradients(loss: &Tensor, vars: &[Var]) -> Result<Vec<Tensor>> {
    let store = loss.backward()?;
    vars.iter()
        .map(|v| match store.get(v.as_tensor()) {
            Some(g) => Ok(g.clone()),
            None => Ok(v.as_tensor().zeros_like()?),
        })
        .collect()
}

fn average(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let novel: Vec<f64> = reports.iter().filter_map(|r| r.novel_l2).collect();
    LossReport {
        total: mean(&|r| r.total),
        l2: mean(&|r| r.l2),
        perceptual: mean(&|r| r.perceptual),
        input_l2: mean(&|r| r.input_l2),
        novel_l2: (!novel.is_empty()).then(|| novel.iter().sum::<f64>() / novel.len() as f64),
    }
}

/// One optimizer update over `batch`, with gradients averaged across records.
/// `step` is the 0-based index of this update in the schedule.
pub fn train_step(
    model: &Denoiser,
    opt: &mut AdamW,
    batch: &[DatasetRecord],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    step: u64,
    rng: &mut ChaCha8Rng,
    perceptual: &dyn PerceptualLoss,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    if cfg.mode != model.config().mode {
        return Err(Error::Config(format!(
            "training mode {} does not match model mode {}",
            cfg.mode.name(),
            model.config().mode.name()
        )));
    }
    if cfg.num_input_views != model.config().num_views {
        return Err(Error::Config(format!(
            "training uses {} input views, model expects {}",
            cfg.num_input_views,
            model.config().num_views
        )));
    }
    let vars = model.store().vars();
    let mut sum: Option<Vec<Tensor>> = None;
    let mut reports = Vec::with_capacity(batch.len());
    for record in batch {
        let example = prepare_example(record, cfg, schedule, model.dtype(), rng)?;
        let (loss, report) = example_loss(model, &example, cfg, rng, perceptual)?;
        let grads = gradients(&(loss / batch.len() as f64)?, &vars)?;
        sum = Some(match sum {
            None => grads,
            Some(acc) => acc
                .iter()
                .zip(&grads)
                .map(|(a, g)| Ok((a + g)?))
                .collect::<Result<Vec<_>>>()?,
        });
        reports.push(report);
    }
    let mut grads = sum.expect("non-empty batch");
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip)?;
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at step {step}")));
    }
    // Zero-based step n completes update n + 1; the warmup starts above zero.
    let lr = lr_at(step + 1, cfg);
    opt.step(&grads, lr)?;
    Ok(StepReport {
        loss: average(&reports),
        lr,
        grad_norm,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub input_l2: f64,
    pub novel_l2: Option<f64>,
    pub grad_norm: f64,
}

pub const TRAIN_LOG: &str = "train_log.jsonl";
/// Wall-clock times live in their own file so the training log itself is
/// reproducible byte for byte.
pub const TIMING_LOG: &str = "timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Save `step_{n:06}.ckpt` every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Embedded verbatim in every checkpoint header.
    pub run_config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub log: Vec<LogEntry>,
    pub checkpoints: Vec<PathBuf>,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Full training run from step 0 to `cfg.total_steps`, sampling batches of
/// records uniformly with replacement.
pub fn run_training(
    model: &Denoiser,
    dataset: &Dataset,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    opts: &RunOptions,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<RunSummary> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset has no scenes".into()));
    }
    let records = (0..dataset.len())
        .map(|i| dataset.record(i))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let log_path = opts.out_dir.join(TRAIN_LOG);
    let timing_path = opts.out_dir.join(TIMING_LOG);
    for p in [&log_path, &timing_path] {
        std::fs::write(p, "").map_err(|e| Error::io(p, e))?;
    }
    let mut opt = AdamW::new(model.store().vars(), cfg.betas, cfg.adam_eps, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let schedule_info = ScheduleInfo::cosine(schedule.num_timesteps());
    let start = Instant::now();
    let mut summary = RunSummary {
        log: Vec::new(),
        checkpoints: Vec::new(),
    };
    for step in 0..cfg.total_steps {
        let batch: Vec<DatasetRecord> = (0..cfg.batch_size)
            .map(|_| records[rng.random_range(0..records.len())].clone())
            .collect();
        let report = train_step(model, &mut opt, &batch, cfg, schedule, step, &mut rng, &ZeroPerceptual)?;
        let entry = LogEntry {
            step: step + 1,
            lr: report.lr,
            total: report.loss.total,
            l2: report.loss.l2,
            perceptual: report.loss.perceptual,
            input_l2: report.loss.input_l2,
            novel_l2: report.loss.novel_l2,
            grad_norm: report.grad_norm,
        };
        let line = serde_json::to_string(&entry).map_err(|e| Error::format(&log_path, e))?;
        append_line(&log_path, &line)?;
        append_line(
            &timing_path,
            &serde_json::json!({"step": entry.step, "wall_time_s": start.elapsed().as_secs_f64()}).to_string(),
        )?;
        on_step(&entry);
        summary.log.push(entry);
        let done = step + 1;
        if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 && done < cfg.total_steps {
            let path = opts.out_dir.join(format!("step_{done:06}.ckpt"));
            save_checkpoint(&path, model.store(), opts.run_config.clone(), done, schedule_info.clone())?;
            summary.checkpoints.push(path);
        }
    }
    let path = opts.out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&path, model.store(), opts.run_config.clone(), cfg.total_steps, schedule_info)?;
    summary.checkpoints.push(path);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(cfg.warmup_steps, &cfg), 4e-4);
        assert!(lr_at(cfg.total_steps, &cfg).abs() < 1e-12);
        assert!((lr_at(cfg.warmup_steps / 2, &cfg) - 2e-4).abs() < 1e-15);
        let mid = cfg.warmup_steps + (cfg.total_steps - cfg.warmup_steps) / 2;
        assert!((lr_at(mid, &cfg) - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::micro();
        cfg.validate().unwrap();
        cfg.num_input_views = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::micro();
        cfg.warmup_steps = cfg.total_steps;
        assert!(cfg.validate().is_err());
    }

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn loss_examples() {
        let ones = Tensor::ones((2, 2, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let (_, r) = reconstruction_loss(&ones, &ones, 1, 1.0, 0.0, &ZeroPerceptual).unwrap();
        assert_eq!(r.total, 0.0);
        let (_, r) = reconstruction_loss(&zeros, &ones, 1, 1.0, 0.0, &ZeroPerceptual).unwrap();
        assert_eq!(r.total, 1.0);
        assert_eq!(r.novel_l2, Some(1.0));
        let (_, r) = reconstruction_loss(&zeros, &ones, 2, 1.0, 0.0, &ZeroPerceptual).unwrap();
        assert_eq!(r.novel_l2, None);

        struct Quarter;
        impl PerceptualLoss for Quarter {
            fn loss(&self, rendered: &Tensor, _: &Tensor) -> Result<Tensor> {
                Ok((rendered.zeros_like()?.sum_all()? + 0.25)?)
            }
        }
        let half = (&ones * 0.5f64.sqrt()).unwrap();
        let (_, r) = reconstruction_loss(&half, &zeros, 1, 1.0, 2.0, &Quarter).unwrap();
        assert!((r.l2 - 0.5).abs() < 1e-12);
        assert!((r.total - 1.0).abs() < 1e-12);
        assert!((r.total - (r.l2 + 2.0 * r.perceptual)).abs() < 1e-6);
        assert!(reconstruction_loss(&ones, &t(&[1.0], &[1]), 1, 1.0, 0.0, &ZeroPerceptual).is_err());
    }

    #[test]
    fn adamw_matches_reference_on_quadratic() {
        // f(x) = (x - 3)^2, gradient 2 (x - 3).
        let var = Var::from_tensor(&t(&[0.5], &[1])).unwrap();
        let mut opt = AdamW::new(vec![var.clone()], (0.9, 0.95), 1e-8, 0.05).unwrap();
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for k in 1..=50 {
            let lr = 0.01 * (1.0 + (k as f64 * 0.1).sin());
            let g = 2.0 * (x - 3.0);
            let gt = t(&[g], &[1]);
            opt.step(&[gt], lr).unwrap();
            x *= 1.0 - lr * 0.05;
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.95f64.powi(k));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            let got = var.as_tensor().to_vec1::<f64>().unwrap()[0];
            assert!((got - x).abs() < 1e-10, "step {k}: {got} vs {x}");
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![t(&[3.0], &[1]), t(&[4.0], &[1])];
        let n = clip_grad_norm(&mut g, 1.0).unwrap();
        assert_eq!(n, 5.0);
        let a = g[0].to_vec1::<f64>().unwrap()[0];
        let b = g[1].to_vec1::<f64>().unwrap()[0];
        assert!(((a * a + b * b).sqrt() - 1.0).abs() < 1e-12);
        let mut small = vec![t(&[0.3], &[1])];
        clip_grad_norm(&mut small, 1.0).unwrap();
        assert_eq!(small[0].to_vec1::<f64>().unwrap()[0], 0.3);
    }
}
