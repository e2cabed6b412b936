//! Forward noising of multi-view image sets, deterministic DDIM sampling from
//! x0 predictions, and classifier-free guidance.
//!
//! Image sets are `[V, H, W, 3]` tensors in the diffusion value space `[-1, 1]`.
//! Views flagged in a clean mask are carried through every operation untouched.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar must start at exactly 1".into()));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0]) || w[1] <= 0.0) {
            return Err(Error::Config("alpha_bar must be strictly decreasing and positive".into()));
        }
        Ok(Self { alpha_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn num_timesteps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Cosine schedule: `alpha_bar(t) = f(t) / f(0)`,
/// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`, built as a cumulative product
/// of per-step betas clipped at 0.999.
pub fn cosine_schedule(num_timesteps: usize) -> Result<NoiseSchedule> {
    if num_timesteps == 0 {
        return Err(Error::Config("schedule needs T >= 1".into()));
    }
    let f = |t: usize| {
        let x = (t as f64 / num_timesteps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let mut alpha_bar = Vec::with_capacity(num_timesteps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for t in 1..=num_timesteps {
        let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// Noisy views sharing one timestep.
#[derive(Debug, Clone)]
pub struct NoisyViewSet {
    pub images: Tensor,
    pub t: usize,
    pub clean_mask: Vec<bool>,
}

impl NoisyViewSet {
    pub fn num_views(&self) -> usize {
        self.clean_mask.len()
    }
}

/// Clean mask for `n` views: the first view is clean in image-conditioned mode.
pub fn clean_mask(num_views: usize, first_view_clean: bool) -> Vec<bool> {
    (0..num_views).map(|i| first_view_clean && i == 0).collect()
}

fn check_views(images: &Tensor, mask: &[bool]) -> Result<()> {
    if images.rank() != 4 || images.dims()[0] != mask.len() {
        return Err(Error::Shape(format!(
            "expected [{}, H, W, C] image set, got {:?}",
            mask.len(),
            images.dims()
        )));
    }
    Ok(())
}

/// `a * x + b * y` on noisy views; clean views are copied from `keep`.
fn blend_views(x: &Tensor, a: f64, y: &Tensor, b: f64, keep: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let blended = ((x * a)? + (y * b)?)?;
    if !mask.iter().any(|c| *c) {
        return Ok(blended);
    }
    let parts = mask
        .iter()
        .enumerate()
        .map(|(v, clean)| {
            let src = if *clean { keep } else { &blended };
            src.narrow(0, v, 1)
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` on every non-clean view.
pub fn q_sample(
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
    schedule: &NoiseSchedule,
    clean_mask: &[bool],
) -> Result<NoisyViewSet> {
    check_views(x0, clean_mask)?;
    if noise.dims() != x0.dims() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match images {:?}",
            noise.dims(),
            x0.dims()
        )));
    }
    if t > schedule.num_timesteps() {
        return Err(Error::Config(format!("timestep {t} exceeds T")));
    }
    let ab = schedule.alpha_bar(t);
    let images = blend_views(x0, ab.sqrt(), noise, (1.0 - ab).sqrt(), x0, clean_mask)?;
    Ok(NoisyViewSet {
        images,
        t,
        clean_mask: clean_mask.to_vec(),
    })
}

/// Noise implied by `x_t` and an x0 estimate.
pub fn predicted_noise(x_t: &NoisyViewSet, x0_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(x_t.t);
    if ab >= 1.0 {
        return Err(Error::Config(format!(
            "cannot recover noise at t = {} where alpha_bar = 1",
            x_t.t
        )));
    }
    Ok(((&x_t.images - (x0_hat * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
}

/// Deterministic DDIM update from `t` to `t_prev` given an x0 prediction.
pub fn ddim_step(
    x_t: &NoisyViewSet,
    x0_hat: &Tensor,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<NoisyViewSet> {
    check_views(x0_hat, &x_t.clean_mask)?;
    if t_prev >= x_t.t {
        return Err(Error::Config(format!(
            "ddim step must go backwards, got {} -> {t_prev}",
            x_t.t
        )));
    }
    let eps = predicted_noise(x_t, x0_hat, schedule)?;
    let ab_prev = schedule.alpha_bar(t_prev);
    let images = blend_views(
        x0_hat,
        ab_prev.sqrt(),
        &eps,
        (1.0 - ab_prev).sqrt(),
        &x_t.images,
        &x_t.clean_mask,
    )?;
    Ok(NoisyViewSet {
        images,
        t: t_prev,
        clean_mask: x_t.clean_mask.clone(),
    })
}

/// Classifier-free guidance in x0 space: `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(x0_cond: &Tensor, x0_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if x0_cond.dims() != x0_uncond.dims() {
        return Err(Error::Shape("guidance branches have different shapes".into()));
    }
    Ok((x0_uncond + ((x0_cond - x0_uncond)? * scale)?)?)
}

/// `(t, t_prev)` pairs of a uniformly strided descending schedule ending at 0.
pub fn inference_timesteps(num_timesteps: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps == 0 || steps > num_timesteps {
        return Err(Error::Config(format!(
            "inference steps must lie in [1, {num_timesteps}], got {steps}"
        )));
    }
    let ts: Vec<usize> = (0..steps)
        .map(|k| {
            let t = num_timesteps as f64 * (steps - k) as f64 / steps as f64;
            t.round() as usize
        })
        .collect();
    Ok(ts
        .iter()
        .enumerate()
        .map(|(k, &t)| (t, ts.get(k + 1).copied().unwrap_or(0)))
        .collect())
}

#[derive(Debug, Clone)]
pub enum Condition {
    Unconditional,
    /// Clean conditioning image `[H, W, 3]` in diffusion space, placed at view 0.
    Image(Tensor),
    Text(String),
}

/// A network mapping noisy views to an x0 estimate (in diffusion space) plus
/// whatever scene representation produced it.
pub trait Denoise {
    type Scene;

    fn denoise(&self, noisy: &NoisyViewSet, condition: &Condition) -> Result<(Self::Scene, Tensor)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewShape {
    pub views: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct SampleOutput<S> {
    /// Scene returned by the final denoiser call.
    pub scene: S,
    /// x0 prediction of the final call (the scene's renders), diffusion space.
    pub rendered: Tensor,
    /// Final sample after the last DDIM step; clean views are the inputs verbatim.
    pub images: Tensor,
    pub denoiser_calls: usize,
}

pub fn gaussian_tensor(rng: &mut ChaCha8Rng, dims: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Runs deterministic DDIM from pure noise at `t = T` down to 0.
pub fn sample_loop<D: Denoise>(
    denoiser: &D,
    condition: &Condition,
    schedule: &NoiseSchedule,
    num_inference_steps: usize,
    shape: ViewShape,
    dtype: DType,
    seed: u64,
) -> Result<SampleOutput<D::Scene>> {
    let steps = inference_timesteps(schedule.num_timesteps(), num_inference_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [shape.views, shape.height, shape.width, 3];
    let noise = gaussian_tensor(&mut rng, &dims, dtype)?;
    let (images, mask) = match condition {
        Condition::Image(img) => {
            if img.dims() != &dims[1..] {
                return Err(Error::Shape(format!(
                    "conditioning image {:?} does not match view shape {:?}",
                    img.dims(),
                    &dims[1..]
                )));
            }
            let mut parts = vec![img.to_dtype(dtype)?.unsqueeze(0)?];
            if shape.views > 1 {
                parts.push(noise.narrow(0, 1, shape.views - 1)?);
            }
            (Tensor::cat(&parts, 0)?, clean_mask(shape.views, true))
        }
        _ => (noise, clean_mask(shape.views, false)),
    };
    let mut x = NoisyViewSet {
        images,
        t: schedule.num_timesteps(),
        clean_mask: mask,
    };
    let mut last = None;
    let mut calls = 0;
    for (t, t_prev) in steps {
        x.t = t;
        let (scene, x0_hat) = denoiser.denoise(&x, condition)?;
        calls += 1;
        let check = x0_hat.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(Error::NonFinite(format!("denoiser output at t = {t}")));
        }
        x = ddim_step(&x, &x0_hat, t_prev, schedule)?;
        last = Some((scene, x0_hat));
    }
    let (scene, rendered) = last.expect("at least one step");
    Ok(SampleOutput {
        scene,
        rendered,
        images: x.images,
        denoiser_calls: calls,
    })
}
