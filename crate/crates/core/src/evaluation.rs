//! Appearance and geometry metrics: PSNR, SSIM and Chamfer distance, plus
//! the end-to-end reconstruction evaluation.

use candle_core::{DType, Tensor};
use rstar::RTree;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{surface_samples, Dataset, DatasetRecord, ImageRgb};
use crate::denoiser::{BoundDenoiser, Denoiser, Mode};
use crate::diffusion::{clean_mask, gaussian_tensor, q_sample, sample_loop, Condition, NoiseSchedule, ViewShape};
use crate::error::{Error, Result};
use crate::geometry::{circle_viewpoints, normalize_poses_with_transform, Camera, CameraPose, Vec3};
use crate::nerf::extract_mesh;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

fn check_same_size(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_same_size(a, b)?;
    let n = (a.pixels.len() * 3) as f64;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio with peak 1; identical images give [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|k| {
            let (i, j) = ((k / SSIM_WINDOW) as f64, (k % SSIM_WINDOW) as f64);
            (-((i - c).powi(2) + (j - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

fn luminance(img: &ImageRgb) -> Vec<f64> {
    img.pixels
        .iter()
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect()
}

/// Mean structural similarity of the luminance channels over every fully
/// contained 11x11 Gaussian window.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_same_size(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let (ya, yb) = (luminance(a), luminance(b));
    let w = gaussian_window();
    let width = a.width;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=a.height - SSIM_WINDOW {
        for x in 0..=width - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = (y + i) * width + x + j;
                    let wk = w[i * SSIM_WINDOW + j];
                    let (pa, pb) = (ya[k], yb[k]);
                    ma += wk * pa;
                    mb += wk * pb;
                    saa += wk * pa * pa;
                    sbb += wk * pb * pb;
                    sab += wk * pa * pb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn mean_nearest_sq(from: &[Vec3], to: &[Vec3]) -> f64 {
    let tree = RTree::bulk_load(to.iter().map(|p| [p.x, p.y, p.z]).collect());
    let sum: f64 = from
        .iter()
        .map(|p| {
            let q = tree.nearest_neighbor(&[p.x, p.y, p.z]).expect("non-empty tree");
            (p.x - q[0]).powi(2) + (p.y - q[1]).powi(2) + (p.z - q[2]).powi(2)
        })
        .sum();
    sum / from.len() as f64
}

/// Symmetric Chamfer distance: mean squared nearest-neighbour distance from
/// `a` to `b` plus the same from `b` to `a`.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Shape("chamfer distance needs non-empty point sets".into()));
    }
    Ok(mean_nearest_sq(a, b) + mean_nearest_sq(b, a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub num_inference_steps: usize,
    /// Evaluation views per scene besides the conditioning view.
    pub holdout_views: usize,
    pub mesh_resolution: usize,
    pub density_threshold: f64,
    pub chamfer_points: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_inference_steps: 50,
            holdout_views: 20,
            mesh_resolution: 64,
            density_threshold: 5.0,
            chamfer_points: 16384,
            guidance_scale: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub seed: u64,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    /// `None` when the extracted mesh is empty.
    pub chamfer: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub chamfer: Option<f64>,
    pub scenes: Vec<SceneMetrics>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl MetricReport {
    pub fn from_scenes(scenes: Vec<SceneMetrics>) -> Self {
        Self {
            psnr_db: mean_of(scenes.iter().map(|s| s.psnr_db)),
            ssim: mean_of(scenes.iter().map(|s| s.ssim)),
            chamfer: mean_of(scenes.iter().map(|s| s.chamfer)),
            scenes,
        }
    }

    pub fn failures(&self) -> Vec<&SceneMetrics> {
        self.scenes.iter().filter(|s| s.error.is_some()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per scene keyed by seed, then the mean row. Missing values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene,psnr_db,ssim,chamfer\n");
        for s in &self.scenes {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.seed,
                fmt_opt(s.psnr_db),
                fmt_opt(s.ssim),
                fmt_opt(s.chamfer)
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            fmt_opt(self.psnr_db),
            fmt_opt(self.ssim),
            fmt_opt(self.chamfer)
        ));
        out
    }
}

/// Images in diffusion space `[V, H, W, 3]` back to `[0, 1]` pictures.
pub fn tensor_to_images(x: &Tensor) -> Result<Vec<ImageRgb>> {
    let v = x.dims()[0];
    let unit = ((x + 1.0)? * 0.5)?;
    (0..v).map(|i| ImageRgb::from_tensor(&unit.get(i)?)).collect()
}

pub fn images_to_tensor(images: &[ImageRgb], dtype: DType) -> Result<Tensor> {
    let t = images
        .iter()
        .map(|i| i.to_tensor(dtype))
        .collect::<Result<Vec<_>>>()?;
    Ok(((Tensor::stack(&t, 0)? * 2.0)? - 1.0)?)
}

/// Mean PSNR of the one-shot x0 estimate on the first `num_views` views of
/// each record, noised to timestep `t` with noise drawn from `seed`.
pub fn denoise_psnr(model: &Denoiser, records: &[DatasetRecord], t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    let k = model.config().num_views;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for record in records {
        if record.views.len() < k {
            return Err(Error::Config(format!("scene {} has fewer than {k} views", record.scene.seed)));
        }
        let views = &record.views[..k];
        let poses: Vec<CameraPose> = views.iter().map(|v| v.camera.pose).collect();
        let (poses, _) = normalize_poses_with_transform(&poses, 0)?;
        let cameras: Vec<Camera> = views
            .iter()
            .zip(poses)
            .map(|(v, p)| Camera::new(v.camera.intrinsics, p))
            .collect();
        let truth: Vec<ImageRgb> = views.iter().map(|v| v.image.clone()).collect();
        let x0 = images_to_tensor(&truth, model.dtype())?;
        let noise = gaussian_tensor(&mut rng, x0.dims(), model.dtype())?;
        let noisy = q_sample(&x0, t, &noise, schedule, &clean_mask(k, model.config().mode == Mode::Image))?;
        let text = match model.config().mode {
            Mode::Text => model.text_tokens(Some(&record.scene.caption))?,
            _ => None,
        };
        let (_, x0_hat) = model.denoise(&noisy, &cameras, text.as_ref())?;
        for (pred, gt) in tensor_to_images(&x0_hat)?.iter().zip(&truth) {
            total += psnr(pred, gt)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn evaluate_scene(model: &Denoiser, record: &DatasetRecord, schedule: &NoiseSchedule, cfg: &EvalConfig) -> Result<SceneMetrics> {
    let mcfg = model.config();
    if record.views.len() < 2 {
        return Err(Error::Config("evaluation needs a conditioning view and at least one held-out view".into()));
    }
    let held = 1 + cfg.holdout_views.min(record.views.len() - 1);
    let poses: Vec<CameraPose> = record.views[..held].iter().map(|v| v.camera.pose).collect();
    let (poses, world_to_frame) = normalize_poses_with_transform(&poses, 0)?;
    let cond = &record.views[0];
    let res = mcfg.image_resolution;
    if cond.image.width != res || cond.image.height != res {
        return Err(Error::Shape(format!(
            "scene images are {}x{}, model expects {res}x{res}",
            cond.image.width, cond.image.height
        )));
    }
    let cameras = circle_viewpoints(mcfg.num_views, 2.0, 0.0, cond.camera.intrinsics.fov_deg, res);
    let condition = match mcfg.mode {
        Mode::Image => Condition::Image(images_to_tensor(std::slice::from_ref(&cond.image), model.dtype())?.get(0)?),
        Mode::Text => Condition::Text(record.scene.caption.clone()),
        Mode::Unconditional => Condition::Unconditional,
    };
    let bound = BoundDenoiser::new(model, cameras, cfg.guidance_scale);
    let shape = ViewShape {
        views: mcfg.num_views,
        height: res,
        width: res,
    };
    let out = sample_loop(&bound, &condition, schedule, cfg.num_inference_steps, shape, model.dtype(), cfg.seed ^ record.scene.seed)?;

    let eval_cams: Vec<Camera> = record.views[1..held]
        .iter()
        .zip(&poses[1..])
        .map(|(v, p)| Camera::new(v.camera.intrinsics, *p))
        .collect();
    let renders = tensor_to_images(&model.render_views_x0(&out.scene, &eval_cams)?)?;
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for (pred, view) in renders.iter().zip(&record.views[1..held]) {
        p_sum += psnr(pred, &view.image)?;
        s_sum += ssim(pred, &view.image)?;
    }
    let n = renders.len() as f64;

    let mesh = extract_mesh(&out.scene, model.nerf(), cfg.mesh_resolution, cfg.density_threshold)?;
    let chamfer_value = if mesh.is_empty() {
        None
    } else {
        let frame_to_world = world_to_frame.inverse();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ record.scene.seed);
        let predicted: Vec<Vec3> = mesh
            .sample_surface(cfg.chamfer_points, &mut rng)
            .iter()
            .map(|p| frame_to_world.apply_point(p))
            .collect();
        let truth = surface_samples(&record.scene, cfg.chamfer_points, cfg.seed ^ record.scene.seed);
        Some(chamfer(&predicted, &truth)?)
    };
    Ok(SceneMetrics {
        seed: record.scene.seed,
        psnr_db: Some(p_sum / n),
        ssim: Some(s_sum / n),
        chamfer: chamfer_value,
        error: None,
    })
}

/// Per scene: condition on the first view, sample, render the final triplane
/// at the held-out cameras and mesh it. Scene failures are recorded in the
/// report rather than aborting the evaluation.
pub fn evaluate_reconstruction(
    model: &Denoiser,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let mut scenes = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let seed = dataset.entries[i].seed;
        let result = dataset
            .record(i)
            .and_then(|record| evaluate_scene(model, &record, schedule, cfg));
        scenes.push(result.unwrap_or_else(|e| SceneMetrics {
            seed,
            psnr_db: None,
            ssim: None,
            chamfer: None,
            error: Some(e.to_string()),
        }));
    }
    Ok(MetricReport::from_scenes(scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, v: f64) -> ImageRgb {
        ImageRgb::filled(w, h, [v; 3])
    }

    #[test]
    fn psnr_examples() {
        let a = gray(4, 4, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert_eq!(psnr(&gray(4, 4, 0.0), &gray(4, 4, 1.0)).unwrap(), 0.0);
        assert!((psnr(&gray(4, 4, 0.5), &gray(4, 4, 0.6)).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &gray(3, 4, 0.3)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let mut img = gray(16, 16, 0.0);
        for (k, p) in img.pixels.iter_mut().enumerate() {
            let v = if ((k / 16) / 2 + (k % 16) / 2) % 2 == 0 { 0.8 } else { 0.2 };
            *p = [v; 3];
        }
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-9);
        let neg = ImageRgb {
            pixels: img.pixels.iter().map(|p| p.map(|v| 1.0 - v)).collect(),
            ..img.clone()
        };
        assert!(ssim(&img, &neg).unwrap() < 0.0);
        let (v, w) = (0.3, 0.7);
        let expected = (2.0 * v * w + SSIM_C1) / (v * v + w * w + SSIM_C1);
        assert!((ssim(&gray(12, 12, v), &gray(12, 12, w)).unwrap() - expected).abs() < 1e-9);
        assert!(ssim(&gray(10, 12, v), &gray(10, 12, w)).is_err());
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Vec3::new(0.0, 0.0, 0.0)];
        let b = vec![Vec3::new(0.3, 0.4, 0.0)];
        assert!((chamfer(&a, &b).unwrap() - 2.0 * 0.25).abs() < 1e-15);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &[]).is_err());
    }

    #[test]
    fn csv_has_metric_columns() {
        let r = MetricReport::from_scenes(vec![SceneMetrics {
            seed: 4,
            psnr_db: Some(20.0),
            ssim: Some(0.5),
            chamfer: None,
            error: None,
        }]);
        let csv = r.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "scene,psnr_db,ssim,chamfer");
        assert_eq!(csv.lines().nth(1).unwrap(), "4,20.000000,0.500000,");
        assert_eq!(r.chamfer, None);
    }
}
