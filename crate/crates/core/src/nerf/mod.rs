//! Triplane NeRF: feature planes, the density/color decoder and differentiable
//! volume rendering.

mod mc_tables;
pub mod mesh;
pub mod ops;

use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{RayMap, Vec3};
use crate::params::{Linear, LinearInit, ParamStore};

pub use mesh::{extract_isosurface, extract_mesh, TriangleMesh};
pub use ops::{composite_ray, triplane_taps, SampleLayout};

/// Three axis-aligned feature planes (XY, XZ, YZ) spanning `[-1, 1]^3`.
/// Stored channels-last as `[3, R, R, C]`; plane `p` is indexed `[p, v, u, c]`.
#[derive(Debug, Clone)]
pub struct Triplane {
    planes: Tensor,
}

impl Triplane {
    pub fn new(planes: Tensor) -> Result<Self> {
        let dims = planes.dims();
        if dims.len() != 4 || dims[0] != 3 || dims[1] != dims[2] {
            return Err(Error::Shape(format!(
                "triplane must be [3, R, R, C], got {dims:?}"
            )));
        }
        Ok(Self { planes })
    }

    pub fn zeros(resolution: usize, channels: usize, dtype: DType) -> Result<Self> {
        Self::new(Tensor::zeros(
            (3, resolution, resolution, channels),
            dtype,
            &candle_core::Device::Cpu,
        )?)
    }

    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    pub fn resolution(&self) -> usize {
        self.planes.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.planes.dims()[3]
    }

    /// Summed bilinear features at `points`, `[N, C]`. Points outside the
    /// extent are clamped onto it. Differentiable with respect to the planes.
    pub fn sample(&self, points: &[Vec3]) -> Result<Tensor> {
        let taps = Arc::new(triplane_taps(points, self.resolution()));
        self.sample_taps(taps)
    }

    fn sample_taps(&self, taps: Arc<Vec<ops::Tap>>) -> Result<Tensor> {
        let op = ops::SampleTriplane {
            taps,
            resolution: self.resolution(),
            channels: self.channels(),
        };
        Ok(self.planes.contiguous()?.apply_op1(op)?)
    }
}

/// MLP mapping a triplane feature to one density logit and three color logits.
#[derive(Debug, Clone)]
pub struct NerfDecoder {
    layers: Vec<Linear>,
}

impl NerfDecoder {
    /// `num_layers` linear layers (>= 1) with ReLU between them.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        width: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let in_dim = if i == 0 { in_channels } else { width };
            let out_dim = if i + 1 == num_layers { 4 } else { width };
            layers.push(Linear::new(
                store,
                &format!("{name}.layers.{i}"),
                in_dim,
                out_dim,
                LinearInit::KaimingUniform,
                rng,
            )?);
        }
        Ok(Self { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Raw `[N, 4]` logits.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut h = features.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub num_steps: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Per-sample uniform jitter inside each sub-interval (training only).
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        let r = 3f64.sqrt();
        Self {
            num_steps: 48,
            near: 2.0 - r,
            far: 2.0 + r,
            background: [1.0; 3],
            jitter: false,
        }
    }
}

impl RenderConfig {
    pub fn with_steps(num_steps: usize) -> Self {
        Self {
            num_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near < self.far) || self.num_steps < 2 {
            return Err(Error::Config(format!(
                "render config needs near < far and num_steps >= 2, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Parametric interval where the ray meets `[-1, 1]^3`, if any.
pub fn ray_cube_interval(origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (lo, hi) = {
            let x = (-1.0 - origin[a]) * inv;
            let y = (1.0 - origin[a]) * inv;
            if x < y {
                (x, y)
            } else {
                (y, x)
            }
        };
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Places `num_steps` samples at the midpoints of equal sub-intervals of
/// `[near, far]` along every ray that meets the unit cube inside that window.
pub fn sample_layout(
    rays: &[&RayMap],
    cfg: &RenderConfig,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Result<SampleLayout> {
    cfg.validate()?;
    let total: usize = rays.iter().map(|r| r.len()).sum();
    let delta = (cfg.far - cfg.near) / cfg.num_steps as f64;
    let mut out = SampleLayout {
        offsets: Vec::with_capacity(total + 1),
        ..Default::default()
    };
    out.offsets.push(0);
    for map in rays {
        for (o, d) in map.origins.iter().zip(&map.directions) {
            let hit = ray_cube_interval(o, d)
                .is_some_and(|(t0, t1)| t1 >= cfg.near && t0 <= cfg.far);
            if hit {
                for i in 0..cfg.num_steps {
                    let offset = match jitter.as_deref_mut() {
                        Some(rng) => rng.random::<f64>(),
                        None => 0.5,
                    };
                    let t = cfg.near + (i as f64 + offset) * delta;
                    out.t_vals.push(t);
                    out.deltas.push(delta);
                    out.points.push(o + d * t);
                }
            }
            out.offsets.push(out.t_vals.len());
        }
    }
    Ok(out)
}

/// Rendered image: `rgb [H, W, 3]`, `opacity [H, W]`, `depth [H, W]`.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: Tensor,
    pub opacity: Tensor,
    pub depth: Tensor,
}

pub fn render_rays(
    triplane: &Triplane,
    decoder: &NerfDecoder,
    rays: &RayMap,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    Ok(render_views(triplane, decoder, &[rays], cfg, None)?.remove(0))
}

/// Renders several ray maps with a single decoder pass.
pub fn render_views(
    triplane: &Triplane,
    decoder: &NerfDecoder,
    rays: &[&RayMap],
    cfg: &RenderConfig,
    jitter: Option<&mut ChaCha8Rng>,
) -> Result<Vec<RenderOutput>> {
    if decoder.in_channels() != triplane.channels() {
        return Err(Error::Shape(format!(
            "decoder expects {} channels, triplane has {}",
            decoder.in_channels(),
            triplane.channels()
        )));
    }
    let layout = sample_layout(rays, cfg, if cfg.jitter { jitter } else { None })?;
    let dtype = triplane.planes().dtype();
    let raw = if layout.num_samples() == 0 {
        Tensor::zeros((0, 4), dtype, triplane.planes().device())?
    } else {
        let taps = Arc::new(triplane_taps(&layout.points, triplane.resolution()));
        let feats = triplane.sample_taps(taps)?;
        decoder.forward(&feats)?
    };
    if layout.num_samples() > 0 {
        let check = raw.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(Error::NonFinite("decoder produced non-finite density or color".into()));
        }
    }
    let composite = raw.apply_op1(ops::CompositeRays {
        layout: Arc::new(layout),
        background: cfg.background,
        far: cfg.far,
    })?;
    let mut outputs = Vec::with_capacity(rays.len());
    let mut start = 0;
    for map in rays {
        let n = map.len();
        let block = composite.narrow(0, start, n)?;
        start += n;
        outputs.push(RenderOutput {
            rgb: block.narrow(1, 0, 3)?.reshape((map.height, map.width, 3))?,
            opacity: block.narrow(1, 3, 1)?.reshape((map.height, map.width))?,
            depth: block.narrow(1, 4, 1)?.reshape((map.height, map.width))?,
        });
    }
    Ok(outputs)
}

/// Decoded density at arbitrary points (no gradient tracking), evaluated in chunks.
pub fn query_density(
    triplane: &Triplane,
    decoder: &NerfDecoder,
    points: &[Vec3],
) -> Result<Vec<f64>> {
    const CHUNK: usize = 1 << 16;
    let planes = Triplane::new(triplane.planes().detach())?;
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(CHUNK) {
        let raw = decoder.forward(&planes.sample(chunk)?)?.detach();
        let logits = raw.narrow(1, 0, 1)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        out.extend(logits.into_iter().map(ops::softplus));
    }
    Ok(out)
}

/// A density/color field that can be volume-rendered without a network.
pub trait RadianceField {
    /// `(sigma, rgb)` at each point.
    fn eval(&self, points: &[Vec3]) -> Vec<(f64, [f64; 3])>;
}

/// Non-differentiable rendering of an analytic field with the same sample
/// placement and compositing as [`render_views`]. Returns one composite per ray.
pub fn render_field(
    field: &dyn RadianceField,
    rays: &RayMap,
    cfg: &RenderConfig,
) -> Result<Vec<ops::Composite>> {
    let layout = sample_layout(&[rays], cfg, None)?;
    let values = field.eval(&layout.points);
    Ok((0..layout.num_rays())
        .map(|ray| {
            let r = layout.ray_samples(ray);
            composite_ray(
                values[r.clone()].iter().map(|v| v.0),
                values[r.clone()].iter().map(|v| v.1),
                &layout.t_vals[r.clone()],
                &layout.deltas[r],
                cfg.background,
                cfg.far,
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_rays, CameraIntrinsics, CameraPose};

    #[test]
    fn cube_interval_for_axis_ray() {
        let (t0, t1) = ray_cube_interval(&Vec3::new(0.0, -2.0, 0.0), &Vec3::y()).unwrap();
        assert!((t0 - 1.0).abs() < 1e-12 && (t1 - 3.0).abs() < 1e-12);
        assert!(ray_cube_interval(&Vec3::new(0.0, -2.0, 1.5), &Vec3::y()).is_none());
    }

    #[test]
    fn culled_rays_get_no_samples() {
        let intr = CameraIntrinsics::square(170.0, 9);
        let rays = generate_rays(&intr, &CameraPose::canonical()).unwrap();
        let layout = sample_layout(&[&rays], &RenderConfig::with_steps(4), None).unwrap();
        let center = layout.ray_samples(4 * 9 + 4);
        assert_eq!(center.len(), 4);
        // Extreme corner ray at a 170 degree fov misses the cube.
        assert!(layout.ray_samples(0).is_empty());
    }

    #[test]
    fn zero_triplane_rejects_mismatched_decoder() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let dec = NerfDecoder::new(&mut store, "d", 3, 8, 2, &mut rng).unwrap();
        let tri = Triplane::zeros(4, 2, DType::F64).unwrap();
        let rays = generate_rays(&CameraIntrinsics::square(50.0, 2), &CameraPose::canonical()).unwrap();
        assert!(render_rays(&tri, &dec, &rays, &RenderConfig::default()).is_err());
    }
}
