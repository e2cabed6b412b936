//! Differentiable kernels for triplane rendering: bilinear plane sampling and
//! volumetric compositing, each with a hand-written backward pass.

use std::sync::Arc;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::geometry::Vec3;

/// Number of (texel, weight) taps per point: 3 planes x 4 bilinear corners.
pub const TAPS_PER_POINT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    /// Row of the `[3 * R * R, C]` flattened plane tensor.
    pub texel: u32,
    pub weight: f64,
}

/// Continuous texel coordinate of `coord in [-1, 1]` on an `res`-texel axis,
/// texel centers at `(i + 0.5) / res * 2 - 1`. Returns (lower index, fraction).
fn axis_lerp(coord: f64, res: usize) -> (usize, f64) {
    if res == 1 {
        return (0, 0.0);
    }
    let c = coord.clamp(-1.0, 1.0);
    let f = ((c + 1.0) * 0.5 * res as f64 - 0.5).clamp(0.0, (res - 1) as f64);
    let i0 = (f.floor() as usize).min(res - 2);
    (i0, f - i0 as f64)
}

/// Bilinear taps of each point on the XY, XZ and YZ planes. Plane `p` stores
/// texel `(row = v, col = u)` where `(u, v)` is the point's projection.
pub fn triplane_taps(points: &[Vec3], res: usize) -> Vec<Tap> {
    let mut taps = Vec::with_capacity(points.len() * TAPS_PER_POINT);
    let r1 = if res > 1 { 1 } else { 0 };
    for p in points {
        for (plane, (u, v)) in [(p.x, p.y), (p.x, p.z), (p.y, p.z)].into_iter().enumerate() {
            let (iu, fu) = axis_lerp(u, res);
            let (iv, fv) = axis_lerp(v, res);
            let base = plane * res * res;
            let idx = |row: usize, col: usize| (base + row * res + col) as u32;
            taps.push(Tap { texel: idx(iv, iu), weight: (1.0 - fu) * (1.0 - fv) });
            taps.push(Tap { texel: idx(iv, iu + r1), weight: fu * (1.0 - fv) });
            taps.push(Tap { texel: idx(iv + r1, iu), weight: (1.0 - fu) * fv });
            taps.push(Tap { texel: idx(iv + r1, iu + r1), weight: fu * fv });
        }
    }
    taps
}

fn contiguous_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("expected a contiguous tensor".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|x| *x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => candle_core::bail!("only f32 and f64 tensors are supported"),
    })
}

fn storage_from_f64(values: Vec<f64>, dtype: DType) -> candle_core::Result<CpuStorage> {
    Ok(match dtype {
        DType::F32 => CpuStorage::F32(values.into_iter().map(|x| x as f32).collect()),
        DType::F64 => CpuStorage::F64(values),
        other => candle_core::bail!("unsupported dtype {other:?}"),
    })
}

fn tensor_to_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

/// Samples a `[3, R, R, C]` plane tensor at precomputed taps, summing the
/// three plane features. Output `[N, C]`.
pub(crate) struct SampleTriplane {
    pub taps: Arc<Vec<Tap>>,
    pub resolution: usize,
    pub channels: usize,
}

impl SampleTriplane {
    fn num_points(&self) -> usize {
        self.taps.len() / TAPS_PER_POINT
    }
}

impl CustomOp1 for SampleTriplane {
    fn name(&self) -> &'static str {
        "sample-triplane"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.dims();
        let r = self.resolution;
        let c = self.channels;
        if dims != [3, r, r, c] {
            candle_core::bail!("triplane must be [3, {r}, {r}, {c}], got {dims:?}");
        }
        let planes = contiguous_f64(storage, layout)?;
        let n = self.num_points();
        let mut out = vec![0.0f64; n * c];
        for (point, row) in out.chunks_exact_mut(c).enumerate() {
            for tap in &self.taps[point * TAPS_PER_POINT..(point + 1) * TAPS_PER_POINT] {
                if tap.weight == 0.0 {
                    continue;
                }
                let src = &planes[tap.texel as usize * c..(tap.texel as usize + 1) * c];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += tap.weight * s;
                }
            }
        }
        let dtype = storage.dtype();
        Ok((storage_from_f64(out, dtype)?, Shape::from((n, c))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let c = self.channels;
        let r = self.resolution;
        let grad = tensor_to_f64(grad_res)?;
        let mut out = vec![0.0f64; 3 * r * r * c];
        for (point, g) in grad.chunks_exact(c).enumerate() {
            for tap in &self.taps[point * TAPS_PER_POINT..(point + 1) * TAPS_PER_POINT] {
                if tap.weight == 0.0 {
                    continue;
                }
                let dst = &mut out[tap.texel as usize * c..(tap.texel as usize + 1) * c];
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += tap.weight * gv;
                }
            }
        }
        let t = Tensor::from_vec(out, (3, r, r, c), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(t))
    }
}

/// Sample placement along a batch of rays, stored as ragged rows: ray `i`
/// owns samples `offsets[i]..offsets[i + 1]` (empty for culled rays).
#[derive(Debug, Clone, Default)]
pub struct SampleLayout {
    pub offsets: Vec<usize>,
    pub t_vals: Vec<f64>,
    pub deltas: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl SampleLayout {
    pub fn num_rays(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_samples(&self) -> usize {
        self.t_vals.len()
    }

    pub fn ray_samples(&self, ray: usize) -> std::ops::Range<usize> {
        self.offsets[ray]..self.offsets[ray + 1]
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Composited values for one ray: `[r, g, b, opacity, depth]`.
pub type Composite = [f64; 5];

/// Front-to-back alpha compositing of one ray's samples. `background` is
/// blended with the leftover transmittance and its depth is taken as `far`.
pub fn composite_ray(
    sigma: impl IntoIterator<Item = f64>,
    color: impl IntoIterator<Item = [f64; 3]>,
    t_vals: &[f64],
    deltas: &[f64],
    background: [f64; 3],
    far: f64,
) -> Composite {
    let mut out = [0.0; 5];
    let mut trans = 1.0;
    for (((s, c), t), d) in sigma.into_iter().zip(color).zip(t_vals).zip(deltas) {
        let decay = (-s * d).exp();
        let w = trans * (1.0 - decay);
        out[0] += w * c[0];
        out[1] += w * c[1];
        out[2] += w * c[2];
        out[3] += w;
        out[4] += w * t;
        trans *= decay;
    }
    out[0] += trans * background[0];
    out[1] += trans * background[1];
    out[2] += trans * background[2];
    out[4] += trans * far;
    out
}

/// Activates raw decoder outputs `[M, 4]` (density logit, 3 color logits)
/// with softplus / sigmoid and composites them per ray. Output `[rays, 5]`.
pub(crate) struct CompositeRays {
    pub layout: Arc<SampleLayout>,
    pub background: [f64; 3],
    pub far: f64,
}

impl CustomOp1 for CompositeRays {
    fn name(&self) -> &'static str {
        "composite-rays"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let m = self.layout.num_samples();
        if layout.dims() != [m, 4] {
            candle_core::bail!("expected raw samples [{m}, 4], got {:?}", layout.dims());
        }
        let raw = contiguous_f64(storage, layout)?;
        let rays = self.layout.num_rays();
        let mut out = Vec::with_capacity(rays * 5);
        for ray in 0..rays {
            let range = self.layout.ray_samples(ray);
            let rows = &raw[range.start * 4..range.end * 4];
            let comp = composite_ray(
                rows.chunks_exact(4).map(|r| softplus(r[0])),
                rows.chunks_exact(4)
                    .map(|r| [sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3])]),
                &self.layout.t_vals[range.clone()],
                &self.layout.deltas[range],
                self.background,
                self.far,
            );
            out.extend_from_slice(&comp);
        }
        let dtype = storage.dtype();
        Ok((storage_from_f64(out, dtype)?, Shape::from((rays, 5))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let raw = tensor_to_f64(arg)?;
        let grad = tensor_to_f64(grad_res)?;
        let lay = &self.layout;
        let mut out = vec![0.0f64; raw.len()];
        let mut trans = Vec::new();
        let mut weights = Vec::new();
        let mut gv = Vec::new();
        for ray in 0..lay.num_rays() {
            let range = lay.ray_samples(ray);
            if range.is_empty() {
                continue;
            }
            let g = &grad[ray * 5..ray * 5 + 5];
            trans.clear();
            weights.clear();
            gv.clear();
            // Forward recomputation: transmittance before each sample, weights,
            // and g . v_k with v_k = (color, 1, t_k).
            let mut t_acc = 1.0;
            for k in range.clone() {
                let r = &raw[k * 4..k * 4 + 4];
                let decay = (-softplus(r[0]) * lay.deltas[k]).exp();
                let w = t_acc * (1.0 - decay);
                let c = [sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3])];
                trans.push(t_acc);
                weights.push(w);
                gv.push(g[0] * c[0] + g[1] * c[1] + g[2] * c[2] + g[3] + g[4] * lay.t_vals[k]);
                t_acc *= decay;
            }
            let t_final = t_acc;
            let g_bg = g[0] * self.background[0]
                + g[1] * self.background[1]
                + g[2] * self.background[2]
                + g[4] * self.far;
            // dQ/dtau_k = T_{k+1} (g.v_k) - sum_{i>k} w_i (g.v_i) - T_N (g.v_bg)
            let n = range.len();
            let mut suffix = 0.0;
            for local in (0..n).rev() {
                let k = range.start + local;
                let r = &raw[k * 4..k * 4 + 4];
                let t_next = if local + 1 < n { trans[local + 1] } else { t_final };
                let d_tau = t_next * gv[local] - suffix - t_final * g_bg;
                suffix += weights[local] * gv[local];
                out[k * 4] = d_tau * lay.deltas[k] * sigmoid(r[0]);
                for ch in 0..3 {
                    let s = sigmoid(r[1 + ch]);
                    out[k * 4 + 1 + ch] = weights[local] * g[ch] * s * (1.0 - s);
                }
            }
        }
        let t = Tensor::from_vec(out, arg.dims(), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(t))
    }
}
