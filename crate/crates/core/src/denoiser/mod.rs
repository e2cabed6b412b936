//! Reconstruction-based multi-view denoiser.
//!
//! Noisy posed views are patchified together with their Plucker rays, encoded
//! by a ViT, and read out by a decoder whose queries are learned triplane
//! position tokens. Every attention and MLP sub-block is adaLN-Zero modulated
//! by the timestep. The denoised views are renders of the predicted triplane
//! at the input cameras.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod text;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_checkpoint, restore_parameters, save_checkpoint, CheckpointHeader, ScheduleInfo};
pub use config::{num_heads, CameraConditioning, DenoiserConfig, Mode};

use self::layers::{AdaLn, Attention, Mlp, TimeEmbedding, INIT_STD};
use self::text::TextEmbedder;
use crate::diffusion::{cfg_combine, Condition, Denoise, NoisyViewSet};
use crate::error::{Error, Result};
use crate::geometry::{generate_rays, plucker_map, Camera, RayMap};
use crate::nerf::{render_views, NerfDecoder, RenderConfig, RenderOutput, Triplane};
use crate::params::{layer_norm, Linear, LinearInit, ParamStore, LN_EPS};

/// A cross-attention to caption tokens, present only in text mode.
#[derive(Debug, Clone)]
struct TextCross {
    ada: AdaLn,
    attn: Attention,
}

impl TextCross {
    fn new(store: &mut ParamStore, name: &str, cond: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            ada: AdaLn::new(store, &format!("{name}.ada"), cond, dim, rng)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, cond, rng)?,
        })
    }

    fn apply(&self, x: &Tensor, cond_act: &Tensor, text: Option<&Tensor>) -> Result<Tensor> {
        let text = text.ok_or_else(|| Error::Config("text-mode denoiser needs text tokens".into()))?;
        let m = self.ada.modulation(cond_act)?;
        layers::modulated_residual(x, &m, |h| self.attn.forward(h, text))
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    self_ada: AdaLn,
    self_attn: Attention,
    text: Option<TextCross>,
    mlp_ada: AdaLn,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct DecoderUnit {
    cross_ada: AdaLn,
    cross_attn: Attention,
    text_after_cross: Option<TextCross>,
    self_ada: AdaLn,
    self_attn: Attention,
    text_after_self: Option<TextCross>,
    mlp_ada: AdaLn,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct CameraEmbedding {
    fc1: Linear,
    fc2: Linear,
}

pub const CAMERA_FEATURES: usize = 13;

/// Rotation (row-major), position and field of view in radians.
fn camera_features(cameras: &[Camera], dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(cameras.len() * CAMERA_FEATURES);
    for c in cameras {
        let r = &c.pose.rotation;
        v.extend((0..9).map(|k| r[(k / 3, k % 3)]));
        v.extend(c.pose.position.iter());
        v.push(c.intrinsics.fov_deg.to_radians());
    }
    Ok(Tensor::from_vec(v, (cameras.len(), CAMERA_FEATURES), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct Upsampler {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    store: ParamStore,
    patch_embed: Linear,
    encoder_positions: Tensor,
    encoder: Vec<EncoderBlock>,
    time: TimeEmbedding,
    camera_embed: Option<CameraEmbedding>,
    triplane_positions: Tensor,
    decoder: Vec<DecoderUnit>,
    out_proj: Linear,
    upsampler: Option<Upsampler>,
    text: Option<TextEmbedder>,
    nerf: NerfDecoder,
    render: RenderConfig,
}

impl Denoiser {
    /// Fresh model; every parameter is drawn from a ChaCha stream seeded by `seed`.
    pub fn new(cfg: &DenoiserConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new(dtype);
        let s = &mut store;
        let (de, dd) = (cfg.encoder_width, cfg.decoder_width);
        let text_mode = cfg.mode == Mode::Text;

        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.input_channels();
        let patch_embed = Linear::new(s, "encoder.patch_embed", patch_dim, de, LinearInit::TruncNormal(INIT_STD), rng)?;
        let encoder_positions = s.trunc_normal("encoder.positions", &[cfg.tokens_per_view(), de], INIT_STD, rng)?;
        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            let n = format!("encoder.blocks.{i}");
            encoder.push(EncoderBlock {
                self_ada: AdaLn::new(s, &format!("{n}.self_ada"), dd, de, rng)?,
                self_attn: Attention::new(s, &format!("{n}.self_attn"), de, de, rng)?,
                text: if text_mode {
                    Some(TextCross::new(s, &format!("{n}.text"), dd, de, rng)?)
                } else {
                    None
                },
                mlp_ada: AdaLn::new(s, &format!("{n}.mlp_ada"), dd, de, rng)?,
                mlp: Mlp::new(s, &format!("{n}.mlp"), de, cfg.mlp_ratio, rng)?,
            });
        }
        let time = TimeEmbedding::new(s, "time", dd, rng)?;
        let camera_embed = match cfg.camera_cond {
            CameraConditioning::Plucker => None,
            CameraConditioning::Adaln => Some(CameraEmbedding {
                fc1: Linear::new(s, "camera.fc1", CAMERA_FEATURES, dd, LinearInit::TruncNormal(INIT_STD), rng)?,
                fc2: Linear::new(s, "camera.fc2", dd, dd, LinearInit::TruncNormal(INIT_STD), rng)?,
            }),
        };
        let triplane_positions = s.trunc_normal("decoder.positions", &[cfg.triplane_tokens(), dd], INIT_STD, rng)?;
        let mut decoder = Vec::with_capacity(cfg.decoder_units());
        for i in 0..cfg.decoder_units() {
            let n = format!("decoder.units.{i}");
            let text_block = |s: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str| -> Result<Option<TextCross>> {
                if text_mode {
                    Ok(Some(TextCross::new(s, &format!("{n}.{tag}"), dd, dd, rng)?))
                } else {
                    Ok(None)
                }
            };
            decoder.push(DecoderUnit {
                cross_ada: AdaLn::new(s, &format!("{n}.cross_ada"), dd, dd, rng)?,
                cross_attn: Attention::new(s, &format!("{n}.cross_attn"), dd, de, rng)?,
                text_after_cross: text_block(s, rng, "text_cross")?,
                self_ada: AdaLn::new(s, &format!("{n}.self_ada"), dd, dd, rng)?,
                self_attn: Attention::new(s, &format!("{n}.self_attn"), dd, dd, rng)?,
                text_after_self: text_block(s, rng, "text_self")?,
                mlp_ada: AdaLn::new(s, &format!("{n}.mlp_ada"), dd, dd, rng)?,
                mlp: Mlp::new(s, &format!("{n}.mlp"), dd, cfg.mlp_ratio, rng)?,
            });
        }
        let c = cfg.triplane_channels;
        let out_proj = Linear::new(s, "decoder.out_proj", dd, c, LinearInit::TruncNormal(INIT_STD), rng)?;
        let upsampler = if cfg.triplane_upsample == 2 {
            let std = (1.0 / (9 * c) as f64).sqrt();
            Some(Upsampler {
                weight: s.trunc_normal("decoder.upsample.weight", &[c, c, 3, 3], std, rng)?,
                bias: s.zeros("decoder.upsample.bias", &[c])?,
            })
        } else {
            None
        };
        let text = if text_mode {
            Some(TextEmbedder::new(s, "text", dd, cfg.text_layers, cfg.max_text_len, cfg.mlp_ratio, rng)?)
        } else {
            None
        };
        let nerf = NerfDecoder::new(s, "nerf", c, cfg.nerf_width, cfg.nerf_layers, rng)?;
        let render = RenderConfig::with_steps(cfg.render_steps);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            patch_embed,
            encoder_positions,
            encoder,
            time,
            camera_embed,
            triplane_positions,
            decoder,
            out_proj,
            upsampler,
            text,
            nerf,
            render,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn nerf(&self) -> &NerfDecoder {
        &self.nerf
    }

    pub fn render_config(&self) -> &RenderConfig {
        &self.render
    }

    /// Caption tokens for text mode: the encoded prompt, or the learned null
    /// embedding when `prompt` is `None`. Other modes return `None`.
    pub fn text_tokens(&self, prompt: Option<&str>) -> Result<Option<Tensor>> {
        match (&self.text, prompt) {
            (None, None) => Ok(None),
            (None, Some(_)) => Err(Error::Config(format!(
                "a prompt was given to a {}-mode model",
                self.cfg.mode.name()
            ))),
            (Some(t), Some(p)) => Ok(Some(t.encode(p)?)),
            (Some(t), None) => Ok(Some(t.null())),
        }
    }

    fn check_cameras(&self, cameras: &[Camera]) -> Result<()> {
        if cameras.len() != self.cfg.num_views {
            return Err(Error::Shape(format!(
                "expected {} cameras, got {}",
                self.cfg.num_views,
                cameras.len()
            )));
        }
        let r = self.cfg.image_resolution;
        for c in cameras {
            c.intrinsics.validate()?;
            c.pose.validate()?;
            if c.intrinsics.width != r || c.intrinsics.height != r {
                return Err(Error::Shape(format!(
                    "camera is {}x{}, model expects {r}x{r}",
                    c.intrinsics.width, c.intrinsics.height
                )));
            }
        }
        Ok(())
    }

    /// Per-pixel Plucker coordinates `[V, H, W, 6]`.
    pub fn plucker_tensor(&self, cameras: &[Camera]) -> Result<Tensor> {
        let r = self.cfg.image_resolution;
        let mut values: Vec<f64> = Vec::with_capacity(cameras.len() * r * r * 6);
        for c in cameras {
            let map = plucker_map(&generate_rays(&c.intrinsics, &c.pose)?)?;
            values.extend(map.channels.iter().flatten());
        }
        Ok(Tensor::from_vec(values, (cameras.len(), r, r, 6), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// Patch tokens of all views, concatenated view-major: `[V * P, encoder_width]`.
    pub fn tokenize_views(&self, images: &Tensor, cameras: &[Camera]) -> Result<Tensor> {
        self.check_cameras(cameras)?;
        let (v, h, w, c) = images.dims4()?;
        let r = self.cfg.image_resolution;
        if v != cameras.len() || h != r || w != r || c != 3 {
            return Err(Error::Shape(format!(
                "expected views [{}, {r}, {r}, 3], got {:?}",
                cameras.len(),
                images.dims()
            )));
        }
        let pixels = match self.cfg.camera_cond {
            CameraConditioning::Plucker => Tensor::cat(&[images, &self.plucker_tensor(cameras)?], 3)?,
            CameraConditioning::Adaln => images.clone(),
        };
        let p = self.cfg.patch_size;
        let n = r / p;
        let ch = self.cfg.input_channels();
        let patches = pixels
            .reshape((v, n, p, n, p, ch))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((v, n * n, p * p * ch))?;
        let tokens = self.patch_embed.forward(&patches)?.broadcast_add(&self.encoder_positions)?;
        Ok(tokens.reshape((v * n * n, self.cfg.encoder_width))?)
    }

    /// Activated conditioning of the encoder, `[1 or V*P, decoder_width]`.
    fn encoder_condition(&self, t_emb: &Tensor, cameras: &[Camera]) -> Result<Tensor> {
        let cond = match &self.camera_embed {
            None => t_emb.clone(),
            Some(ce) => {
                let v = cameras.len();
                let p = self.cfg.tokens_per_view();
                let dd = self.cfg.decoder_width;
                let cam = ce
                    .fc2
                    .forward(&ce.fc1.forward(&camera_features(cameras, self.dtype())?)?.silu()?)?;
                cam.broadcast_add(t_emb)?
                    .reshape((v, 1, dd))?
                    .broadcast_as((v, p, dd))?
                    .contiguous()?
                    .reshape((v * p, dd))?
            }
        };
        Ok(cond.silu()?)
    }

    /// The reconstruction network: noisy views, their cameras and the
    /// timestep to a triplane.
    pub fn reconstruct(&self, noisy: &NoisyViewSet, cameras: &[Camera], text: Option<&Tensor>) -> Result<Triplane> {
        if self.text.is_some() && text.is_none() {
            return Err(Error::Config("text-mode denoiser needs text tokens".into()));
        }
        let t_emb = self.time.forward(noisy.t)?;
        let t_act = t_emb.silu()?;

        let mut x = self.tokenize_views(&noisy.images, cameras)?;
        let enc_act = self.encoder_condition(&t_emb, cameras)?;
        for b in &self.encoder {
            let m = b.self_ada.modulation(&enc_act)?;
            x = layers::modulated_residual(&x, &m, |h| b.self_attn.forward(h, h))?;
            if let Some(tc) = &b.text {
                x = tc.apply(&x, &enc_act, text)?;
            }
            let m = b.mlp_ada.modulation(&enc_act)?;
            x = layers::modulated_residual(&x, &m, |h| b.mlp.forward(h))?;
        }
        let image_tokens = layer_norm(&x, LN_EPS)?;

        let mut y = self.triplane_positions.clone();
        for u in &self.decoder {
            let m = u.cross_ada.modulation(&t_act)?;
            y = layers::modulated_residual(&y, &m, |h| u.cross_attn.forward(h, &image_tokens))?;
            if let Some(tc) = &u.text_after_cross {
                y = tc.apply(&y, &t_act, text)?;
            }
            let m = u.self_ada.modulation(&t_act)?;
            y = layers::modulated_residual(&y, &m, |h| u.self_attn.forward(h, h))?;
            if let Some(tc) = &u.text_after_self {
                y = tc.apply(&y, &t_act, text)?;
            }
            let m = u.mlp_ada.modulation(&t_act)?;
            y = layers::modulated_residual(&y, &m, |h| u.mlp.forward(h))?;
        }
        let r = self.cfg.triplane_resolution;
        let c = self.cfg.triplane_channels;
        let mut planes = self.out_proj.forward(&layer_norm(&y, LN_EPS)?)?.reshape((3, r, r, c))?;
        if let Some(up) = &self.upsampler {
            let nchw = planes.permute((0, 3, 1, 2))?.contiguous()?.upsample_nearest2d(2 * r, 2 * r)?;
            let conv = nchw
                // padding 1, stride 1, dilation 1, one group
                .conv2d(&up.weight, 1, 1, 1, 1)?
                .broadcast_add(&up.bias.reshape((1, c, 1, 1))?)?;
            planes = conv.permute((0, 2, 3, 1))?.contiguous()?;
        }
        let total = planes.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("triplane at t = {}", noisy.t)));
        }
        Triplane::new(planes)
    }

    pub fn render(&self, triplane: &Triplane, rays: &[&RayMap], jitter: Option<&mut ChaCha8Rng>) -> Result<Vec<RenderOutput>> {
        render_views(triplane, &self.nerf, rays, &self.render, jitter)
    }

    /// Renders of `triplane` at full camera frames, in diffusion space `[V, H, W, 3]`.
    pub fn render_views_x0(&self, triplane: &Triplane, cameras: &[Camera]) -> Result<Tensor> {
        let rays = cameras
            .iter()
            .map(|c| generate_rays(&c.intrinsics, &c.pose))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&RayMap> = rays.iter().collect();
        let renders = self.render(triplane, &refs, None)?;
        let rgb: Vec<Tensor> = renders.into_iter().map(|r| r.rgb).collect();
        Ok(((Tensor::stack(&rgb, 0)? * 2.0)? - 1.0)?)
    }

    /// Triplane and its renders at the input cameras (the x0 estimate).
    pub fn denoise(&self, noisy: &NoisyViewSet, cameras: &[Camera], text: Option<&Tensor>) -> Result<(Triplane, Tensor)> {
        let triplane = self.reconstruct(noisy, cameras, text)?;
        let x0 = self.render_views_x0(&triplane, cameras)?;
        Ok((triplane, x0))
    }
}

/// A model bound to a camera set, usable by the sampling loop. In text mode a
/// guidance scale other than 1 evaluates the model with and without the
/// caption and extrapolates both the triplane features and the x0 estimate.
pub struct BoundDenoiser<'a> {
    pub model: &'a Denoiser,
    pub cameras: Vec<Camera>,
    pub guidance_scale: f64,
}

impl<'a> BoundDenoiser<'a> {
    pub fn new(model: &'a Denoiser, cameras: Vec<Camera>, guidance_scale: f64) -> Self {
        Self {
            model,
            cameras,
            guidance_scale,
        }
    }
}

impl Denoise for BoundDenoiser<'_> {
    type Scene = Triplane;

    fn denoise(&self, noisy: &NoisyViewSet, condition: &Condition) -> Result<(Triplane, Tensor)> {
        let mode = self.model.config().mode;
        match (mode, condition) {
            (Mode::Unconditional, Condition::Unconditional) | (Mode::Image, Condition::Image(_)) => {
                self.model.denoise(noisy, &self.cameras, None)
            }
            (Mode::Text, Condition::Unconditional) => {
                let null = self.model.text_tokens(None)?;
                self.model.denoise(noisy, &self.cameras, null.as_ref())
            }
            (Mode::Text, Condition::Text(prompt)) => {
                let cond = self.model.text_tokens(Some(prompt))?;
                let (tri_c, x0_c) = self.model.denoise(noisy, &self.cameras, cond.as_ref())?;
                if self.guidance_scale == 1.0 {
                    return Ok((tri_c, x0_c));
                }
                let null = self.model.text_tokens(None)?;
                let (tri_u, x0_u) = self.model.denoise(noisy, &self.cameras, null.as_ref())?;
                let planes = cfg_combine(tri_c.planes(), tri_u.planes(), self.guidance_scale)?;
                let x0 = cfg_combine(&x0_c, &x0_u, self.guidance_scale)?;
                Ok((Triplane::new(planes)?, x0))
            }
            (mode, cond) => Err(Error::Config(format!(
                "{} condition given to a {}-mode model",
                match cond {
                    Condition::Unconditional => "no",
                    Condition::Image(_) => "an image",
                    Condition::Text(_) => "a text",
                },
                mode.name()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian_tensor;
    use crate::geometry::{circle_viewpoints, normalize_poses, CameraPose};

    fn cameras(cfg: &DenoiserConfig) -> Vec<Camera> {
        let cams = circle_viewpoints(cfg.num_views, 2.0, 20.0, 50.0, cfg.image_resolution);
        let poses: Vec<CameraPose> = cams.iter().map(|c| c.pose).collect();
        let norm = normalize_poses(&poses, 0).unwrap();
        cams.into_iter()
            .zip(norm)
            .map(|(c, p)| Camera::new(c.intrinsics, p))
            .collect()
    }

    fn noisy(cfg: &DenoiserConfig, t: usize, seed: u64, dtype: DType) -> NoisyViewSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.image_resolution;
        NoisyViewSet {
            images: gaussian_tensor(&mut rng, &[cfg.num_views, r, r, 3], dtype).unwrap(),
            t,
            clean_mask: crate::diffusion::clean_mask(cfg.num_views, cfg.mode == Mode::Image),
        }
    }

    fn planes(t: &Triplane) -> Vec<f64> {
        t.planes().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn untrained_output_ignores_inputs() {
        let cfg = DenoiserConfig::tiny();
        let model = Denoiser::new(&cfg, DType::F32, 0).unwrap();
        let cams = cameras(&cfg);
        let a = model.reconstruct(&noisy(&cfg, 10, 1, DType::F32), &cams, None).unwrap();
        let b = model.reconstruct(&noisy(&cfg, 900, 2, DType::F32), &cams, None).unwrap();
        assert_eq!(planes(&a), planes(&b));
    }

    #[test]
    fn variants_construct_and_run() {
        let mut cfg = DenoiserConfig::tiny();
        cfg.num_views = 2;
        for (mode, cam, up) in [
            (Mode::Text, CameraConditioning::Plucker, 1),
            (Mode::Unconditional, CameraConditioning::Adaln, 2),
        ] {
            cfg.mode = mode;
            cfg.camera_cond = cam;
            cfg.triplane_upsample = up;
            let model = Denoiser::new(&cfg, DType::F32, 0).unwrap();
            let text = model.text_tokens(if mode == Mode::Text { Some("a red box") } else { None }).unwrap();
            let (tri, x0) = model
                .denoise(&noisy(&cfg, 500, 3, DType::F32), &cameras(&cfg), text.as_ref())
                .unwrap();
            assert_eq!(tri.resolution(), cfg.output_resolution());
            assert_eq!(x0.dims(), &[2, 32, 32, 3]);
        }
    }

    #[test]
    fn wrong_inputs_are_rejected() {
        let cfg = DenoiserConfig::tiny();
        let model = Denoiser::new(&cfg, DType::F32, 0).unwrap();
        let cams = cameras(&cfg);
        assert!(model.reconstruct(&noisy(&cfg, 5, 0, DType::F32), &cams[..2], None).is_err());
        assert!(model.text_tokens(Some("a red box")).is_err());
    }

    #[test]
    fn triplane_is_invariant_to_view_order() {
        let cfg = DenoiserConfig::tiny();
        let model = Denoiser::new(&cfg, DType::F32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        model.store().perturb(0.05, &mut rng, |_| true).unwrap();
        let cams = cameras(&cfg);
        let x = noisy(&cfg, 300, 4, DType::F32);
        let perm = [0usize, 3, 1, 2];
        let idx = Tensor::from_vec(perm.iter().map(|i| *i as u32).collect::<Vec<_>>(), 4, &Device::Cpu).unwrap();
        let xp = NoisyViewSet {
            images: x.images.index_select(&idx, 0).unwrap(),
            ..x.clone()
        };
        let cams_p: Vec<Camera> = perm.iter().map(|i| cams[*i]).collect();
        let a = planes(&model.reconstruct(&x, &cams, None).unwrap());
        let b = planes(&model.reconstruct(&xp, &cams_p, None).unwrap());
        let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let spread = a.iter().map(|p| p.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5 && spread > 1e-3, "diff {diff}, spread {spread}");
    }
}
