//! Resolved run configuration: a named preset, overridden by a flat
//! key/value file, overridden by individual settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use candle_core::DType;

use crate::denoiser::{read_checkpoint, restore_parameters, CameraConditioning, Denoiser, DenoiserConfig, Mode};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::training::TrainConfig;

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_PRESET: &str = "micro";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub num_timesteps: usize,
    pub checkpoint_every: u64,
    pub data_dir: Option<String>,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let model = DenoiserConfig::preset(name)?;
        let (train, eval) = match name {
            "small-paper" => (TrainConfig::paper(), EvalConfig::default()),
            _ => (
                TrainConfig::micro(),
                EvalConfig {
                    num_inference_steps: 10,
                    chamfer_points: 4096,
                    ..EvalConfig::default()
                },
            ),
        };
        let mut cfg = Self {
            preset: name.to_string(),
            seed: 0,
            num_timesteps: DEFAULT_TIMESTEPS,
            checkpoint_every: 100,
            data_dir: None,
            model,
            train,
            eval,
        };
        cfg.sync();
        Ok(cfg)
    }

    /// Preset, then the file's entries. A `preset` key in the file selects
    /// the base preset unless `preset_override` is given.
    pub fn from_file(path: &Path, preset_override: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = parse_entries(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let file_preset = entries.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.clone());
        let name = preset_override
            .map(str::to_string)
            .or(file_preset)
            .unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let mut cfg = Self::preset(&name)?;
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        Ok(cfg)
    }

    /// Keeps the training view count and mode tied to the model's.
    fn sync(&mut self) {
        self.train.num_input_views = self.model.num_views;
        self.train.mode = self.model.mode;
    }

    /// Sets one flat key; the key names are listed by [`RunConfig::keys`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "seed" => self.seed = num(key, value)?,
            "num_timesteps" => self.num_timesteps = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "data_dir" => self.data_dir = Some(value.to_string()),
            "image_resolution" => m.image_resolution = num(key, value)?,
            "patch_size" => m.patch_size = num(key, value)?,
            "encoder_layers" => m.encoder_layers = num(key, value)?,
            "encoder_width" => m.encoder_width = num(key, value)?,
            "triplane_resolution" => m.triplane_resolution = num(key, value)?,
            "decoder_width" => m.decoder_width = num(key, value)?,
            "decoder_layers" => m.decoder_layers = num(key, value)?,
            "triplane_upsample" => m.triplane_upsample = num(key, value)?,
            "triplane_channels" => m.triplane_channels = num(key, value)?,
            "num_views" | "views" => m.num_views = num(key, value)?,
            "mode" => m.mode = Mode::parse(value)?,
            "camera_cond" => m.camera_cond = CameraConditioning::parse(value)?,
            "mlp_ratio" => m.mlp_ratio = num(key, value)?,
            "nerf_width" => m.nerf_width = num(key, value)?,
            "nerf_layers" => m.nerf_layers = num(key, value)?,
            "render_steps" => m.render_steps = num(key, value)?,
            "text_layers" => m.text_layers = num(key, value)?,
            "max_text_len" => m.max_text_len = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "warmup_steps" => t.warmup_steps = num(key, value)?,
            "total_steps" | "steps" => t.total_steps = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "beta1" => t.betas.0 = num(key, value)?,
            "beta2" => t.betas.1 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "grad_clip" => t.grad_clip = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "num_novel_views" => t.num_novel_views = num(key, value)?,
            "render_patch" => t.render_patch = num(key, value)?,
            "lambda_l2" => t.lambda_l2 = num(key, value)?,
            "lambda_perceptual" => t.lambda_perceptual = num(key, value)?,
            "cond_drop_prob" => t.cond_drop_prob = num(key, value)?,
            "inference_steps" => e.num_inference_steps = num(key, value)?,
            "holdout_views" => e.holdout_views = num(key, value)?,
            "mesh_resolution" => e.mesh_resolution = num(key, value)?,
            "density_threshold" => e.density_threshold = num(key, value)?,
            "chamfer_points" => e.chamfer_points = num(key, value)?,
            "guidance_scale" | "cfg_scale" => e.guidance_scale = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        self.sync();
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        &[
            "preset", "seed", "num_timesteps", "checkpoint_every", "data_dir", "image_resolution",
            "patch_size", "encoder_layers", "encoder_width", "triplane_resolution", "decoder_width",
            "decoder_layers", "triplane_upsample", "triplane_channels", "num_views", "mode",
            "camera_cond", "mlp_ratio", "nerf_width", "nerf_layers", "render_steps", "text_layers",
            "max_text_len", "learning_rate", "warmup_steps", "total_steps", "weight_decay", "beta1",
            "beta2", "adam_eps", "grad_clip", "batch_size", "num_novel_views", "render_patch",
            "lambda_l2", "lambda_perceptual", "cond_drop_prob", "inference_steps", "holdout_views",
            "mesh_resolution", "density_threshold", "chamfer_points", "guidance_scale",
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.num_timesteps == 0 {
            return Err(Error::Config("num_timesteps must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(value.clone()).map_err(|e| Error::Checkpoint(format!("embedded configuration: {e}")))
    }

    /// Errors unless `other` describes the same network and noise schedule.
    pub fn check_compatible(&self, other: &RunConfig) -> Result<()> {
        if self.model != other.model {
            return Err(Error::Config(format!(
                "model configuration conflicts with the checkpoint: {} vs {}",
                serde_json::to_string(&self.model).unwrap_or_default(),
                serde_json::to_string(&other.model).unwrap_or_default()
            )));
        }
        if self.num_timesteps != other.num_timesteps {
            return Err(Error::Config(format!(
                "num_timesteps {} conflicts with the checkpoint's {}",
                self.num_timesteps, other.num_timesteps
            )));
        }
        Ok(())
    }
}

/// A model restored from a checkpoint together with its embedded configuration.
pub struct LoadedModel {
    pub config: RunConfig,
    pub model: Denoiser,
    pub step: u64,
}

/// Rebuilds the network described by the checkpoint's embedded configuration
/// and loads its weights. When `expected` is given it must agree with the
/// embedded configuration.
pub fn load_model(path: &Path, expected: Option<&RunConfig>) -> Result<LoadedModel> {
    let (header, tensors) = read_checkpoint(path)?;
    let config = RunConfig::from_json(&header.config)?;
    if header.schedule.num_timesteps != config.num_timesteps {
        return Err(Error::Checkpoint(format!(
            "schedule has {} steps, configuration says {}",
            header.schedule.num_timesteps, config.num_timesteps
        )));
    }
    if let Some(expected) = expected {
        expected.check_compatible(&config)?;
    }
    let model = Denoiser::new(&config.model, DType::F32, config.seed)?;
    restore_parameters(model.store(), &tensors)?;
    Ok(LoadedModel {
        config,
        model,
        step: header.step,
    })
}

/// Flat `key = value` entries of a TOML document, values rendered as text.
fn parse_entries(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    table
        .into_iter()
        .map(|(k, v)| {
            let s = match v {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => return Err(format!("key {k}: unsupported value {other}")),
            };
            Ok((k, s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "preset = \"tiny\"\nlearning_rate = 1e-3\nviews = 2\nmode = \"text\"\n").unwrap();
        let mut cfg = RunConfig::from_file(&path, None).unwrap();
        assert_eq!(cfg.model.image_resolution, 32);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.num_input_views, 2);
        assert_eq!(cfg.train.mode, Mode::Text);
        cfg.set("learning_rate", "2e-3").unwrap();
        assert_eq!(cfg.train.learning_rate, 2e-3);
        let over = RunConfig::from_file(&path, Some("micro")).unwrap();
        assert_eq!(over.model.image_resolution, 64);
    }

    #[test]
    fn bad_entries_are_reported() {
        let mut cfg = RunConfig::preset("micro").unwrap();
        assert!(cfg.set("no_such_key", "1").is_err());
        assert!(cfg.set("patch_size", "eight").is_err());
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn json_round_trip_and_compatibility() {
        let cfg = RunConfig::preset("micro").unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let mut other = cfg.clone();
        other.train.learning_rate = 1.0;
        cfg.check_compatible(&other).unwrap();
        other.model.patch_size = 16;
        assert!(cfg.check_compatible(&other).is_err());
    }

    #[test]
    fn every_listed_key_is_settable() {
        let samples = [("mode", "image"), ("camera_cond", "adaln"), ("data_dir", "x")];
        for key in RunConfig::keys().iter().filter(|k| **k != "preset") {
            let mut cfg = RunConfig::preset("micro").unwrap();
            let v = samples.iter().find(|(k, _)| k == key).map_or("2", |(_, v)| v);
            cfg.set(key, v).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
