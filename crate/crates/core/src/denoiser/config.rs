use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[serde(rename = "uncond")]
    Unconditional,
    Image,
    Text,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Unconditional => "uncond",
            Mode::Image => "image",
            Mode::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uncond" | "unconditional" => Ok(Mode::Unconditional),
            "image" => Ok(Mode::Image),
            "text" => Ok(Mode::Text),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected uncond, image or text)"))),
        }
    }
}

/// How camera poses enter the image encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraConditioning {
    /// Per-pixel Plucker rays concatenated with the RGB channels.
    Plucker,
    /// RGB-only patches; a per-view camera embedding is added to the
    /// adaLN conditioning vector instead.
    Adaln,
}

impl CameraConditioning {
    pub fn name(self) -> &'static str {
        match self {
            CameraConditioning::Plucker => "plucker",
            CameraConditioning::Adaln => "adaln",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plucker" => Ok(CameraConditioning::Plucker),
            "adaln" => Ok(CameraConditioning::Adaln),
            _ => Err(Error::Config(format!("unknown camera conditioning {s:?} (expected plucker or adaln)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_resolution: usize,
    pub patch_size: usize,
    pub encoder_layers: usize,
    pub encoder_width: usize,
    /// Side of the triplane token grid; the decoder sees `3 * side^2` tokens.
    pub triplane_resolution: usize,
    pub decoder_width: usize,
    /// Attention layers in the decoder: half cross-attention, half self-attention.
    pub decoder_layers: usize,
    pub triplane_upsample: usize,
    pub triplane_channels: usize,
    pub num_views: usize,
    pub mode: Mode,
    pub camera_cond: CameraConditioning,
    pub mlp_ratio: usize,
    pub nerf_width: usize,
    pub nerf_layers: usize,
    pub render_steps: usize,
    pub text_layers: usize,
    pub max_text_len: usize,
}

pub const HEAD_DIM: usize = 64;
pub const TIME_FEATURES: usize = 256;

impl DenoiserConfig {
    /// Desk-scale default.
    pub fn micro() -> Self {
        Self {
            image_resolution: 64,
            patch_size: 8,
            encoder_layers: 4,
            encoder_width: 192,
            triplane_resolution: 16,
            decoder_width: 192,
            decoder_layers: 12,
            triplane_upsample: 1,
            triplane_channels: 16,
            num_views: 4,
            mode: Mode::Image,
            camera_cond: CameraConditioning::Plucker,
            mlp_ratio: 4,
            nerf_width: 64,
            nerf_layers: 10,
            render_steps: 24,
            text_layers: 2,
            max_text_len: 77,
        }
    }

    /// The published Small model.
    pub fn small_paper() -> Self {
        Self {
            image_resolution: 256,
            patch_size: 16,
            encoder_layers: 12,
            encoder_width: 768,
            triplane_resolution: 32,
            decoder_width: 768,
            decoder_layers: 24,
            triplane_upsample: 1,
            triplane_channels: 32,
            render_steps: 64,
            ..Self::micro()
        }
    }

    /// Smallest configuration that still exercises every component; used by
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_resolution: 32,
            patch_size: 16,
            encoder_layers: 1,
            encoder_width: 32,
            triplane_resolution: 4,
            decoder_width: 32,
            decoder_layers: 2,
            triplane_channels: 8,
            render_steps: 8,
            ..Self::micro()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "small-paper" => Ok(Self::small_paper()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?} (expected micro, small-paper or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_resolution.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image resolution {} is not divisible by patch size {}",
                self.image_resolution, self.patch_size
            ));
        }
        if self.decoder_layers < 2 || !self.decoder_layers.is_multiple_of(2) {
            return fail(format!("decoder layers must be even and >= 2, got {}", self.decoder_layers));
        }
        if !matches!(self.triplane_upsample, 1 | 2) {
            return fail(format!("triplane upsample must be 1 or 2, got {}", self.triplane_upsample));
        }
        for (name, width) in [("encoder", self.encoder_width), ("decoder", self.decoder_width)] {
            if width == 0 || width % num_heads(width) != 0 {
                return fail(format!("{name} width {width} does not split into heads"));
            }
        }
        let positive = [
            ("encoder layers", self.encoder_layers),
            ("triplane resolution", self.triplane_resolution),
            ("triplane channels", self.triplane_channels),
            ("views", self.num_views),
            ("mlp ratio", self.mlp_ratio),
            ("nerf width", self.nerf_width),
            ("nerf layers", self.nerf_layers),
            ("render steps", self.render_steps),
            ("max text length", self.max_text_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_resolution / self.patch_size
    }

    pub fn tokens_per_view(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn triplane_tokens(&self) -> usize {
        3 * self.triplane_resolution.pow(2)
    }

    pub fn decoder_units(&self) -> usize {
        self.decoder_layers / 2
    }

    /// Spatial resolution of the emitted triplane.
    pub fn output_resolution(&self) -> usize {
        self.triplane_resolution * self.triplane_upsample
    }

    pub fn input_channels(&self) -> usize {
        match self.camera_cond {
            CameraConditioning::Plucker => 9,
            CameraConditioning::Adaln => 3,
        }
    }
}

/// Attention heads of width 64, at least one.
pub fn num_heads(width: usize) -> usize {
    (width / HEAD_DIM).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let mut c = DenoiserConfig::tiny();
        assert_eq!(c.num_views * c.tokens_per_view(), 16);
        c.image_resolution = 256;
        assert_eq!(c.num_views * c.tokens_per_view(), 1024);
        assert_eq!(DenoiserConfig::small_paper().triplane_tokens(), 3072);
    }

    #[test]
    fn presets_validate() {
        for name in ["micro", "small-paper", "tiny"] {
            DenoiserConfig::preset(name).unwrap().validate().unwrap();
        }
        let mut c = DenoiserConfig::micro();
        c.decoder_layers = 11;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::micro();
        c.patch_size = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Unconditional, Mode::Image, Mode::Text] {
            assert_eq!(Mode::parse(m.name()).unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
    }
}
