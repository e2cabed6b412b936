use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ImageRgb {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> ImageRgb {
        let mut pixels = Vec::with_capacity(width * height);
        for row in y..y + height {
            pixels.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + width]);
        }
        ImageRgb {
            width,
            height,
            pixels,
        }
    }

    /// Rounds to 8 bits per channel and back, matching what a PNG round trip stores.
    pub fn quantized(&self) -> ImageRgb {
        ImageRgb {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|p| p.map(|v| to_u8(v) as f64 / 255.0))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.map(to_u8)).collect()
    }

    /// `[H, W, 3]` tensor in `[0, 1]`.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let flat: Vec<f64> = self.pixels.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.height, self.width, 3), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Inverse of [`ImageRgb::to_tensor`]; values are clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected [H, W, 3], got {:?}", t.dims())));
        }
        let flat = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok(Self {
            width: w,
            height: h,
            pixels: flat
                .chunks_exact(3)
                .map(|p| [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2].clamp(0.0, 1.0)])
                .collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| Error::format(path, e))?;
        writer
            .write_image_data(&self.to_bytes())
            .map_err(|e| Error::format(path, e))?;
        writer.finish().map_err(|e| Error::format(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format(path, "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(path, "expected 8-bit RGB"));
        }
        let pixels = buf[..info.buffer_size()]
            .chunks_exact(3)
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            pixels,
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Horizontal concatenation of equally tall images.
pub fn hstack(images: &[ImageRgb]) -> ImageRgb {
    let height = images.first().map_or(0, |i| i.height);
    let width = images.iter().map(|i| i.width).sum();
    let mut pixels = Vec::with_capacity(width * height);
    for row in 0..height {
        for img in images {
            pixels.extend_from_slice(&img.pixels[row * img.width..(row + 1) * img.width]);
        }
    }
    ImageRgb {
        width,
        height,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = ImageRgb::filled(3, 2, [1.0, 0.5, 0.0]);
        img.pixels[4] = [0.123, 0.9, 0.33];
        img.save_png(&path).unwrap();
        let back = ImageRgb::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn crop_and_stack() {
        let mut img = ImageRgb::filled(4, 4, [0.0; 3]);
        img.pixels[4 + 2] = [1.0; 3];
        let c = img.crop(1, 1, 2, 2);
        assert_eq!(c.get(1, 0), [1.0; 3]);
        let s = hstack(&[c.clone(), c]);
        assert_eq!(s.width, 4);
        assert_eq!(s.get(3, 0), [1.0; 3]);
    }
}
