//! Single-channel images in [0, 1] and 8-bit grayscale PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{io_err, Error, Result};

/// Row-major grayscale image; row 0 is the top of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Image(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear lookup at normalized coordinates (`x` right, `y` down, both in
    /// [0, 1] over the full image extent), clamping at the borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let fx = (x * self.width as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (tx, ty) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
        let top = self.at(y0, x0) * (1.0 - tx) + self.at(y0, x1) * tx;
        let bot = self.at(y1, x0) * (1.0 - tx) + self.at(y1, x1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Image(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let mut out = vec![0.0; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                out[(y / factor) * w + x / factor] += self.at(y, x) * norm;
            }
        }
        Image::new(w, h, out)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> Image {
        let (w, h) = (self.width * factor, self.height * factor);
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.at(y / factor, x / factor))
            .collect();
        Image {
            width: w,
            height: h,
            data,
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Image("crop outside image".into()));
        }
        let data = (top..top + h)
            .flat_map(|y| self.data[y * self.width + left..][..w].iter().copied())
            .collect();
        Image::new(w, h, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&self.to_u8())
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Reads an 8- or 16-bit PNG; colour images are averaged to gray.
    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let wide = info.bit_depth == png::BitDepth::Sixteen;
        let bytes = &buf[..info.buffer_size()];
        let sample = |i: usize| -> f32 {
            if wide {
                u16::from_be_bytes([bytes[2 * i], bytes[2 * i + 1]]) as f32 / 65535.0
            } else {
                bytes[i] as f32 / 255.0
            }
        };
        // alpha is ignored
        let colour = match info.color_type {
            png::ColorType::GrayscaleAlpha => 1,
            png::ColorType::Rgba => 3,
            _ => channels,
        };
        let data = (0..w * h)
            .map(|p| (0..colour).map(|c| sample(p * channels + c)).sum::<f32>() / colour as f32)
            .collect();
        Image::new(w, h, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn bilinear_hits_pixel_centers() {
        let img = Image::new(4, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(img.sample_bilinear(0.125, 0.25), 0.0);
        assert_eq!(img.sample_bilinear(0.375, 0.75), 5.0);
        assert_eq!(img.sample_bilinear(0.25, 0.25), 0.5);
    }

    #[test]
    fn downsample_then_upsample_keeps_constant() {
        let img = Image::filled(8, 8, 0.3);
        let d = img.downsample(2).unwrap();
        assert_eq!((d.width, d.height), (4, 4));
        assert!(d.upsample(2).data.iter().all(|v| (v - 0.3).abs() < 1e-6));
        assert!(img.downsample(3).is_err());
    }
}
