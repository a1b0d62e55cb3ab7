//! RGB item images with unit-range pixels.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use vispromo_nn::{Real, Tensor};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
/// Larger encoded images are rejected before allocation.
pub const MAX_DECODE_SIDE: u32 = 4096;

/// Square RGB image stored channel-major (`[C, H, W]`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * side * side {
            return Err(Error::Shape(format!(
                "image buffer of {} values does not fit {side}x{side}x{CHANNELS}",
                data.len()
            )));
        }
        Ok(Self { side, data })
    }

    pub fn filled(side: usize, value: f32) -> Self {
        Self { side, data: vec![value; CHANNELS * side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.side + y) * self.side + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.side + y) * self.side + x] = v;
    }

    pub fn shape(&self) -> [usize; 3] {
        [CHANNELS, self.side, self.side]
    }

    /// Clamps to `[0, 1]` and rounds every pixel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self { side: self.side, data: self.data.iter().map(|&v| quantize(v)).collect() }
    }

    pub fn clamped(&self) -> Self {
        Self { side: self.side, data: self.data.iter().map(|&v| v.clamp(0.0, 1.0)).collect() }
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let ok = match s.len() {
            3 => s[0] == CHANNELS && s[1] == s[2],
            4 => s[0] == 1 && s[1] == CHANNELS && s[2] == s[3],
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!("tensor {s:?} is not a single square RGB image")));
        }
        let side = s[s.len() - 1];
        Ok(Self { side, data: t.data().iter().map(|v| v.as_f64() as f32).collect() })
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, CHANNELS, self.side, self.side],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.side, other.side);
        let s: f64 = self.data.iter().zip(&other.data).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        s / self.data.len() as f64
    }

    pub fn linf(&self, other: &Image) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn from_rgb(img: &RgbImage) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::Shape(format!("image is {}x{}, expected square", img.width(), img.height())));
        }
        let side = img.width() as usize;
        let mut data = vec![0.0; CHANNELS * side * side];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * side + y as usize) * side + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Ok(Self { side, data })
    }

    pub fn to_rgb(&self) -> RgbImage {
        let side = self.side as u32;
        ImageBuffer::from_fn(side, side, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([0, 1, 2].map(|c| (quantize(self.get(c, y, x)) * 255.0).round() as u8))
        })
    }

    /// Decodes any supported format and resizes to `side x side`.
    pub fn load(path: &Path, side: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, side).map_err(|e| match e {
            Error::ImageDecode { msg, .. } => Error::ImageDecode { path: path.to_path_buf(), msg },
            other => other,
        })
    }

    /// As [`Image::load`] for an in-memory encoded file.
    pub fn decode(bytes: &[u8], side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::invalid("image side must be positive"));
        }
        let fail = |msg: String| Error::ImageDecode { path: PathBuf::new(), msg };
        let mut reader = image::ImageReader::new(std::io::Cursor::new(bytes)).with_guessed_format().map_err(|e| fail(e.to_string()))?;
        let mut limits = image::Limits::default();
        limits.max_image_width = Some(MAX_DECODE_SIDE);
        limits.max_image_height = Some(MAX_DECODE_SIDE);
        limits.max_alloc = Some(256 << 20);
        reader.limits(limits);
        let img = reader.decode().map_err(|e| fail(e.to_string()))?.to_rgb8();
        if img.width() == 0 || img.height() == 0 {
            return Err(fail("empty image".into()));
        }
        let resized = if img.width() as usize == side && img.height() as usize == side {
            img
        } else {
            image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle)
        };
        Self::from_rgb(&resized)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::ImageDecode { path: path.to_path_buf(), msg: e.to_string() })
    }
}

pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Stacks images into `[N, C, H, W]`.
pub fn batch_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let side = first.side;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.side != side {
            return Err(Error::Shape(format!("image side {} in batch of side {side}", img.side)));
        }
        data.extend(img.data.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::from_vec(&[images.len(), CHANNELS, side, side], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_for_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(4, 0.0);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = quantize(i as f32 / 47.0);
        }
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path, 4).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn load_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.png");
        Image::filled(16, 0.5).save_png(&path).unwrap();
        let img = Image::load(&path, 8).unwrap();
        assert_eq!(img.side(), 8);
        assert!(img.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn decode_matches_load_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        Image::filled(8, 0.2).save_png(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(Image::decode(&bytes, 8).unwrap(), Image::load(&path, 8).unwrap());
        assert!(Image::decode(&bytes[..bytes.len() / 2], 8).is_err());
        assert!(Image::decode(b"not an image", 8).is_err());
        assert!(Image::decode(&bytes, 0).is_err());
        std::fs::write(dir.path().join("bad.png"), b"junk").unwrap();
        let err = Image::load(&dir.path().join("bad.png"), 8).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }

    #[test]
    fn tensor_conversion_checks_shape() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4, 4]);
        assert!(Image::from_tensor(&t).is_err());
        let img = Image::filled(4, 0.25);
        assert_eq!(Image::from_tensor(&img.to_tensor::<f32>()).unwrap(), img);
    }
}
