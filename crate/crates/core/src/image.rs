//! RGB image buffer ([H,W,3] in [0,1]) and PNG import/export.

use std::path::Path;

use splatmark_autograd::{real, Real, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage<T: Real> {
    pub height: usize,
    pub width: usize,
    /// Row-major [H,W,3].
    pub data: Tensor<T>,
}

impl<T: Real> RenderedImage<T> {
    pub fn new(height: usize, width: usize, data: Tensor<T>) -> Result<Self> {
        if data.shape() != [height, width, 3] {
            return Err(Error::Shape(format!(
                "image tensor shape {:?} does not match {height}x{width}x3",
                data.shape()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Self {
        let mut data = Tensor::zeros(&[height, width, 3]);
        for px in data.data_mut().chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        let o = (y * self.width + x) * 3;
        let d = self.data.data();
        [d[o], d[o + 1], d[o + 2]]
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(self.width * self.height * 3);
        for &v in self.data.data() {
            let x = Real::as_f64(v).clamp(0.0, 1.0);
            buf.push((x * 255.0).round() as u8);
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer size matches");
        img.save(path.as_ref())
            .map_err(|e| Error::Format(format!("PNG write failed: {e}")))?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())
            .map_err(|e| Error::Format(format!("image read failed: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Tensor::zeros(&[h, w, 3]);
        for (i, v) in img.into_raw().into_iter().enumerate() {
            data.data_mut()[i] = real(v as f64 / 255.0);
        }
        Ok(Self { height: h, width: w, data })
    }

    /// Lossy JPEG round trip at the given quality (non-differentiable; used
    /// for evaluation-time reporting).
    pub fn jpeg_round_trip(&self, quality: u8) -> Result<Self> {
        let mut buf = Vec::with_capacity(self.width * self.height * 3);
        for &v in self.data.data() {
            buf.push((Real::as_f64(v).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer size matches");
        let mut bytes = Vec::new();
        let mut enc =
            image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, quality);
        enc.encode_image(&img)
            .map_err(|e| Error::Format(format!("JPEG encode failed: {e}")))?;
        let back = image::load_from_memory(&bytes)
            .map_err(|e| Error::Format(format!("JPEG decode failed: {e}")))?
            .to_rgb8();
        let mut data = Tensor::zeros(&[self.height, self.width, 3]);
        for (i, v) in back.into_raw().into_iter().enumerate() {
            data.data_mut()[i] = real(v as f64 / 255.0);
        }
        Ok(Self { height: self.height, width: self.width, data })
    }

    /// Amplified absolute difference for qualitative inspection.
    pub fn diff_amplified(&self, other: &Self, factor: f64) -> Result<Self> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::Shape("image shape mismatch".into()));
        }
        let f = real::<T>(factor);
        let data = Tensor::new(
            self.data.shape(),
            self.data
                .data()
                .iter()
                .zip(other.data.data())
                .map(|(&a, &b)| ((a - b).abs() * f).min(T::one()))
                .collect(),
        );
        Ok(Self { height: self.height, width: self.width, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = RenderedImage::<f64>::filled(16, 12, [0.0, 0.5, 1.0]);
        for (i, v) in img.data.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        img.save_png(&path).unwrap();
        let back = RenderedImage::<f64>::load_png(&path).unwrap();
        assert_eq!(back.height, 16);
        assert_eq!(back.width, 12);
        for (a, b) in img.data.data().iter().zip(back.data.data()) {
            assert!((a - b).abs() < 0.5 / 255.0);
        }
    }

    #[test]
    fn jpeg_round_trip_stays_close() {
        let img = RenderedImage::<f64>::filled(32, 32, [0.25, 0.5, 0.75]);
        let back = img.jpeg_round_trip(90).unwrap();
        for (a, b) in img.data.data().iter().zip(back.data.data()) {
            assert!((a - b).abs() < 0.05);
        }
    }
}
