//! Floating-point RGB rasters with PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Three-channel image with values nominally in `[0, 1]`, stored row-major
/// and channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be >= 1, got {width}x{height}"
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&value);
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut img = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn channel(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    /// Bilinear sample at a sub-pixel location (pixel centers on integer
    /// coordinates). Returns `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bottom = c[k] + (d[k] - c[k]) * fx;
            out[k] = top + (bottom - top) * fy;
        }
        Some(out)
    }

    /// Largest absolute per-sample difference.
    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// 8-bit quantized copy (values clamped to [0, 1]).
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (px, chunk) in out.pixels_mut().zip(self.data.chunks_exact(3)) {
            for k in 0..3 {
                px.0[k] = (chunk[k].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.pixels().flat_map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: "<memory>".into(),
                message: e.to_string(),
            })?;
        Ok(buf.into_inner())
    }
}

/// Peak signal-to-noise ratio in dB over the pixels selected by `region`,
/// for a peak value of 1.
pub fn psnr(a: &Image, b: &Image, region: impl Fn(usize, usize) -> bool) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !region(x, y) {
                continue;
            }
            let (p, q) = (a.get(x, y), b.get(x, y));
            for k in 0..3 {
                se += (p[k] - q[k]).powi(2);
            }
            n += 3;
        }
    }
    if n == 0 || se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / (se / n as f64)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dimensions_rejected() {
        assert!(Image::new(0, 3).is_err());
        assert!(Image::new(3, 0).is_err());
    }

    #[test]
    fn bilinear_interpolates_and_bounds() {
        let img = Image::from_fn(3, 2, |x, y| [x as f64, y as f64, 0.5]).unwrap();
        assert_eq!(img.sample_bilinear(1.5, 0.25), Some([1.5, 0.25, 0.5]));
        assert_eq!(img.sample_bilinear(2.0, 1.0), Some([2.0, 1.0, 0.5]));
        assert_eq!(img.sample_bilinear(-0.01, 0.0), None);
        assert_eq!(img.sample_bilinear(2.01, 0.0), None);
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let img = Image::from_fn(5, 4, |x, y| [x as f64 / 4.0, y as f64 / 3.0, ((x + y) % 2) as f64]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path).unwrap();
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }
}
