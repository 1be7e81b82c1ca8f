//! Grayscale images with edge-replicating samplers.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
    /// `data` quantized to 8 bits, cached for the pixel-difference tests.
    bytes: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image("image must have nonzero size".into()));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch { expected: width * height, found: data.len() });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Image("intensities must lie in [0, 1]".into()));
        }
        let bytes = data.iter().map(|v| (v * 255.0).round() as u8).collect();
        Ok(GrayImage { width, height, data, bytes })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        GrayImage::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        GrayImage::new(width, height, data)
    }

    /// Builds an image from 8-bit intensities, mapping `v -> v / 255`.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        GrayImage::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixel with edge replication outside the image.
    #[inline]
    pub fn clamped(&self, x: i64, y: i64) -> f32 {
        let cx = x.clamp(0, self.width as i64 - 1) as usize;
        let cy = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[cy * self.width + cx]
    }

    /// Bilinear sample at absolute pixel coordinates.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        self.view(0, 0).bilinear(Point2::new(x, y))
    }

    pub fn view(&self, ox: i64, oy: i64) -> ImageView<'_> {
        ImageView { img: self, ox, oy }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bytes.clone()
    }

    /// Loads an 8-bit grayscale or RGB(A) PNG; color is converted with Rec. 601 luma.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(g) => GrayImage::from_u8(w, h, g.as_raw()),
            other => {
                let rgb = other.to_rgb8();
                let luma: Vec<u8> = rgb
                    .pixels()
                    .map(|p| {
                        let [r, g, b] = p.0;
                        (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().clamp(0.0, 255.0) as u8
                    })
                    .collect();
                GrayImage::from_u8(w, h, &luma)
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// `floor` through an integer cast; saturates far outside the `i64` range.
#[inline]
fn fast_floor(x: f64) -> i64 {
    let t = x as i64;
    t - ((t as f64) > x) as i64
}

/// An image addressed in coordinates relative to an integer anchor.
///
/// Sampling splits local coordinates into integer and fractional parts before
/// adding the anchor, so shifting both the image content and the anchor by an
/// integer offset yields bit-identical samples.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    img: &'a GrayImage,
    ox: i64,
    oy: i64,
}

impl<'a> ImageView<'a> {
    pub fn image(&self) -> &'a GrayImage {
        self.img
    }

    pub fn anchor(&self) -> (i64, i64) {
        (self.ox, self.oy)
    }

    #[inline]
    pub fn bilinear(&self, p: Point2) -> f64 {
        let fx = p.x.floor();
        let fy = p.y.floor();
        let tx = p.x - fx;
        let ty = p.y - fy;
        let ix = self.ox + fx as i64;
        let iy = self.oy + fy as i64;
        let v00 = self.img.clamped(ix, iy) as f64;
        let v10 = self.img.clamped(ix + 1, iy) as f64;
        let v01 = self.img.clamped(ix, iy + 1) as f64;
        let v11 = self.img.clamped(ix + 1, iy + 1) as f64;
        let top = v00 + (v10 - v00) * tx;
        let bottom = v01 + (v11 - v01) * tx;
        top + (bottom - top) * ty
    }

    /// Nearest pixel (`floor(x + 0.5)`), quantized to 8-bit steps.
    #[inline]
    pub fn nearest_u8(&self, p: Point2) -> u8 {
        let img = self.img;
        let ix = (self.ox + fast_floor(p.x + 0.5)).clamp(0, img.width as i64 - 1) as usize;
        let iy = (self.oy + fast_floor(p.y + 0.5)).clamp(0, img.height as i64 - 1) as usize;
        img.bytes[iy * img.width + ix]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(GrayImage::new(1, 1, vec![1.5]).is_err());
        assert!(GrayImage::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn bilinear_interpolates_and_replicates() {
        let img = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!((img.bilinear(0.25, 0.0) - 0.25).abs() < 1e-12);
        assert_eq!(img.bilinear(-5.0, 3.0), 0.0);
        assert_eq!(img.bilinear(9.0, -1.0), 1.0);
    }

    #[test]
    fn anchored_sampling_is_translation_exact() {
        let img = GrayImage::from_fn(40, 40, |x, y| ((x * 7 + y * 13) % 17) as f32 / 16.0).unwrap();
        let shifted =
            GrayImage::from_fn(40, 40, |x, y| if x >= 3 && y >= 2 { img.get(x - 3, y - 2) } else { 0.0 }).unwrap();
        let p = Point2::new(10.37, 12.81);
        assert_eq!(img.view(5, 6).bilinear(p), shifted.view(8, 8).bilinear(p));
        assert_eq!(img.view(5, 6).nearest_u8(p), shifted.view(8, 8).nearest_u8(p));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = GrayImage::from_fn(7, 5, |x, y| ((x + 3 * y) * 9 % 256) as f32 / 255.0).unwrap();
        img.save_png(&path).unwrap();
        assert_eq!(GrayImage::load_png(&path).unwrap(), img);
    }
}
