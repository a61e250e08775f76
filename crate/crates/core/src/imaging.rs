//! Source rasters and resampling to a uniform physical pixel density.
//!
//! Density (pixels per canvas centimetre) never comes from file metadata; it
//! is supplied by the manifest, which knows the canvas width.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An 8-bit raster with 1 (luminance) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CanvasImage {
    width: u32,
    height: u32,
    channels: u8,
    density_px_per_cm: Option<f64>,
    source_id: String,
    pixels: Vec<u8>,
}

impl CanvasImage {
    pub fn new(
        source_id: impl Into<String>,
        width: u32,
        height: u32,
        channels: u8,
        density_px_per_cm: Option<f64>,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "`{source_id}` has zero extent ({width}x{height})"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "`{source_id}` has {channels} channels, expected 1 or 3"
            )));
        }
        if let Some(d) = density_px_per_cm {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidImage(format!(
                    "`{source_id}` has nonpositive density {d}"
                )));
            }
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(Error::InvalidImage(format!(
                "`{source_id}` pixel buffer holds {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            density_px_per_cm,
            source_id,
            pixels,
        })
    }

    pub fn from_gray(source_id: impl Into<String>, img: GrayImage, density: Option<f64>) -> Result<Self> {
        let (w, h) = img.dimensions();
        Self::new(source_id, w, h, 1, density, img.into_raw())
    }

    /// Decodes a PNG or JPEG. Grayscale sources stay single-channel, everything
    /// else becomes RGB (alpha is dropped).
    pub fn load(path: &Path, source_id: impl Into<String>, density: Option<f64>) -> Result<Self> {
        let decoded = image::open(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = matches!(
            decoded,
            DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
        );
        if gray {
            Self::from_gray(source_id, decoded.into_luma8(), density)
        } else {
            let rgb = decoded.into_rgb8();
            let (w, h) = rgb.dimensions();
            Self::new(source_id, w, h, 3, density, rgb.into_raw())
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let res = match self.channels {
            1 => self.to_gray_image().save(path),
            _ => RgbImage::from_raw(self.width, self.height, self.pixels.clone())
                .expect("buffer length checked at construction")
                .save(path),
        };
        res.map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn density(&self) -> Option<f64> {
        self.density_px_per_cm
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn with_density(mut self, density: f64) -> Result<Self> {
        if !(density.is_finite() && density > 0.0) {
            return Err(Error::InvalidImage(format!(
                "`{}`: nonpositive density {density}",
                self.source_id
            )));
        }
        self.density_px_per_cm = Some(density);
        Ok(self)
    }

    /// Luminance value at (x, y). Only meaningful for single-channel images.
    #[inline]
    pub fn luma(&self, x: u32, y: u32) -> u8 {
        debug_assert_eq!(self.channels, 1);
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn to_gray_image(&self) -> GrayImage {
        let lum = to_luminance(self);
        ImageBuffer::<Luma<u8>, _>::from_raw(lum.width, lum.height, lum.pixels)
            .expect("buffer length checked at construction")
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        match self.channels {
            3 => RgbImage::from_raw(self.width, self.height, self.pixels.clone())
                .expect("buffer length checked at construction"),
            _ => ImageBuffer::from_fn(self.width, self.height, |x, y| {
                let v = self.luma(x, y);
                Rgb([v, v, v])
            }),
        }
    }

    /// Copies a square window of a single-channel image.
    pub fn crop_square(&self, x: u32, y: u32, side: u32) -> Vec<u8> {
        assert_eq!(self.channels, 1, "crop_square expects luminance");
        assert!(x + side <= self.width && y + side <= self.height);
        let w = self.width as usize;
        let mut out = Vec::with_capacity(side as usize * side as usize);
        for row in y..y + side {
            let start = row as usize * w + x as usize;
            out.extend_from_slice(&self.pixels[start..start + side as usize]);
        }
        out
    }
}

/// Maps RGB to luminance with fixed BT.601 weights; luminance passes through.
pub fn to_luminance(img: &CanvasImage) -> CanvasImage {
    if img.channels == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| {
            let y = LUMA_WEIGHTS[0] * p[0] as f64
                + LUMA_WEIGHTS[1] * p[1] as f64
                + LUMA_WEIGHTS[2] * p[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    CanvasImage {
        channels: 1,
        pixels,
        ..img.clone_header()
    }
}

impl CanvasImage {
    fn clone_header(&self) -> CanvasImage {
        CanvasImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            density_px_per_cm: self.density_px_per_cm,
            source_id: self.source_id.clone(),
            pixels: Vec::new(),
        }
    }
}

/// Output dimension for a rescale: nearest integer, never below one pixel.
pub fn scaled_dimension(dim: u32, ratio: f64) -> u32 {
    ((dim as f64 * ratio).round() as u32).max(1)
}

/// Resamples to `target_density` px/cm. Identity when densities agree.
pub fn resample_to_density(img: &CanvasImage, target_density: f64) -> Result<CanvasImage> {
    let source = img
        .density_px_per_cm
        .ok_or_else(|| Error::DensityRequired(img.source_id.clone()))?;
    if !(target_density.is_finite() && target_density > 0.0) {
        return Err(Error::Config(format!(
            "target density must be positive, got {target_density}"
        )));
    }
    if source == target_density {
        return Ok(img.clone());
    }
    let ratio = target_density / source;
    let w = scaled_dimension(img.width, ratio);
    let h = scaled_dimension(img.height, ratio);
    let mut out = resize(img, w, h);
    out.density_px_per_cm = Some(target_density);
    Ok(out)
}

/// Resizes each axis independently: area averaging when the axis shrinks,
/// bilinear interpolation when it grows, copy when it is unchanged.
pub fn resize(img: &CanvasImage, width: u32, height: u32) -> CanvasImage {
    assert!(width >= 1 && height >= 1);
    let pixels = resize_raw(
        &img.pixels,
        img.width as usize,
        img.height as usize,
        img.channels as usize,
        width as usize,
        height as usize,
    );
    CanvasImage {
        width,
        height,
        pixels,
        ..img.clone_header()
    }
}

/// Resizes a row-major interleaved buffer; see [`resize`].
pub fn resize_raw(
    src: &[u8],
    src_w: usize,
    src_h: usize,
    channels: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<u8> {
    if src_w == dst_w && src_h == dst_h {
        return src.to_vec();
    }
    let xs = axis_weights(src_w, dst_w);
    let ys = axis_weights(src_h, dst_h);

    // Horizontal pass into f64 rows, then vertical pass.
    let mut tmp = vec![0.0f64; dst_w * src_h * channels];
    for y in 0..src_h {
        let row = &src[y * src_w * channels..(y + 1) * src_w * channels];
        let out = &mut tmp[y * dst_w * channels..(y + 1) * dst_w * channels];
        for (ox, taps) in xs.iter().enumerate() {
            for c in 0..channels {
                out[ox * channels + c] = taps
                    .iter()
                    .map(|&(ix, w)| w * row[ix * channels + c] as f64)
                    .sum();
            }
        }
    }
    let mut dst = vec![0u8; dst_w * dst_h * channels];
    let stride = dst_w * channels;
    for (oy, taps) in ys.iter().enumerate() {
        for i in 0..stride {
            let v: f64 = taps.iter().map(|&(iy, w)| w * tmp[iy * stride + i]).sum();
            dst[oy * stride + i] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    dst
}

/// Per-output-sample (source index, weight) taps along one axis.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    if src == dst {
        return (0..dst).map(|i| vec![(i, 1.0)]).collect();
    }
    if dst < src {
        // Box filter: output pixel i covers [i, i+1) * scale in source units.
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let start = i as f64 * scale;
                let end = (i + 1) as f64 * scale;
                let first = start.floor() as usize;
                let last = (end.ceil() as usize).min(src);
                let mut taps: Vec<(usize, f64)> = (first..last)
                    .map(|s| {
                        let lo = start.max(s as f64);
                        let hi = end.min((s + 1) as f64);
                        (s, (hi - lo).max(0.0))
                    })
                    .filter(|&(_, w)| w > 0.0)
                    .collect();
                let total: f64 = taps.iter().map(|t| t.1).sum();
                for t in &mut taps {
                    t.1 /= total;
                }
                taps
            })
            .collect()
    } else {
        // Bilinear with pixel-centre alignment, edge-clamped.
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                let frac = pos - lo as f64;
                if hi == lo || frac == 0.0 {
                    vec![(lo, 1.0)]
                } else {
                    vec![(lo, 1.0 - frac), (hi, frac)]
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rgb(w: u32, h: u32, px: [u8; 3], density: Option<f64>) -> CanvasImage {
        let pixels = (0..w * h).flat_map(|_| px).collect();
        CanvasImage::new("t", w, h, 3, density, pixels).unwrap()
    }

    fn gray_from_fn(w: u32, h: u32, density: f64, f: impl Fn(u32, u32) -> u8) -> CanvasImage {
        let img = GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)]));
        CanvasImage::from_gray("g", img, Some(density)).unwrap()
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(CanvasImage::new("a", 0, 3, 1, None, vec![]).is_err());
        assert!(CanvasImage::new("a", 2, 2, 2, None, vec![0; 8]).is_err());
        assert!(CanvasImage::new("a", 2, 2, 1, Some(0.0), vec![0; 4]).is_err());
        assert!(CanvasImage::new("a", 2, 2, 1, None, vec![0; 5]).is_err());
    }

    #[test]
    fn half_scale_dimensions() {
        let img = gray_from_fn(5000, 4000, 50.0, |_, _| 7);
        let out = resample_to_density(&img, 25.0).unwrap();
        assert_eq!((out.width(), out.height()), (2500, 2000));
        assert_eq!(out.density(), Some(25.0));
        assert!(out.pixels().iter().all(|&p| p == 7));
    }

    #[test]
    fn non_integer_ratio_dimensions() {
        // 3333 * 25 / 33.3 = 2502.25..., 2100 * 25 / 33.3 = 1576.58...
        let img = gray_from_fn(3333, 2100, 33.3, |x, y| ((x + y) % 256) as u8);
        let out = resample_to_density(&img, 25.0).unwrap();
        assert_eq!((out.width(), out.height()), (2502, 1577));
    }

    #[test]
    fn same_density_is_byte_identical() {
        let img = gray_from_fn(37, 23, 25.0, |x, y| (x * 7 + y * 13) as u8);
        let out = resample_to_density(&img, 25.0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn missing_density_is_rejected() {
        let img = rgb(4, 4, [1, 2, 3], None);
        let err = resample_to_density(&img, 25.0).unwrap_err();
        assert!(matches!(err, Error::DensityRequired(_)));
        assert!(err.to_string().contains("density required"));
    }

    #[test]
    fn luminance_examples() {
        assert!(to_luminance(&rgb(3, 2, [255, 255, 255], None))
            .pixels()
            .iter()
            .all(|&p| p == 255));
        // round(0.299 * 255) = round(76.245) = 76
        let red = to_luminance(&rgb(3, 2, [255, 0, 0], None));
        assert_eq!(red.channels(), 1);
        assert!(red.pixels().iter().all(|&p| p == 76));
        let gray = gray_from_fn(5, 5, 1.0, |x, y| (x * y) as u8);
        assert_eq!(to_luminance(&gray), gray);
    }

    #[test]
    fn upscale_is_bilinear_and_bounded() {
        let img = gray_from_fn(2, 1, 10.0, |x, _| if x == 0 { 0 } else { 200 });
        let out = resample_to_density(&img, 20.0).unwrap();
        assert_eq!((out.width(), out.height()), (4, 2));
        assert_eq!(&out.pixels()[..4], &[0, 50, 150, 200]);
    }

    proptest! {
        #[test]
        fn resample_is_idempotent_and_mean_preserving(
            w in 8u32..90, h in 8u32..90, seed in any::<u64>(), target in 3.0f64..24.0
        ) {
            let img = gray_from_fn(w, h, 25.0, |x, y| {
                (crate::seed::splitmix64(seed ^ ((y as u64) << 32 | x as u64)) % 256) as u8
            });
            let once = resample_to_density(&img, target).unwrap();
            let twice = resample_to_density(&once, target).unwrap();
            prop_assert_eq!(&once, &twice);
            let mean = |c: &CanvasImage| {
                c.pixels().iter().map(|&p| p as f64).sum::<f64>() / c.pixels().len() as f64
            };
            prop_assert!((mean(&img) - mean(&once)).abs() <= 2.0);
            let ratio = target / 25.0;
            prop_assert_eq!(once.width(), scaled_dimension(w, ratio));
            prop_assert_eq!(once.height(), scaled_dimension(h, ratio));
        }

        #[test]
        fn luminance_stays_in_range(r in any::<u8>(), g in any::<u8>(), b in any::<u8>()) {
            let lum = to_luminance(&rgb(1, 1, [r, g, b], None));
            let expected = (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round();
            prop_assert_eq!(lum.pixels()[0] as f64, expected);
        }
    }
}
