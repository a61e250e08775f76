//! Tile probabilities aggregated into image-level scores and per-pixel
//! probability maps, plus the four-band colour overlay.
//!
//! Only salient tiles are scored. A pixel's map value is the mean probability
//! of the salient tiles covering it; pixels no salient tile covers are
//! no-data (coverage 0, value NaN).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::cnn::Workspace;
use crate::dataset::ImageClass;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::imaging::CanvasImage;
use crate::tiling::{self, Tile, TileLabel, TileSpec};
use crate::trainer::{prepare_crop, TrainedModel};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTile {
    pub tile: Tile,
    pub probability: f32,
}

/// Scores every salient tile of a luminance image.
pub fn score_tiles(model: &TrainedModel, img: &CanvasImage, spec: &TileSpec) -> Result<Vec<ScoredTile>> {
    score_tiles_with(model, img, spec, Execution::default())
}

pub fn score_tiles_with(
    model: &TrainedModel,
    img: &CanvasImage,
    spec: &TileSpec,
    mode: Execution,
) -> Result<Vec<ScoredTile>> {
    if img.channels() != 1 {
        return Err(Error::InvalidImage(format!(
            "`{}` must be converted to luminance before scoring",
            img.source_id()
        )));
    }
    let net = model.network()?;
    let input_side = model.spec.input_side;
    let tiles = tiling::salient_tiles_with(img, spec, TileLabel::Unlabeled, mode);
    let probs = exec::map_slice(mode, &tiles, |t| {
        let x = prepare_crop(&img.crop_square(t.x, t.y, t.side), t.side, input_side);
        let mut ws = Workspace::default();
        net.predict_one(&x, &mut ws)
    });
    Ok(tiles
        .into_iter()
        .zip(probs)
        .map(|(tile, probability)| ScoredTile { tile, probability })
        .collect())
}

/// Arithmetic mean of tile probabilities, accumulated in tile order.
pub fn mean_probability(scored: &[ScoredTile], source_id: &str) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::NotAnalyzable(source_id.to_string()));
    }
    let sum: f64 = scored.iter().map(|s| s.probability as f64).sum();
    Ok(sum / scored.len() as f64)
}

/// Share of tiles with probability above 0.5. Reported alongside the mean,
/// never used for decisions.
pub fn fraction_positive(scored: &[ScoredTile]) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    scored.iter().filter(|s| s.probability > 0.5).count() as f64 / scored.len() as f64
}

/// Overall probability of an image: mean over its salient tiles.
pub fn image_probability(model: &TrainedModel, img: &CanvasImage, spec: &TileSpec) -> Result<f64> {
    let scored = score_tiles(model, img, spec)?;
    mean_probability(&scored, img.source_id())
}

/// `classify_image` decision: positive only strictly above the threshold.
pub fn classify_image(overall_prob: f64, threshold: f64) -> ImageClass {
    if overall_prob > threshold {
        ImageClass::Positive
    } else {
        ImageClass::Comparative
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: u32,
    pub height: u32,
    /// Row-major; NaN where `coverage` is 0.
    pub mean_prob: Vec<f32>,
    pub coverage: Vec<u32>,
}

impl ProbabilityMap {
    /// Averages scored tiles per pixel, accumulating in tile order.
    pub fn from_scored(width: u32, height: u32, scored: &[ScoredTile]) -> Self {
        let (w, h) = (width as usize, height as usize);
        let mut sums = vec![0.0f64; w * h];
        let mut coverage = vec![0u32; w * h];
        for s in scored {
            let t = &s.tile;
            let p = s.probability as f64;
            for y in t.y as usize..(t.y + t.side) as usize {
                let row = y * w;
                for x in t.x as usize..(t.x + t.side) as usize {
                    sums[row + x] += p;
                    coverage[row + x] += 1;
                }
            }
        }
        let mean_prob = sums
            .iter()
            .zip(&coverage)
            .map(|(&s, &c)| if c == 0 { f32::NAN } else { (s / c as f64) as f32 })
            .collect();
        Self {
            width,
            height,
            mean_prob,
            coverage,
        }
    }

    pub fn at(&self, x: u32, y: u32) -> Option<f32> {
        let i = (y * self.width + x) as usize;
        (self.coverage[i] > 0).then(|| self.mean_prob[i])
    }

    /// Coverage-weighted mean over covered pixels; equals the mean tile
    /// probability when built from the same tiles.
    pub fn coverage_weighted_mean(&self) -> Option<f64> {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (&p, &c) in self.mean_prob.iter().zip(&self.coverage) {
            if c > 0 {
                num += c as f64 * p as f64;
                den += c as f64;
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// Plain mean of covered pixels selected by `keep(x, y)`.
    pub fn region_mean(&self, keep: impl Fn(u32, u32) -> bool) -> Option<f64> {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if let Some(p) = self.at(x, y) {
                    if keep(x, y) {
                        sum += p as f64;
                        n += 1;
                    }
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn covered_pixels(&self) -> usize {
        self.coverage.iter().filter(|&&c| c > 0).count()
    }
}

pub fn probability_map(model: &TrainedModel, img: &CanvasImage, spec: &TileSpec) -> Result<ProbabilityMap> {
    let scored = score_tiles(model, img, spec)?;
    if scored.is_empty() {
        return Err(Error::NotAnalyzable(img.source_id().to_string()));
    }
    Ok(ProbabilityMap::from_scored(img.width(), img.height(), &scored))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityBin {
    /// p >= 0.65
    Red,
    /// 0.5 <= p < 0.65
    Gold,
    /// 0.35 < p < 0.5
    Green,
    /// p <= 0.35
    Blue,
}

pub const OVERLAY_ALPHA: u8 = 140;

impl ProbabilityBin {
    pub fn of(p: f32) -> Self {
        if p >= 0.65 {
            ProbabilityBin::Red
        } else if p >= 0.5 {
            ProbabilityBin::Gold
        } else if p > 0.35 {
            ProbabilityBin::Green
        } else {
            ProbabilityBin::Blue
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ProbabilityBin::Red => [220, 30, 30],
            ProbabilityBin::Gold => [230, 180, 40],
            ProbabilityBin::Green => [60, 160, 60],
            ProbabilityBin::Blue => [40, 60, 200],
        }
    }

    pub fn rgba(self) -> Rgba<u8> {
        let [r, g, b] = self.rgb();
        Rgba([r, g, b, OVERLAY_ALPHA])
    }
}

fn pixel_colour(map: &ProbabilityMap, i: usize) -> Rgba<u8> {
    if map.coverage[i] == 0 {
        Rgba([0, 0, 0, 0])
    } else {
        ProbabilityBin::of(map.mean_prob[i]).rgba()
    }
}

/// Four-band overlay at map resolution; no-data pixels are transparent.
pub fn render_map(map: &ProbabilityMap) -> RgbaImage {
    RgbaImage::from_fn(map.width, map.height, |x, y| {
        pixel_colour(map, (y * map.width + x) as usize)
    })
}

/// Overlay upsampled with nearest neighbour to `width x height`.
pub fn render_map_scaled(map: &ProbabilityMap, width: u32, height: u32) -> RgbaImage {
    RgbaImage::from_fn(width, height, |x, y| {
        let mx = ((x as u64 * map.width as u64) / width as u64) as u32;
        let my = ((y as u64 * map.height as u64) / height as u64) as u32;
        pixel_colour(map, (my * map.width + mx) as usize)
    })
}

/// Alpha-blends an overlay of the same size onto a base image.
pub fn composite(base: &RgbImage, overlay: &RgbaImage) -> Result<RgbImage> {
    if base.dimensions() != overlay.dimensions() {
        return Err(Error::Shape(format!(
            "overlay {:?} does not match base {:?}",
            overlay.dimensions(),
            base.dimensions()
        )));
    }
    Ok(RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let b = base.get_pixel(x, y).0;
        let o = overlay.get_pixel(x, y).0;
        let a = o[3] as f32 / 255.0;
        let mix = |i: usize| (b[i] as f32 * (1.0 - a) + o[i] as f32 * a).round() as u8;
        Rgb([mix(0), mix(1), mix(2)])
    }))
}

/// Header of the numeric map dump.
#[derive(Debug, Clone, PartialEq)]
pub struct MapDumpHeader {
    pub width: u32,
    pub height: u32,
    pub density: f64,
    pub tile_side: u32,
    pub overlap: f64,
    pub model_id: String,
}

const DUMP_TAG: &str = "salient-map 1";

/// Writes a text header (`key value` lines ending with `end`) followed by
/// `width*height` little-endian f32 mean probabilities (NaN = no data) and
/// `width*height` little-endian u32 coverage counts.
pub fn write_map_dump(path: &Path, header: &MapDumpHeader, map: &ProbabilityMap) -> Result<()> {
    let mut out = Vec::new();
    let text = format!(
        "{DUMP_TAG}\nwidth {}\nheight {}\ndensity {}\ntile_side {}\noverlap {}\nmodel_id {}\nend\n",
        map.width, map.height, header.density, header.tile_side, header.overlap, header.model_id
    );
    out.extend_from_slice(text.as_bytes());
    for v in &map.mean_prob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in &map.coverage {
        out.extend_from_slice(&c.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_map_dump(path: &Path) -> Result<(MapDumpHeader, ProbabilityMap)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let bad = |m: &str| Error::InvalidImage(format!("{}: {m}", path.display()));
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim_end() != DUMP_TAG {
        return Err(bad("not a map dump"));
    }
    let mut fields = std::collections::HashMap::new();
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("missing `end`"));
        }
        let l = line.trim_end();
        if l == "end" {
            break;
        }
        let (k, v) = l.split_once(' ').ok_or_else(|| bad("malformed header line"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(&format!("missing `{k}`")));
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(&format!("bad `{k}`"))) };
    let header = MapDumpHeader {
        width: num("width")? as u32,
        height: num("height")? as u32,
        density: num("density")?,
        tile_side: num("tile_side")? as u32,
        overlap: num("overlap")?,
        model_id: get("model_id")?,
    };
    let n = header.width as usize * header.height as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != 8 * n {
        return Err(bad("body length does not match dimensions"));
    }
    let (probs, cover) = body.split_at(4 * n);
    let map = ProbabilityMap {
        width: header.width,
        height: header.height,
        mean_prob: probs
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect(),
        coverage: cover
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect(),
    };
    Ok((header, map))
}
