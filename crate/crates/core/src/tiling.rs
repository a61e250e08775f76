//! Overlapping square tiles gated by Shannon entropy.
//!
//! A tile is kept when its luminance entropy is at least the entropy of the
//! whole image it was cut from. The tile grid starts at the origin and steps
//! by `stride` on both axes; remainders at the right and bottom edges are not
//! padded with extra tiles.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::imaging::CanvasImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub side_px: u32,
    pub overlap_fraction: f64,
}

impl TileSpec {
    pub fn new(side_px: u32, overlap_fraction: f64) -> Result<Self> {
        if side_px < 2 {
            return Err(Error::Config(format!("tile side must be >= 2, got {side_px}")));
        }
        if !(0.0..1.0).contains(&overlap_fraction) {
            return Err(Error::Config(format!(
                "overlap must lie in [0, 1), got {overlap_fraction}"
            )));
        }
        Ok(Self {
            side_px,
            overlap_fraction,
        })
    }

    /// Grid step: `side * (1 - overlap)` rounded to nearest, at least 1.
    pub fn stride(&self) -> u32 {
        ((self.side_px as f64 * (1.0 - self.overlap_fraction)).round() as u32).max(1)
    }

    /// Grid positions along one axis of length `dim`.
    pub fn positions_per_axis(&self, dim: u32) -> u32 {
        if dim < self.side_px {
            0
        } else {
            (dim - self.side_px) / self.stride() + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileLabel {
    Positive,
    Comparative,
    Unlabeled,
}

impl TileLabel {
    pub fn target(self) -> Option<f32> {
        match self {
            TileLabel::Positive => Some(1.0),
            TileLabel::Comparative => Some(0.0),
            TileLabel::Unlabeled => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub x: u32,
    pub y: u32,
    pub side: u32,
    pub entropy_bits: f64,
    pub source_id: String,
    pub label: TileLabel,
}

/// 256-bin intensity histogram.
pub fn histogram(pixels: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &p in pixels {
        h[p as usize] += 1;
    }
    h
}

/// Entropy in bits of a histogram, summed in bin order.
pub fn histogram_entropy(hist: &[u64; 256]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // A single occupied bin gives -1 * log2(1) = -0.0.
    h.max(0.0)
}

/// Shannon entropy (bits) of 8-bit samples; result lies in [0, 8].
pub fn shannon_entropy(region: &[u8]) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::Empty("entropy of an empty region".into()));
    }
    Ok(histogram_entropy(&histogram(region)))
}

fn window_histogram(img: &CanvasImage, x: u32, y: u32, side: u32) -> [u64; 256] {
    let mut h = [0u64; 256];
    let w = img.width() as usize;
    let px = img.pixels();
    for row in y as usize..(y + side) as usize {
        let start = row * w + x as usize;
        for &p in &px[start..start + side as usize] {
            h[p as usize] += 1;
        }
    }
    h
}

/// Entropy of a square window of a luminance image.
pub fn window_entropy(img: &CanvasImage, x: u32, y: u32, side: u32) -> f64 {
    histogram_entropy(&window_histogram(img, x, y, side))
}

/// Row-major grid origins. Empty when the image is smaller than the tile.
pub fn tile_positions(width: u32, height: u32, spec: &TileSpec) -> Vec<(u32, u32)> {
    let stride = spec.stride();
    let nx = spec.positions_per_axis(width);
    let ny = spec.positions_per_axis(height);
    let mut out = Vec::with_capacity(nx as usize * ny as usize);
    for j in 0..ny {
        for i in 0..nx {
            out.push((i * stride, j * stride));
        }
    }
    out
}

/// Closed-form count of grid tiles, before gating.
pub fn grid_tile_count(width: u32, height: u32, spec: &TileSpec) -> usize {
    spec.positions_per_axis(width) as usize * spec.positions_per_axis(height) as usize
}

/// Grid tiles whose entropy is at least `threshold`, in row-major order.
pub fn tiles_above(
    img: &CanvasImage,
    spec: &TileSpec,
    threshold: f64,
    label: TileLabel,
    mode: Execution,
) -> Vec<Tile> {
    assert_eq!(img.channels(), 1, "tile gating expects a luminance image");
    let positions = tile_positions(img.width(), img.height(), spec);
    let side = spec.side_px;
    let entropies = exec::map_slice(mode, &positions, |&(x, y)| window_entropy(img, x, y, side));
    positions
        .into_iter()
        .zip(entropies)
        .filter(|&(_, h)| h >= threshold)
        .map(|((x, y), entropy_bits)| Tile {
            x,
            y,
            side,
            entropy_bits,
            source_id: img.source_id().to_string(),
            label,
        })
        .collect()
}

/// Entropy of the whole luminance image: the gating threshold.
pub fn image_entropy(img: &CanvasImage) -> f64 {
    assert_eq!(img.channels(), 1, "entropy expects a luminance image");
    histogram_entropy(&histogram(img.pixels()))
}

/// Salient tiles: grid tiles at least as entropic as the image itself.
pub fn salient_tiles(img: &CanvasImage, spec: &TileSpec, label: TileLabel) -> Vec<Tile> {
    salient_tiles_with(img, spec, label, Execution::default())
}

pub fn salient_tiles_with(
    img: &CanvasImage,
    spec: &TileSpec,
    label: TileLabel,
    mode: Execution,
) -> Vec<Tile> {
    tiles_above(img, spec, image_entropy(img), label, mode)
}

/// One line of a tile-set index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub source_id: String,
    pub x: u32,
    pub y: u32,
    pub side: u32,
    pub entropy: f64,
    pub label: TileLabel,
    pub file: String,
}

pub const INDEX_FILE: &str = "index.jsonl";

pub fn crop_file_name(tile: &Tile) -> String {
    format!("{}_{}_{}_{}.png", tile.source_id, tile.x, tile.y, tile.side)
}

/// Writes PNG crops plus `index.jsonl` into `dir`. `image_for` resolves a
/// tile's source image.
pub fn write_tile_dir<'a>(
    dir: &Path,
    tiles: &[Tile],
    image_for: impl Fn(&str) -> Option<&'a CanvasImage>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join(INDEX_FILE);
    let file = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut index = BufWriter::new(file);
    for tile in tiles {
        let img = image_for(&tile.source_id).ok_or_else(|| {
            Error::InvalidImage(format!("no image for tile source `{}`", tile.source_id))
        })?;
        let name = crop_file_name(tile);
        let crop = img.crop_square(tile.x, tile.y, tile.side);
        let path = dir.join(&name);
        image::GrayImage::from_raw(tile.side, tile.side, crop)
            .expect("square crop")
            .save(&path)
            .map_err(|source| Error::Decode {
                path: path.clone(),
                source,
            })?;
        let record = TileRecord {
            source_id: tile.source_id.clone(),
            x: tile.x,
            y: tile.y,
            side: tile.side,
            entropy: tile.entropy_bits,
            label: tile.label,
            file: name,
        };
        serde_json::to_writer(&mut index, &record)?;
        index.write_all(b"\n").map_err(|e| Error::io(&index_path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

pub fn read_tile_index(dir: &Path) -> Result<Vec<TileRecord>> {
    let path = dir.join(INDEX_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TileRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};
    use proptest::prelude::*;

    fn gray(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> CanvasImage {
        CanvasImage::from_gray("img", GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])), Some(25.0))
            .unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&[9; 100]).unwrap(), 0.0);
        let halves: Vec<u8> = (0..100).map(|i| if i < 50 { 0 } else { 255 }).collect();
        assert!((shannon_entropy(&halves).unwrap() - 1.0).abs() < 1e-12);
        let quarters: Vec<u8> = (0..400).map(|i| [10, 20, 30, 40][i % 4]).collect();
        assert!((shannon_entropy(&quarters).unwrap() - 2.0).abs() < 1e-12);
        let all: Vec<u8> = (0..=255).collect();
        assert!((shannon_entropy(&all).unwrap() - 8.0).abs() < 1e-12);
        assert!(shannon_entropy(&[]).is_err());
    }

    #[test]
    fn stride_rounding_at_350() {
        let s = |o| TileSpec::new(350, o).unwrap().stride();
        assert_eq!((s(0.88), s(0.92), s(0.94)), (42, 28, 21));
        assert_eq!(TileSpec::new(10, 0.99).unwrap().stride(), 1);
        assert!(TileSpec::new(1, 0.5).is_err());
        assert!(TileSpec::new(10, 1.0).is_err());
    }

    #[test]
    fn position_examples() {
        let spec = TileSpec::new(100, 0.0).unwrap();
        assert_eq!(tile_positions(100, 100, &spec), vec![(0, 0)]);
        // (700 - 350) / 28 + 1 = 13, (700 - 350) / 21 + 1 = 17
        assert_eq!(tile_positions(700, 700, &TileSpec::new(350, 0.92).unwrap()).len(), 169);
        assert_eq!(tile_positions(700, 700, &TileSpec::new(350, 0.94).unwrap()).len(), 289);
        assert!(tile_positions(99, 500, &spec).is_empty());
        let p = tile_positions(300, 250, &TileSpec::new(100, 0.5).unwrap());
        assert_eq!(&p[..6], &[(0, 0), (50, 0), (100, 0), (150, 0), (200, 0), (0, 50)]);
    }

    #[test]
    fn constant_image_keeps_every_tile() {
        let img = gray(400, 400, |_, _| 77);
        let spec = TileSpec::new(100, 0.5).unwrap();
        let tiles = salient_tiles(&img, &spec, TileLabel::Unlabeled);
        assert_eq!(tiles.len(), grid_tile_count(400, 400, &spec));
        assert!(tiles.iter().all(|t| t.entropy_bits == 0.0));
    }

    #[test]
    fn boundary_tile_with_equal_entropy_passes() {
        // A 2x2 checkerboard: every even-sided tile has exactly the global histogram shape.
        let img = gray(64, 64, |x, y| if (x + y) % 2 == 0 { 0 } else { 255 });
        let spec = TileSpec::new(16, 0.5).unwrap();
        assert_eq!(image_entropy(&img), 1.0);
        let tiles = salient_tiles(&img, &spec, TileLabel::Unlabeled);
        assert_eq!(tiles.len(), grid_tile_count(64, 64, &spec));
        assert!(tiles.iter().all(|t| t.entropy_bits == image_entropy(&img)));
    }

    #[test]
    fn noise_half_passes_constant_half_fails() {
        let img = gray(200, 100, |x, y| {
            if x < 100 {
                (crate::seed::splitmix64(((y as u64) << 32) | x as u64) & 0xff) as u8
            } else {
                128
            }
        });
        let spec = TileSpec::new(50, 0.0).unwrap();
        let global = image_entropy(&img);
        let noise = window_entropy(&img, 0, 0, 50);
        assert!(noise > global && global > 0.0);
        let tiles = salient_tiles(&img, &spec, TileLabel::Positive);
        assert_eq!(tiles.len(), 4);
        assert!(tiles.iter().all(|t| t.x + t.side <= 100));
    }

    #[test]
    fn parallel_and_sequential_gating_agree() {
        let img = gray(300, 260, |x, y| ((x * 31 + y * 17 + (x * y) % 13) % 256) as u8);
        let spec = TileSpec::new(60, 0.8).unwrap();
        let a = salient_tiles_with(&img, &spec, TileLabel::Unlabeled, Execution::Parallel);
        let b = salient_tiles_with(&img, &spec, TileLabel::Unlabeled, Execution::Sequential);
        assert_eq!(a, b);
    }

    #[test]
    fn tile_dir_round_trip() {
        let img = gray(120, 120, |x, y| (x ^ y) as u8);
        let spec = TileSpec::new(60, 0.5).unwrap();
        let tiles = tiles_above(&img, &spec, 0.0, TileLabel::Comparative, Execution::Sequential);
        assert_eq!(tiles.len(), 9);
        let dir = tempfile::tempdir().unwrap();
        write_tile_dir(dir.path(), &tiles, |_| Some(&img)).unwrap();
        let records = read_tile_index(dir.path()).unwrap();
        assert_eq!(records.len(), tiles.len());
        let r = &records[1];
        let crop = image::open(dir.path().join(&r.file)).unwrap().into_luma8();
        assert_eq!(crop.into_raw(), img.crop_square(r.x, r.y, r.side));
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(mut px in prop::collection::vec(any::<u8>(), 1..500), seed in any::<u64>()) {
            let h = shannon_entropy(&px).unwrap();
            prop_assert!((0.0..=8.0).contains(&h));
            let n = px.len();
            for i in (1..n).rev() {
                let j = (crate::seed::splitmix64(seed ^ i as u64) % (i as u64 + 1)) as usize;
                px.swap(i, j);
            }
            prop_assert_eq!(h, shannon_entropy(&px).unwrap());
        }

        #[test]
        fn tiles_inside_and_gating_monotone(
            w in 20u32..160, h in 20u32..160, side in 2u32..40, overlap in 0.0f64..0.95,
            t1 in 0.0f64..8.0, dt in 0.0f64..2.0, seed in any::<u64>()
        ) {
            let img = gray(w, h, |x, y| (crate::seed::splitmix64(seed ^ ((x as u64) << 20) ^ y as u64) % 40) as u8 + (x % 7) as u8 * 20);
            let spec = TileSpec::new(side, overlap).unwrap();
            let positions = tile_positions(w, h, &spec);
            prop_assert_eq!(positions.len(), grid_tile_count(w, h, &spec));
            for &(x, y) in &positions {
                prop_assert!(x + side <= w && y + side <= h);
            }
            let lo = tiles_above(&img, &spec, t1, TileLabel::Unlabeled, Execution::Sequential);
            let hi = tiles_above(&img, &spec, t1 + dt, TileLabel::Unlabeled, Execution::Sequential);
            prop_assert!(hi.len() <= lo.len());
            prop_assert!(hi.iter().all(|t| lo.contains(t)));
        }
    }
}
