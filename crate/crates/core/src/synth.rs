//! Deterministic two-class texture corpora for exercising the pipeline.
//!
//! Every image is a textured subject on a plain, narrow-valued ground. The
//! subject's grey levels are rank-mapped to a uniform distribution, so both
//! classes share the same histogram and differ only in spatial structure:
//! positives carry long diagonal strokes, comparatives one of four other
//! patterns (the synthetic "genres"). `contrast` blends each class pattern
//! with a pattern common to both classes; at 0 the classes are identical
//! in distribution.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Genre, ImageClass, ManifestEntry, PreparedImage, QualityFlag, Role};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::imaging::CanvasImage;
use crate::seed;

/// Comparative base patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Long strokes near 45 degrees; the positive class.
    DiagonalStrokes,
    /// Soft isotropic blobs.
    Blobs,
    /// Strokes near horizontal.
    HorizontalStrokes,
    /// Horizontal and vertical strokes superimposed.
    CrossHatch,
    /// Short strokes at random orientations.
    Grain,
}

pub const COMPARATIVE_PATTERNS: [Pattern; 4] = [
    Pattern::Blobs,
    Pattern::HorizontalStrokes,
    Pattern::CrossHatch,
    Pattern::Grain,
];

impl Pattern {
    fn genre(self) -> Genre {
        match self {
            Pattern::DiagonalStrokes => Genre::Other,
            Pattern::Blobs => Genre::Portrait,
            Pattern::HorizontalStrokes => Genre::ReligiousScene,
            Pattern::CrossHatch => Genre::MadonnaAndChild,
            Pattern::Grain => Genre::SingleFigure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_positive: usize,
    pub n_comparative: usize,
    pub n_test_positive: usize,
    pub n_test_comparative: usize,
    pub n_external: usize,
    pub image_side_px: u32,
    pub seed: u64,
    /// Class signal strength in [0, 1].
    pub contrast: f64,
    /// Proportions over [`COMPARATIVE_PATTERNS`].
    pub genre_mix: [f64; 4],
    /// Pixels per canvas centimetre written into the manifest.
    pub density: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_positive: 12,
            n_comparative: 37,
            n_test_positive: 2,
            n_test_comparative: 16,
            n_external: 0,
            image_side_px: 1024,
            seed: 1,
            contrast: 1.0,
            genre_mix: [0.25; 4],
            density: 25.0,
        }
    }
}

/// Smallest accepted image side.
pub const MIN_SIDE: u32 = 32;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_positive == 0 || self.n_comparative == 0 {
            return Err(Error::Config("synthetic corpus needs at least one image per class".into()));
        }
        if self.image_side_px < MIN_SIDE {
            return Err(Error::Config(format!(
                "image side {} below the {MIN_SIDE}px minimum",
                self.image_side_px
            )));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::Config(format!("contrast {} outside [0, 1]", self.contrast)));
        }
        let total: f64 = self.genre_mix.iter().sum();
        if self.genre_mix.iter().any(|&g| !(g >= 0.0)) || !(total > 0.0) {
            return Err(Error::Config("genre_mix needs nonnegative weights with a positive sum".into()));
        }
        if !(self.density > 0.0) {
            return Err(Error::Config(format!("density {} must be positive", self.density)));
        }
        Ok(())
    }

    /// Checks that the images fit at least two tiles of `side` per axis.
    pub fn check_tile_side(&self, side: u32) -> Result<()> {
        if self.image_side_px < 2 * side {
            return Err(Error::Config(format!(
                "image side {} must be at least twice the {side}px tile side",
                self.image_side_px
            )));
        }
        Ok(())
    }

    fn comparative_pattern(&self, i: usize, n: usize) -> Pattern {
        let total: f64 = self.genre_mix.iter().sum();
        let at = (i as f64 + 0.5) / n as f64 * total;
        let mut cum = 0.0;
        for (g, &w) in self.genre_mix.iter().enumerate() {
            cum += w;
            if at < cum {
                return COMPARATIVE_PATTERNS[g];
            }
        }
        *COMPARATIVE_PATTERNS.last().expect("non-empty")
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub entry: ManifestEntry,
    pub pattern: Pattern,
    pub image: CanvasImage,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub images: Vec<SynthImage>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

impl SynthCorpus {
    pub fn entries(&self) -> Vec<ManifestEntry> {
        self.images.iter().map(|s| s.entry.clone()).collect()
    }

    /// Images with the given role, as prepared luminance images.
    pub fn prepared(&self, role: Role) -> Vec<PreparedImage> {
        self.images
            .iter()
            .filter(|s| s.entry.role == role)
            .map(|s| PreparedImage {
                id: s.entry.id.clone(),
                class: s.entry.class,
                image: s.image.clone(),
            })
            .collect()
    }

    /// Writes `images/<id>.png` and `manifest.jsonl` under `dir`; returns
    /// the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let image_dir = dir.join(IMAGE_DIR);
        fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
        let mut entries = Vec::with_capacity(self.images.len());
        for s in &self.images {
            let path = dir.join(&s.entry.image_path);
            s.image.save_png(&path)?;
            entries.push(ManifestEntry {
                image_path: path,
                ..s.entry.clone()
            });
        }
        let manifest = dir.join(MANIFEST_FILE);
        dataset::write_manifest(&manifest, &entries)?;
        Ok(manifest)
    }
}

struct Plan {
    id: String,
    class: ImageClass,
    role: Role,
    pattern: Pattern,
}

fn plan(config: &SynthConfig) -> Vec<Plan> {
    let mut out = Vec::new();
    let groups = [
        (ImageClass::Positive, Role::Train, config.n_positive, "pos"),
        (ImageClass::Comparative, Role::Train, config.n_comparative, "cmp"),
        (ImageClass::Positive, Role::Test, config.n_test_positive, "test-pos"),
        (ImageClass::Comparative, Role::Test, config.n_test_comparative, "test-cmp"),
    ];
    for (class, role, n, prefix) in groups {
        for i in 0..n {
            let pattern = match class {
                ImageClass::Positive => Pattern::DiagonalStrokes,
                ImageClass::Comparative => config.comparative_pattern(i, n),
            };
            out.push(Plan {
                id: format!("{prefix}-{i:03}"),
                class,
                role,
                pattern,
            });
        }
    }
    // Externals alternate classes, starting with a positive.
    for i in 0..config.n_external {
        let (class, pattern) = if i % 2 == 0 {
            (ImageClass::Positive, Pattern::DiagonalStrokes)
        } else {
            (ImageClass::Comparative, config.comparative_pattern(i / 2, config.n_external.div_ceil(2)))
        };
        out.push(Plan {
            id: format!("ext-{i:03}"),
            class,
            role: Role::External,
            pattern,
        });
    }
    out
}

/// Generates the corpus in memory. Output is bit-identical for a given
/// config regardless of thread count.
pub fn generate_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    generate_corpus_with(config, Execution::default())
}

pub fn generate_corpus_with(config: &SynthConfig, mode: Execution) -> Result<SynthCorpus> {
    config.validate()?;
    let plans = plan(config);
    let indexed: Vec<(usize, &Plan)> = plans.iter().enumerate().collect();
    let side = config.image_side_px;
    let images = exec::map_slice(mode, &indexed, |&(index, p)| {
        let mut rng = seed::derived_rng(config.seed, "synth", index as u64);
        let pixels = painting(&mut rng, side, p.pattern, config.contrast);
        let img = GrayImage::from_raw(side, side, pixels).expect("side*side buffer");
        let image = CanvasImage::from_gray(p.id.clone(), img, Some(config.density))?;
        Ok(SynthImage {
            entry: ManifestEntry {
                id: p.id.clone(),
                title: format!("synthetic {:?}", p.pattern),
                class: p.class,
                role: p.role,
                genre: p.pattern.genre(),
                attribution_status: "synthetic".into(),
                image_path: PathBuf::from(IMAGE_DIR).join(format!("{}.png", p.id)),
                canvas_width_cm: side as f64 / config.density,
                quality_flag: QualityFlag::Ok,
            },
            pattern: p.pattern,
            image,
        })
    });
    Ok(SynthCorpus {
        config: config.clone(),
        images: images.into_iter().collect::<Result<_>>()?,
    })
}

/// Axis-aligned rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.width && y < self.y + self.height
    }

    fn intersects(&self, o: &Rect) -> bool {
        self.x < o.x + o.width && o.x < self.x + self.width && self.y < o.y + o.height && o.y < self.y + self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub rect: Rect,
    pub class: ImageClass,
}

/// A canvas filled with `base` texture except in `regions`, inside a plain
/// frame `frame_px` wide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeLayout {
    pub width: u32,
    pub height: u32,
    pub frame_px: u32,
    pub base: ImageClass,
    pub regions: Vec<Region>,
}

impl CompositeLayout {
    /// Left half positive, right half comparative.
    pub fn halves(width: u32, height: u32, frame_px: u32) -> Self {
        Self {
            width,
            height,
            frame_px,
            base: ImageClass::Positive,
            regions: vec![Region {
                rect: Rect {
                    x: width / 2,
                    y: 0,
                    width: width - width / 2,
                    height,
                },
                class: ImageClass::Comparative,
            }],
        }
    }

    /// Positive field with a centred square comparative island.
    pub fn island(side: u32, island_side: u32, frame_px: u32) -> Self {
        let o = (side - island_side) / 2;
        Self {
            width: side,
            height: side,
            frame_px,
            base: ImageClass::Positive,
            regions: vec![Region {
                rect: Rect {
                    x: o,
                    y: o,
                    width: island_side,
                    height: island_side,
                },
                class: ImageClass::Comparative,
            }],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width < MIN_SIDE || self.height < MIN_SIDE || 2 * self.frame_px >= self.width.min(self.height) {
            return Err(Error::Config(format!(
                "composite {}x{} with a {}px frame leaves no canvas",
                self.width, self.height, self.frame_px
            )));
        }
        for (i, a) in self.regions.iter().enumerate() {
            if a.rect.width == 0
                || a.rect.height == 0
                || a.rect.x + a.rect.width > self.width
                || a.rect.y + a.rect.height > self.height
            {
                return Err(Error::Config(format!("region {i} is empty or leaves the canvas")));
            }
            if let Some(j) = self.regions[..i].iter().position(|b| b.rect.intersects(&a.rect)) {
                return Err(Error::Config(format!("regions {j} and {i} overlap")));
            }
        }
        Ok(())
    }

    /// Class at a pixel; `None` in the frame.
    pub fn class_at(&self, x: u32, y: u32) -> Option<ImageClass> {
        let f = self.frame_px;
        if x < f || y < f || x >= self.width - f || y >= self.height - f {
            return None;
        }
        Some(
            self.regions
                .iter()
                .find(|r| r.rect.contains(x, y))
                .map_or(self.base, |r| r.class),
        )
    }
}

/// Mask values: positive 255, comparative 0, frame 128.
pub const MASK_POSITIVE: u8 = 255;
pub const MASK_COMPARATIVE: u8 = 0;
pub const MASK_FRAME: u8 = 128;

#[derive(Debug, Clone)]
pub struct Composite {
    pub image: CanvasImage,
    pub mask: GrayImage,
}

impl Composite {
    pub fn write(&self, image_path: &Path, mask_path: &Path) -> Result<()> {
        self.image.save_png(image_path)?;
        self.mask.save(mask_path).map_err(|e| Error::Decode {
            path: mask_path.to_path_buf(),
            source: e,
        })
    }
}

/// Paints a composite with a ground-truth region mask.
pub fn generate_composite(config: &SynthConfig, layout: &CompositeLayout) -> Result<Composite> {
    config.validate()?;
    layout.validate()?;
    let (w, h) = (layout.width as usize, layout.height as usize);
    let mut rng = seed::derived_rng(config.seed, "composite", 0);
    let shared = standardized(pattern_field(&mut rng, w, h, None));
    let positive = standardized(pattern_field(&mut rng, w, h, Some(Pattern::DiagonalStrokes)));
    let comparative_pattern = config.comparative_pattern(0, 1);
    let comparative = standardized(pattern_field(&mut rng, w, h, Some(comparative_pattern)));

    let mut mask = GrayImage::new(layout.width, layout.height);
    let mut field = vec![0.0f32; w * h];
    let mut subject = vec![false; w * h];
    let c = config.contrast as f32;
    for y in 0..layout.height {
        for x in 0..layout.width {
            let i = y as usize * w + x as usize;
            let class = layout.class_at(x, y);
            mask.put_pixel(
                x,
                y,
                image::Luma([match class {
                    Some(ImageClass::Positive) => MASK_POSITIVE,
                    Some(ImageClass::Comparative) => MASK_COMPARATIVE,
                    None => MASK_FRAME,
                }]),
            );
            if let Some(class) = class {
                let own = match class {
                    ImageClass::Positive => positive[i],
                    ImageClass::Comparative => comparative[i],
                };
                field[i] = c * own + (1.0 - c) * shared[i];
                subject[i] = true;
            }
        }
    }
    let pixels = render(&mut rng, w, h, &field, &subject);
    let img = GrayImage::from_raw(layout.width, layout.height, pixels).expect("w*h buffer");
    Ok(Composite {
        image: CanvasImage::from_gray("composite", img, Some(config.density))?,
        mask,
    })
}

/// One corpus image: an elliptical textured subject on a plain ground.
fn painting(rng: &mut ChaCha8Rng, side: u32, pattern: Pattern, contrast: f64) -> Vec<u8> {
    let n = side as usize;
    let shared = standardized(pattern_field(rng, n, n, None));
    let own = standardized(pattern_field(rng, n, n, Some(pattern)));
    let c = contrast as f32;
    let field: Vec<f32> = own.iter().zip(&shared).map(|(&a, &b)| c * a + (1.0 - c) * b).collect();

    let cx = n as f64 * rng.random_range(0.45..0.55);
    let cy = n as f64 * rng.random_range(0.45..0.55);
    let rx = n as f64 * rng.random_range(0.36..0.44);
    let ry = n as f64 * rng.random_range(0.36..0.44);
    let subject: Vec<bool> = (0..n * n)
        .map(|i| {
            let dx = ((i % n) as f64 + 0.5 - cx) / rx;
            let dy = ((i / n) as f64 + 0.5 - cy) / ry;
            dx * dx + dy * dy <= 1.0
        })
        .collect();
    render(rng, n, n, &field, &subject)
}

/// Rank-maps subject pixels onto 0..=255 uniformly and paints the rest as a
/// smooth ground confined to a narrow band of grey levels.
fn render(rng: &mut ChaCha8Rng, w: usize, h: usize, field: &[f32], subject: &[bool]) -> Vec<u8> {
    let base: f32 = rng.random_range(70.0..150.0);
    let tilt: f32 = rng.random_range(-1.0..1.0);
    let mut out: Vec<u8> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f32 / w as f32, (i / w) as f32 / h as f32);
            let wobble = rng.random_range(0.0f32..3.0);
            (base + 12.0 * tilt * (x - y) + wobble).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    let mut idx: Vec<usize> = (0..w * h).filter(|&i| subject[i]).collect();
    idx.sort_by(|&a, &b| field[a].total_cmp(&field[b]).then(a.cmp(&b)));
    let m = idx.len();
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = (rank * 256 / m) as u8;
    }
    out
}

fn noise(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f32> {
    (0..w * h).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Pattern field; `None` gives the class-neutral pattern shared by all.
fn pattern_field(rng: &mut ChaCha8Rng, w: usize, h: usize, pattern: Option<Pattern>) -> Vec<f32> {
    let src = noise(rng, w, h);
    match pattern {
        None => box_blur(&box_blur(&src, w, h, 2), w, h, 2),
        Some(Pattern::DiagonalStrokes) => {
            let angle = 45.0 + rng.random_range(-8.0..8.0);
            box_blur(&line_filter(&src, w, h, angle, 9), w, h, 1)
        }
        Some(Pattern::HorizontalStrokes) => {
            let angle = rng.random_range(-8.0..8.0);
            box_blur(&line_filter(&src, w, h, angle, 9), w, h, 1)
        }
        Some(Pattern::Blobs) => box_blur(&box_blur(&src, w, h, 4), w, h, 4),
        Some(Pattern::CrossHatch) => {
            let a = line_filter(&src, w, h, 0.0, 7);
            let second = noise(rng, w, h);
            let b = line_filter(&second, w, h, 90.0, 7);
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        }
        Some(Pattern::Grain) => {
            // Short strokes whose direction drifts across the canvas.
            let mut out = vec![0.0f32; w * h];
            let cell = 16usize;
            for cy in (0..h).step_by(cell) {
                for cx in (0..w).step_by(cell) {
                    let angle: f64 = rng.random_range(0.0..180.0);
                    let (dx, dy) = (angle.to_radians().cos(), angle.to_radians().sin());
                    for y in cy..(cy + cell).min(h) {
                        for x in cx..(cx + cell).min(w) {
                            out[y * w + x] = line_sum(&src, w, h, x, y, dx, dy, 2);
                        }
                    }
                }
            }
            out
        }
    }
}

fn line_sum(src: &[f32], w: usize, h: usize, x: usize, y: usize, dx: f64, dy: f64, half: i64) -> f32 {
    let mut s = 0.0f32;
    for t in -half..=half {
        let sx = (x as f64 + t as f64 * dx).round() as i64;
        let sy = (y as f64 + t as f64 * dy).round() as i64;
        let sx = sx.clamp(0, w as i64 - 1) as usize;
        let sy = sy.clamp(0, h as i64 - 1) as usize;
        s += src[sy * w + sx];
    }
    s
}

/// Sums noise along a segment of `2 * half + 1` samples at `angle_deg`.
fn line_filter(src: &[f32], w: usize, h: usize, angle_deg: f64, half: i64) -> Vec<f32> {
    let (dx, dy) = (angle_deg.to_radians().cos(), angle_deg.to_radians().sin());
    let offsets: Vec<(i64, i64)> = (-half..=half)
        .map(|t| ((t as f64 * dx).round() as i64, (t as f64 * dy).round() as i64))
        .collect();
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0f32;
            for &(ox, oy) in &offsets {
                let sx = (x as i64 + ox).clamp(0, w as i64 - 1) as usize;
                let sy = (y as i64 + oy).clamp(0, h as i64 - 1) as usize;
                s += src[sy * w + sx];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Separable box blur of radius `r` with clamped edges.
fn box_blur(src: &[f32], w: usize, h: usize, r: usize) -> Vec<f32> {
    let pass = |src: &[f32], len: usize, lines: usize, at: &dyn Fn(usize, usize) -> usize| {
        let mut out = vec![0.0f32; w * h];
        for l in 0..lines {
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                let s: f32 = (lo..=hi).map(|j| src[at(l, j)]).sum();
                out[at(l, i)] = s / (hi - lo + 1) as f32;
            }
        }
        out
    };
    let horizontal = pass(src, w, h, &|row, col| row * w + col);
    pass(&horizontal, h, w, &|col, row| row * w + col)
}

fn standardized(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    for x in &mut v {
        *x = ((*x as f64 - mean) / sd) as f32;
    }
    v
}
