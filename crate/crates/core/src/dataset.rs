//! Corpus manifests, class-balanced tile sets and train/test split plans.
//!
//! A manifest is JSON Lines: one painting per line with the fields `id`,
//! `title`, `class`, `role`, `genre`, `attribution_status`, `image_path`,
//! `canvas_width_cm` and `quality_flag`. Relative image paths resolve against
//! the manifest's directory. Blank lines and lines starting with `#` are
//! skipped.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::imaging::{self, CanvasImage};
use crate::seed;
use crate::tiling::{self, Tile, TileLabel, TileSpec};

/// Tile-side range covered by the reference sweep; sides outside it are
/// allowed but logged.
pub const SWEEP_SIDES: std::ops::RangeInclusive<u32> = 100..=650;

/// Accepted multiplicative band for positive/comparative tile counts.
pub const BALANCE_BAND: (f64, f64) = (0.8, 1.25);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageClass {
    Positive,
    Comparative,
}

impl ImageClass {
    pub fn tile_label(self) -> TileLabel {
        match self {
            ImageClass::Positive => TileLabel::Positive,
            ImageClass::Comparative => TileLabel::Comparative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Genre {
    Portrait,
    MadonnaAndChild,
    ReligiousScene,
    SingleFigure,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFlag {
    #[default]
    Ok,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub title: String,
    pub class: ImageClass,
    pub role: Role,
    pub genre: Genre,
    pub attribution_status: String,
    pub image_path: PathBuf,
    pub canvas_width_cm: f64,
    #[serde(default)]
    pub quality_flag: QualityFlag,
}

impl ManifestEntry {
    /// Pixels per canvas centimetre of the stored image.
    pub fn density_for_width(&self, width_px: u32) -> f64 {
        width_px as f64 / self.canvas_width_cm
    }

    /// Loads the image and attaches the density implied by the canvas width.
    pub fn load_image(&self) -> Result<CanvasImage> {
        let img = CanvasImage::load(&self.image_path, self.id.clone(), None)?;
        let density = self.density_for_width(img.width());
        img.with_density(density)
    }

    /// Loads, resamples to `density` and converts to luminance.
    pub fn load_analysis_image(&self, density: f64) -> Result<CanvasImage> {
        let img = self.load_image()?;
        let img = imaging::resample_to_density(&img, density)?;
        Ok(imaging::to_luminance(&img))
    }

    pub fn trainable(&self) -> bool {
        self.quality_flag == QualityFlag::Ok
    }
}

/// Parses and validates a manifest, resolving relative image paths.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut entry: ManifestEntry = serde_json::from_str(trimmed).map_err(|e| Error::Manifest {
            line,
            message: e.to_string(),
        })?;
        if entry.id.is_empty() {
            return Err(Error::Manifest {
                line,
                message: "empty id".into(),
            });
        }
        if let Some(&first_line) = seen.get(&entry.id) {
            return Err(Error::DuplicateId {
                id: entry.id,
                first_line,
                line,
            });
        }
        if !(entry.canvas_width_cm.is_finite() && entry.canvas_width_cm > 0.0) {
            return Err(Error::Manifest {
                line,
                message: format!(
                    "`{}`: canvas_width_cm must be positive, got {}",
                    entry.id, entry.canvas_width_cm
                ),
            });
        }
        if entry.image_path.is_relative() {
            entry.image_path = base_dir.join(&entry.image_path);
        }
        if matches!(entry.role, Role::Train | Role::Test) && !entry.image_path.is_file() {
            return Err(Error::Manifest {
                line,
                message: format!(
                    "`{}`: image {} is missing or unreadable",
                    entry.id,
                    entry.image_path.display()
                ),
            });
        }
        seen.insert(entry.id.clone(), line);
        entries.push(entry);
    }
    Ok(entries)
}

/// Writes entries as JSON Lines; image paths are written relative to
/// `base_dir` when possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for e in entries {
        let mut e = e.clone();
        if let Ok(rel) = e.image_path.strip_prefix(base) {
            e.image_path = rel.to_path_buf();
        }
        serde_json::to_writer(&mut out, &e)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// A luminance image at analysis density, tagged with its manifest class.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: String,
    pub class: ImageClass,
    pub image: CanvasImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileConfig {
    pub side: u32,
    pub positive_overlap: f64,
    pub comparative_overlap: f64,
    pub density: f64,
}

impl TileConfig {
    pub fn spec_for(&self, class: ImageClass) -> Result<TileSpec> {
        match class {
            ImageClass::Positive => TileSpec::new(self.side, self.positive_overlap),
            ImageClass::Comparative => TileSpec::new(self.side, self.comparative_overlap),
        }
    }
}

/// Tiles plus the images they were cut from.
#[derive(Debug, Clone, Default)]
pub struct TileSet {
    pub images: Vec<PreparedImage>,
    pub tiles: Vec<Tile>,
}

impl TileSet {
    pub fn image(&self, id: &str) -> Option<&CanvasImage> {
        self.images.iter().find(|p| p.id == id).map(|p| &p.image)
    }

    pub fn count(&self, label: TileLabel) -> usize {
        self.tiles.iter().filter(|t| t.label == label).count()
    }

    pub fn source_ids(&self) -> BTreeSet<&str> {
        self.tiles.iter().map(|t| t.source_id.as_str()).collect()
    }

    /// Positive-to-comparative tile ratio; infinite with no comparatives.
    pub fn balance_ratio(&self) -> f64 {
        let pos = self.count(TileLabel::Positive) as f64;
        let neg = self.count(TileLabel::Comparative) as f64;
        if neg == 0.0 {
            f64::INFINITY
        } else {
            pos / neg
        }
    }
}

#[derive(Debug, Clone)]
pub struct TileSets {
    pub train: TileSet,
    pub test: TileSet,
}

impl TileSets {
    pub fn is_balanced(&self) -> bool {
        let r = self.train.balance_ratio();
        (BALANCE_BAND.0..=BALANCE_BAND.1).contains(&r)
    }
}

fn warn_unusual_side(side: u32) {
    if !SWEEP_SIDES.contains(&side) {
        log::warn!(
            "tile side {side}px lies outside the {}..={}px sweep range",
            SWEEP_SIDES.start(),
            SWEEP_SIDES.end()
        );
    }
}

/// Loads entries at analysis density, rejecting any smaller than `side`.
pub fn prepare_images(
    entries: &[&ManifestEntry],
    side: u32,
    density: f64,
    mode: Execution,
) -> Result<Vec<PreparedImage>> {
    let loaded = exec::map_slice(mode, entries, |e| {
        e.load_analysis_image(density).map(|image| PreparedImage {
            id: e.id.clone(),
            class: e.class,
            image,
        })
    });
    let images = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    check_sizes(&images, side)?;
    Ok(images)
}

fn check_sizes(images: &[PreparedImage], side: u32) -> Result<()> {
    let offenders: Vec<String> = images
        .iter()
        .filter(|p| p.image.width() < side || p.image.height() < side)
        .map(|p| format!("{} ({}x{})", p.id, p.image.width(), p.image.height()))
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::ImagesTooSmall { side, offenders })
    }
}

/// Gates each image with its class's overlap; output follows image order.
pub fn tile_images(images: Vec<PreparedImage>, config: &TileConfig, mode: Execution) -> Result<TileSet> {
    let pos = config.spec_for(ImageClass::Positive)?;
    let neg = config.spec_for(ImageClass::Comparative)?;
    check_sizes(&images, config.side)?;
    let per_image = exec::map_slice(mode, &images, |p| {
        let spec = match p.class {
            ImageClass::Positive => &pos,
            ImageClass::Comparative => &neg,
        };
        // Images are already spread over the pool; gate each one sequentially.
        tiling::salient_tiles_with(&p.image, spec, p.class.tile_label(), Execution::Sequential)
    });
    Ok(TileSet {
        images,
        tiles: per_image.into_iter().flatten().collect(),
    })
}

/// Builds train and test tile sets. Degraded images never enter training.
pub fn build_tilesets(entries: &[ManifestEntry], config: &TileConfig) -> Result<TileSets> {
    build_tilesets_with(entries, config, Execution::default())
}

pub fn build_tilesets_with(
    entries: &[ManifestEntry],
    config: &TileConfig,
    mode: Execution,
) -> Result<TileSets> {
    warn_unusual_side(config.side);
    let train: Vec<&ManifestEntry> = entries
        .iter()
        .filter(|e| e.role == Role::Train && e.trainable())
        .collect();
    let test: Vec<&ManifestEntry> = entries.iter().filter(|e| e.role == Role::Test).collect();

    // Report every undersized image at once, train and test together.
    let loaded_train = load_all(&train, config.density, mode)?;
    let loaded_test = load_all(&test, config.density, mode)?;
    let mut offenders = Vec::new();
    for p in loaded_train.iter().chain(&loaded_test) {
        if p.image.width() < config.side || p.image.height() < config.side {
            offenders.push(format!("{} ({}x{})", p.id, p.image.width(), p.image.height()));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::ImagesTooSmall {
            side: config.side,
            offenders,
        });
    }
    let sets = TileSets {
        train: tile_images(loaded_train, config, mode)?,
        test: tile_images(loaded_test, config, mode)?,
    };
    log::info!(
        "train tiles: {} positive / {} comparative; test tiles: {} positive / {} comparative",
        sets.train.count(TileLabel::Positive),
        sets.train.count(TileLabel::Comparative),
        sets.test.count(TileLabel::Positive),
        sets.test.count(TileLabel::Comparative)
    );
    if !sets.is_balanced() {
        log::warn!(
            "train tile balance ratio {:.3} outside [{}, {}]",
            sets.train.balance_ratio(),
            BALANCE_BAND.0,
            BALANCE_BAND.1
        );
    }
    Ok(sets)
}

fn load_all(entries: &[&ManifestEntry], density: f64, mode: Execution) -> Result<Vec<PreparedImage>> {
    exec::map_slice(mode, entries, |e| {
        e.load_analysis_image(density).map(|image| PreparedImage {
            id: e.id.clone(),
            class: e.class,
            image,
        })
    })
    .into_iter()
    .collect()
}

/// Upper bound of the overlap search in [`balance_overlaps`].
pub const BALANCE_OVERLAP_CAP: f64 = 0.98;
/// Positive tiles must reach this fraction of comparative tiles.
pub const BALANCE_TARGET: f64 = 0.9;

/// Candidate positive overlaps: `base`, then every multiple of 0.005 above it
/// up to the cap.
pub fn overlap_grid(base: f64) -> Vec<f64> {
    let mut grid = vec![base];
    let first = (base * 200.0).floor() as i64 + 1;
    let last = (BALANCE_OVERLAP_CAP * 200.0).round() as i64;
    grid.extend((first..=last).map(|k| k as f64 / 200.0));
    grid
}

/// Smallest positive overlap whose salient tile count reaches 90% of the
/// comparative count at `base_neg_overlap`, over training images.
pub fn balance_overlaps(
    entries: &[ManifestEntry],
    side: u32,
    base_neg_overlap: f64,
    density: f64,
) -> Result<f64> {
    let train: Vec<&ManifestEntry> = entries
        .iter()
        .filter(|e| e.role == Role::Train && e.trainable())
        .collect();
    let images = prepare_images(&train, side, density, Execution::default())?;
    balance_prepared(&images, side, base_neg_overlap)
}

/// [`balance_overlaps`] over already prepared images.
pub fn balance_prepared(images: &[PreparedImage], side: u32, base_neg_overlap: f64) -> Result<f64> {
    let neg_spec = TileSpec::new(side, base_neg_overlap)?;
    let (pos, neg): (Vec<&PreparedImage>, Vec<&PreparedImage>) =
        images.iter().partition(|p| p.class == ImageClass::Positive);
    if neg.is_empty() {
        return Err(Error::NothingToBalance("no comparative training images".into()));
    }
    if pos.is_empty() {
        return Err(Error::NothingToBalance("no positive training images".into()));
    }
    let count = |imgs: &[&PreparedImage], spec: &TileSpec| -> usize {
        exec::map_slice(Execution::default(), imgs, |p| {
            tiling::salient_tiles_with(&p.image, spec, TileLabel::Unlabeled, Execution::Sequential).len()
        })
        .into_iter()
        .sum()
    };
    let neg_count = count(&neg, &neg_spec) as f64;
    let mut best = (base_neg_overlap, 0.0f64);
    for overlap in overlap_grid(base_neg_overlap) {
        let spec = TileSpec::new(side, overlap)?;
        let pos_count = count(&pos, &spec) as f64;
        let ratio = if neg_count == 0.0 { f64::INFINITY } else { pos_count / neg_count };
        if pos_count >= neg_count * BALANCE_TARGET {
            return Ok(overlap);
        }
        if ratio > best.1 {
            best = (overlap, ratio);
        }
    }
    Err(Error::BalanceUnreachable {
        cap: BALANCE_OVERLAP_CAP,
        best_overlap: best.0,
        best_ratio: best.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Curated,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub seed: Option<u64>,
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    /// Positive images held out for testing, pinned by the manifest.
    pub positive_test_ids: BTreeSet<String>,
}

impl SplitPlan {
    /// Short stable identifier used in model provenance.
    pub fn id(&self) -> String {
        match (self.kind, self.seed) {
            (SplitKind::Curated, _) => "curated".into(),
            (SplitKind::Random, Some(s)) => format!("random-{s}"),
            (SplitKind::Random, None) => "random".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(id) = self.train_ids.intersection(&self.test_ids).next() {
            return Err(Error::Config(format!("`{id}` is in both train and test")));
        }
        if !self.positive_test_ids.is_subset(&self.test_ids) {
            return Err(Error::Config("positive test ids missing from test set".into()));
        }
        Ok(())
    }

    /// Returns entries with roles rewritten to follow the plan. Entries in
    /// neither set keep `external` or are dropped.
    pub fn apply(&self, entries: &[ManifestEntry]) -> Result<Vec<ManifestEntry>> {
        self.validate()?;
        Ok(entries
            .iter()
            .filter_map(|e| {
                let role = if self.train_ids.contains(&e.id) {
                    Role::Train
                } else if self.test_ids.contains(&e.id) {
                    Role::Test
                } else if e.role == Role::External {
                    Role::External
                } else {
                    return None;
                };
                Some(ManifestEntry { role, ..e.clone() })
            })
            .collect())
    }
}

/// The split written in the manifest itself.
pub fn curated_split(entries: &[ManifestEntry]) -> SplitPlan {
    let ids = |role: Role| -> BTreeSet<String> {
        entries.iter().filter(|e| e.role == role).map(|e| e.id.clone()).collect()
    };
    SplitPlan {
        kind: SplitKind::Curated,
        seed: None,
        train_ids: ids(Role::Train),
        test_ids: ids(Role::Test),
        positive_test_ids: entries
            .iter()
            .filter(|e| e.role == Role::Test && e.class == ImageClass::Positive)
            .map(|e| e.id.clone())
            .collect(),
    }
}

/// Reshuffles comparative train/test images; positives keep their manifest
/// roles. `pool` is every non-external entry.
pub fn random_split(pool: &[ManifestEntry], n_train: usize, n_test: usize, seed: u64) -> Result<SplitPlan> {
    let mut comparatives: Vec<&ManifestEntry> = pool
        .iter()
        .filter(|e| e.class == ImageClass::Comparative && e.role != Role::External)
        .collect();
    if n_train + n_test > comparatives.len() {
        return Err(Error::InsufficientPool {
            requested: n_train + n_test,
            available: comparatives.len(),
        });
    }
    comparatives.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = seed::derived_rng(seed, "split", 0);
    comparatives.shuffle(&mut rng);

    let positives = |role: Role| {
        pool.iter()
            .filter(move |e| e.class == ImageClass::Positive && e.role == role)
            .map(|e| e.id.clone())
    };
    let mut train_ids: BTreeSet<String> = positives(Role::Train).collect();
    let positive_test_ids: BTreeSet<String> = positives(Role::Test).collect();
    let mut test_ids = positive_test_ids.clone();
    train_ids.extend(comparatives[..n_train].iter().map(|e| e.id.clone()));
    test_ids.extend(comparatives[n_train..n_train + n_test].iter().map(|e| e.id.clone()));
    let plan = SplitPlan {
        kind: SplitKind::Random,
        seed: Some(seed),
        train_ids,
        test_ids,
        positive_test_ids,
    };
    plan.validate()?;
    Ok(plan)
}
