//! Run configuration: one TOML file, defaults at the reference operating
//! point, and command-line overrides that mirror the keys one to one.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use salient_core::cnn::{ArchitectureSpec, Variant, DEFAULT_INPUT_SIDE};
use salient_core::dataset::TileConfig;
use salient_core::synth::SynthConfig;
use salient_core::tiling::TileSpec;
use salient_core::trainer::Hyperparams;

use crate::ConfigError;

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Roles exactly as written in the manifest.
    #[default]
    Curated,
    /// Comparative images reshuffled between train and test from `seed`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub kind: SplitKind,
    /// Comparative training images drawn by a random split.
    pub n_train: usize,
    /// Comparative test images drawn by a random split.
    pub n_test: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            kind: SplitKind::Curated,
            n_train: 32,
            n_test: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub shuffle: bool,
}

impl Default for HyperSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            epochs: h.epochs,
            batch_size: h.batch_size,
            learning_rate: h.learning_rate,
            momentum: h.momentum,
            shuffle: h.shuffle,
        }
    }
}

/// Synthetic corpus settings. The corpus seed is the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_positive: usize,
    pub n_comparative: usize,
    pub n_test_positive: usize,
    pub n_test_comparative: usize,
    pub n_external: usize,
    pub image_side_px: u32,
    pub contrast: f64,
    pub genre_mix: [f64; 4],
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            n_positive: s.n_positive,
            n_comparative: s.n_comparative,
            n_test_positive: s.n_test_positive,
            n_test_comparative: s.n_test_comparative,
            n_external: s.n_external,
            image_side_px: s.image_side_px,
            contrast: s.contrast,
            genre_mix: s.genre_mix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus manifest (JSON Lines). Defaults to the synth stage's output.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Root of all stage directories.
    pub output_dir: PathBuf,
    /// Root seed for the corpus, the random split and, unless `seeds` is
    /// set, the single trained model.
    pub seed: u64,
    /// One model is trained per seed.
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Analysis density in pixels per canvas centimetre.
    pub density: f64,
    pub tile_side: u32,
    pub positive_overlap: f64,
    pub comparative_overlap: f64,
    /// Search the positive overlap that balances the classes instead of
    /// using `positive_overlap`.
    pub balance: bool,
    /// Overlap for scoring and maps; defaults to `comparative_overlap`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_overlap: Option<f64>,
    pub architecture: Variant,
    pub input_side: u32,
    /// Images scoring above this are classified positive.
    pub threshold: f64,
    /// Manifest id whose probability each model reports in the summary
    /// table, for the false-positive regression.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    pub split: SplitSection,
    pub hyper: HyperSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: PathBuf::from("run"),
            seed: 1,
            seeds: Vec::new(),
            threads: 0,
            density: 25.0,
            tile_side: 350,
            positive_overlap: 0.94,
            comparative_overlap: 0.92,
            balance: false,
            map_overlap: None,
            architecture: Variant::FiveLayer,
            input_side: DEFAULT_INPUT_SIDE,
            threshold: salient_core::inference::DEFAULT_THRESHOLD,
            target_id: None,
            split: SplitSection::default(),
            hyper: HyperSection::default(),
            synth: SynthSection::default(),
        }
    }
}

/// Command-line overrides. Each flag replaces the config key of the same
/// name, with `-` for `_` and `section.key` for keys inside a table.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub density: Option<f64>,
    #[arg(long, global = true)]
    pub tile_side: Option<u32>,
    #[arg(long, global = true)]
    pub positive_overlap: Option<f64>,
    #[arg(long, global = true)]
    pub comparative_overlap: Option<f64>,
    #[arg(long, global = true)]
    pub balance: Option<bool>,
    #[arg(long, global = true)]
    pub map_overlap: Option<f64>,
    #[arg(long, global = true, value_parser = parse_variant)]
    pub architecture: Option<Variant>,
    #[arg(long, global = true)]
    pub input_side: Option<u32>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub target_id: Option<String>,
    #[arg(long = "split.kind", global = true, value_enum)]
    pub split_kind: Option<SplitKind>,
    #[arg(long = "split.n-train", global = true)]
    pub split_n_train: Option<usize>,
    #[arg(long = "split.n-test", global = true)]
    pub split_n_test: Option<usize>,
    #[arg(long = "hyper.epochs", global = true)]
    pub epochs: Option<usize>,
    #[arg(long = "hyper.batch-size", global = true)]
    pub batch_size: Option<usize>,
    #[arg(long = "hyper.learning-rate", global = true)]
    pub learning_rate: Option<f32>,
    #[arg(long = "hyper.momentum", global = true)]
    pub momentum: Option<f32>,
    #[arg(long = "hyper.shuffle", global = true)]
    pub shuffle: Option<bool>,
    #[arg(long = "synth.n-positive", global = true)]
    pub n_positive: Option<usize>,
    #[arg(long = "synth.n-comparative", global = true)]
    pub n_comparative: Option<usize>,
    #[arg(long = "synth.n-test-positive", global = true)]
    pub n_test_positive: Option<usize>,
    #[arg(long = "synth.n-test-comparative", global = true)]
    pub n_test_comparative: Option<usize>,
    #[arg(long = "synth.n-external", global = true)]
    pub n_external: Option<usize>,
    #[arg(long = "synth.image-side-px", global = true)]
    pub image_side_px: Option<u32>,
    #[arg(long = "synth.contrast", global = true)]
    pub contrast: Option<f64>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: salient_core::Error| e.to_string())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides`. Relative paths
    /// in the file resolve against the file's directory.
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| ConfigError(format!("cannot read config file {}: {e}", path.display())))?;
                let mut c: RunConfig = toml::from_str(&text)
                    .map_err(|e| ConfigError(format!("config file {}: {e}", path.display())))?;
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                c.manifest = c.manifest.map(|m| base.join(m));
                c.output_dir = base.join(&c.output_dir);
                c
            }
            None => RunConfig::default(),
        };
        config.apply(overrides);
        config.output_dir = std::path::absolute(&config.output_dir)
            .with_context(|| format!("resolving {}", config.output_dir.display()))?;
        if let Some(m) = &config.manifest {
            config.manifest = Some(std::path::absolute(m)?);
        }
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, o: &Overrides) {
        if o.manifest.is_some() {
            self.manifest = o.manifest.clone();
        }
        set(&mut self.output_dir, o.output_dir.clone());
        set(&mut self.seed, o.seed);
        set(&mut self.seeds, o.seeds.clone());
        set(&mut self.threads, o.threads);
        set(&mut self.density, o.density);
        set(&mut self.tile_side, o.tile_side);
        set(&mut self.positive_overlap, o.positive_overlap);
        set(&mut self.comparative_overlap, o.comparative_overlap);
        set(&mut self.balance, o.balance);
        if o.map_overlap.is_some() {
            self.map_overlap = o.map_overlap;
        }
        set(&mut self.architecture, o.architecture);
        set(&mut self.input_side, o.input_side);
        set(&mut self.threshold, o.threshold);
        if o.target_id.is_some() {
            self.target_id = o.target_id.clone();
        }
        set(&mut self.split.kind, o.split_kind);
        set(&mut self.split.n_train, o.split_n_train);
        set(&mut self.split.n_test, o.split_n_test);
        set(&mut self.hyper.epochs, o.epochs);
        set(&mut self.hyper.batch_size, o.batch_size);
        set(&mut self.hyper.learning_rate, o.learning_rate);
        set(&mut self.hyper.momentum, o.momentum);
        set(&mut self.hyper.shuffle, o.shuffle);
        set(&mut self.synth.n_positive, o.n_positive);
        set(&mut self.synth.n_comparative, o.n_comparative);
        set(&mut self.synth.n_test_positive, o.n_test_positive);
        set(&mut self.synth.n_test_comparative, o.n_test_comparative);
        set(&mut self.synth.n_external, o.n_external);
        set(&mut self.synth.image_side_px, o.image_side_px);
        set(&mut self.synth.contrast, o.contrast);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density.is_finite() && self.density > 0.0) {
            return Err(ConfigError(format!("density must be positive, got {}", self.density)).into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError(format!("threshold {} outside [0, 1]", self.threshold)).into());
        }
        self.tile_config().map_err(|e| ConfigError(e.to_string()))?;
        self.map_spec().map_err(|e| ConfigError(e.to_string()))?;
        self.arch().map_err(|e| ConfigError(e.to_string()))?;
        self.hyperparams(0).validate().map_err(|e| ConfigError(e.to_string()))?;
        self.synth_config().validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(())
    }

    pub fn model_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn tile_config(&self) -> salient_core::Result<TileConfig> {
        let c = TileConfig {
            side: self.tile_side,
            positive_overlap: self.positive_overlap,
            comparative_overlap: self.comparative_overlap,
            density: self.density,
        };
        c.spec_for(salient_core::dataset::ImageClass::Positive)?;
        c.spec_for(salient_core::dataset::ImageClass::Comparative)?;
        Ok(c)
    }

    pub fn map_spec(&self) -> salient_core::Result<TileSpec> {
        TileSpec::new(self.tile_side, self.map_overlap.unwrap_or(self.comparative_overlap))
    }

    pub fn arch(&self) -> salient_core::Result<ArchitectureSpec> {
        ArchitectureSpec::new(self.architecture, self.input_side)
    }

    pub fn hyperparams(&self, seed: u64) -> Hyperparams {
        Hyperparams {
            epochs: self.hyper.epochs,
            batch_size: self.hyper.batch_size,
            learning_rate: self.hyper.learning_rate,
            momentum: self.hyper.momentum,
            seed,
            shuffle: self.hyper.shuffle,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_positive: s.n_positive,
            n_comparative: s.n_comparative,
            n_test_positive: s.n_test_positive,
            n_test_comparative: s.n_test_comparative,
            n_external: s.n_external,
            image_side_px: s.image_side_px,
            seed: self.seed,
            contrast: s.contrast,
            genre_mix: s.genre_mix,
            density: self.density,
        }
    }

    /// Directory of one stage under `output_dir`.
    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.output_dir.join(stage)
    }

    /// Manifest path, falling back to the synth stage's output.
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.stage_dir("synth").join(salient_core::synth::MANIFEST_FILE))
    }

    /// Writes the resolved configuration into `dir`. Loading it back
    /// reproduces the run.
    pub fn write_snapshot(&self, dir: &Path, stage: &str) -> Result<()> {
        let body = toml::to_string(self).context("serializing config snapshot")?;
        let text = format!(
            "# salient {} `{stage}` stage\n{body}",
            env!("CARGO_PKG_VERSION")
        );
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_operating_point() {
        let c = RunConfig::default();
        assert_eq!(c.density, 25.0);
        assert_eq!(c.tile_side, 350);
        assert_eq!((c.positive_overlap, c.comparative_overlap), (0.94, 0.92));
        let t = c.tile_config().unwrap();
        assert_eq!(t.spec_for(salient_core::dataset::ImageClass::Positive).unwrap().stride(), 21);
        assert_eq!(t.spec_for(salient_core::dataset::ImageClass::Comparative).unwrap().stride(), 28);
        assert_eq!(c.model_seeds(), vec![1]);
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig {
            output_dir: dir.path().to_path_buf(),
            seeds: vec![3, 4],
            map_overlap: Some(0.75),
            target_id: Some("ext-000".into()),
            ..RunConfig::default()
        };
        c.write_snapshot(dir.path(), "test").unwrap();
        let back = RunConfig::load(Some(&dir.path().join(SNAPSHOT_FILE)), &Overrides::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "tile_side = 200\n[hyper]\nepochs = 3\n").unwrap();
        let o = Overrides {
            tile_side: Some(150),
            ..Default::default()
        };
        let c = RunConfig::load(Some(&path), &o).unwrap();
        assert_eq!(c.tile_side, 150);
        assert_eq!(c.hyper.epochs, 3);
        assert_eq!(c.output_dir, dir.path().join("run"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "tile_sides = 200\n").unwrap();
        let err = RunConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(err.to_string().contains("tile_sides"));
    }
}
