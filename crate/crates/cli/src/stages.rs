//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use salient_core::dataset::{self, ImageClass, ManifestEntry, Role, SplitPlan, TileConfig};
use salient_core::evaluation::{self, SummaryRow};
use salient_core::exec::{self, Execution};
use salient_core::imaging::{self, CanvasImage};
use salient_core::inference::{self, MapDumpHeader, ProbabilityBin};
use salient_core::synth::{self, CompositeLayout};
use salient_core::tiling::{self, TileLabel};
use salient_core::trainer::{self, EpochMetrics, Provenance, TrainedModel, TrainingData};

use crate::config::{RunConfig, SplitKind};
use crate::{CompositeKind, ConfigError, MissingInput};

const TILE_SUMMARY: &str = "tiles.json";
const SPLIT_FILE: &str = "split.json";
const MODEL_INDEX: &str = "models.json";
const SUMMARY_CSV: &str = "summary.csv";
const SELECTION_FILE: &str = "selection.json";

fn create_stage(config: &RunConfig, stage: &str) -> Result<PathBuf> {
    let dir = config.stage_dir(stage);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    config.write_snapshot(&dir, stage)?;
    Ok(dir)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingInput {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        }
        .into())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_manifest(config: &RunConfig) -> Result<Vec<ManifestEntry>> {
    let path = config.manifest_path();
    require(
        &path,
        "set `manifest` in the config or --manifest, or run `salient synth` first",
    )?;
    Ok(dataset::load_manifest(&path)?)
}

/// Manifest entries with roles rewritten by the tile stage's split.
fn split_entries(config: &RunConfig) -> Result<Vec<ManifestEntry>> {
    let entries = load_manifest(config)?;
    let path = config.stage_dir("tile").join(SPLIT_FILE);
    require(&path, "run `salient tile` first; it records the train/test split")?;
    let plan: SplitPlan = read_json(&path)?;
    Ok(plan.apply(&entries)?)
}

pub fn synth(config: &RunConfig, composite: Option<CompositeKind>) -> Result<()> {
    let dir = create_stage(config, "synth")?;
    let synth_config = config.synth_config();
    let corpus = synth::generate_corpus(&synth_config)?;
    let manifest = corpus.write(&dir)?;
    println!("wrote {} images and {}", corpus.images.len(), manifest.display());
    if let Some(kind) = composite {
        let side = synth_config.image_side_px;
        let frame = side / 16;
        let layout = match kind {
            CompositeKind::Halves => CompositeLayout::halves(side, side, frame),
            CompositeKind::Island => CompositeLayout::island(side, side / 3, frame),
        };
        let c = synth::generate_composite(&synth_config, &layout)?;
        let (image, mask) = (dir.join("composite.png"), dir.join("composite-mask.png"));
        c.write(&image, &mask)?;
        write_json(&dir.join("composite.json"), &layout)?;
        println!(
            "wrote {} ({} px/cm) and {}",
            image.display(),
            synth_config.density,
            mask.display()
        );
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TileSummary {
    tile: TileConfig,
    split_id: String,
    train_positive: usize,
    train_comparative: usize,
    test_positive: usize,
    test_comparative: usize,
    balance_ratio: f64,
}

pub fn tile(config: &RunConfig) -> Result<()> {
    let entries = load_manifest(config)?;
    let dir = create_stage(config, "tile")?;
    let plan = match config.split.kind {
        SplitKind::Curated => dataset::curated_split(&entries),
        SplitKind::Random => {
            let pool: Vec<ManifestEntry> = entries.iter().filter(|e| e.role != Role::External).cloned().collect();
            dataset::random_split(&pool, config.split.n_train, config.split.n_test, config.seed)?
        }
    };
    let entries = plan.apply(&entries)?;
    write_json(&dir.join(SPLIT_FILE), &plan)?;

    let mut tile_config = config.tile_config()?;
    if config.balance {
        tile_config.positive_overlap = dataset::balance_overlaps(
            &entries,
            config.tile_side,
            config.comparative_overlap,
            config.density,
        )?;
        log::info!("balanced positive overlap: {}", tile_config.positive_overlap);
    }
    let sets = dataset::build_tilesets(&entries, &tile_config)?;
    for (name, set) in [("train", &sets.train), ("test", &sets.test)] {
        let out = dir.join(name);
        // Crops from an earlier run would linger beside the new index.
        if out.exists() {
            fs::remove_dir_all(&out).with_context(|| format!("clearing {}", out.display()))?;
        }
        tiling::write_tile_dir(&out, &set.tiles, |id| set.image(id))?;
    }
    let summary = TileSummary {
        tile: tile_config,
        split_id: plan.id(),
        train_positive: sets.train.count(TileLabel::Positive),
        train_comparative: sets.train.count(TileLabel::Comparative),
        test_positive: sets.test.count(TileLabel::Positive),
        test_comparative: sets.test.count(TileLabel::Comparative),
        balance_ratio: sets.train.balance_ratio(),
    };
    write_json(&dir.join(TILE_SUMMARY), &summary)?;
    println!(
        "train tiles {} positive / {} comparative (ratio {:.3}); test tiles {} / {}",
        summary.train_positive,
        summary.train_comparative,
        summary.balance_ratio,
        summary.test_positive,
        summary.test_comparative
    );
    Ok(())
}

/// Training samples read back from a tile directory.
fn read_tile_dir(dir: &Path, input_side: u32) -> Result<TrainingData> {
    let records = tiling::read_tile_index(dir)?;
    let crops = exec::map_slice(Execution::default(), &records, |r| -> Result<Vec<f32>> {
        let path = dir.join(&r.file);
        let img = image::open(&path)
            .with_context(|| format!("reading tile {}", path.display()))?
            .to_luma8();
        if img.dimensions() != (r.side, r.side) {
            anyhow::bail!("tile {} is not {}x{}", path.display(), r.side, r.side);
        }
        Ok(trainer::prepare_crop(img.as_raw(), r.side, input_side))
    });
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (r, crop) in records.iter().zip(crops) {
        let Some(y) = r.label.target() else { continue };
        inputs.extend(crop?);
        labels.push(y);
    }
    Ok(TrainingData {
        input_side,
        inputs,
        labels,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelEntry {
    id: String,
    seed: u64,
    file: String,
    final_loss: f32,
    final_accuracy: f32,
}

pub fn train(config: &RunConfig) -> Result<()> {
    let tile_dir = config.stage_dir("tile");
    let summary_path = tile_dir.join(TILE_SUMMARY);
    require(&summary_path, "run `salient tile` first")?;
    let summary: TileSummary = read_json(&summary_path)?;
    require(
        &tile_dir.join("train").join(tiling::INDEX_FILE),
        "the tile stage did not finish; rerun `salient tile`",
    )?;
    let spec = config.arch()?;
    let data = read_tile_dir(&tile_dir.join("train"), spec.input_side)?;
    let dir = create_stage(config, "train")?;
    log::info!("training on {} tiles", data.len());
    let provenance = Provenance {
        split_id: summary.split_id,
        tile: Some(summary.tile),
        tileset_fingerprint: data.fingerprint(),
    };
    let models = trainer::train_ensemble(
        &spec,
        &data,
        &config.hyperparams(0),
        &config.model_seeds(),
        &provenance,
        Execution::default(),
    )?;
    let mut index = Vec::new();
    for m in &models {
        let id = m.id();
        let file = format!("{id}.model");
        m.save(&dir.join(&file))?;
        let mut metrics = String::new();
        for e in &m.history {
            metrics.push_str(&serde_json::to_string(e)?);
            metrics.push('\n');
        }
        fs::write(dir.join(format!("{id}.metrics.jsonl")), metrics)?;
        let last: EpochMetrics = *m.history.last().expect("at least one epoch");
        println!("{id}: final loss {:.4}, train accuracy {:.3}", last.loss, last.accuracy);
        index.push(ModelEntry {
            id,
            seed: m.seed(),
            file,
            final_loss: last.loss,
            final_accuracy: last.accuracy,
        });
    }
    write_json(&dir.join(MODEL_INDEX), &index)
}

fn model_index(config: &RunConfig) -> Result<(PathBuf, Vec<ModelEntry>)> {
    let dir = config.stage_dir("train");
    let path = dir.join(MODEL_INDEX);
    require(&path, "run `salient train` first")?;
    Ok((dir, read_json(&path)?))
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    require(path, "train a model first or pass an existing model file")?;
    Ok(TrainedModel::load(path)?)
}

fn trained_models(config: &RunConfig) -> Result<Vec<TrainedModel>> {
    let (dir, index) = model_index(config)?;
    index.iter().map(|e| load_model(&dir.join(&e.file))).collect()
}

pub fn evaluate(config: &RunConfig) -> Result<()> {
    let entries = split_entries(config)?;
    let models = trained_models(config)?;
    let dir = create_stage(config, "evaluate")?;
    let test: Vec<ManifestEntry> = entries.iter().filter(|e| e.role == Role::Test).cloned().collect();
    let spec = config.map_spec()?;
    let target = match &config.target_id {
        Some(id) => {
            let all = load_manifest(config)?;
            let e = all
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| ConfigError(format!("target_id `{id}` is not in the manifest")))?;
            Some(e.load_analysis_image(config.density)?)
        }
        None => None,
    };

    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for m in &models {
        let report = evaluation::evaluate_at(m, &test, &spec, config.density, config.threshold)?;
        report.write(&dir.join(format!("{}.report.jsonl", report.model_id)))?;
        let target_prob = match &target {
            Some(img) => Some(inference::image_probability(m, img, &spec)?),
            None => None,
        };
        let row = SummaryRow::from_report(&report, target_prob);
        println!(
            "{}: accuracy {:.3} ({}/{}), FN {}, FP {}{}",
            row.model_id,
            report.accuracy,
            report.correct,
            report.total,
            row.false_negatives,
            row.false_positives,
            target_prob.map(|p| format!(", target {p:.3}")).unwrap_or_default()
        );
        for x in &report.excluded {
            println!("  excluded {}: {}", x.id, x.reason);
        }
        rows.push(row);
        reports.push(report);
    }
    evaluation::write_text(&dir.join(SUMMARY_CSV), &evaluation::summary_csv(&rows))?;
    if reports.iter().all(|r| r.positive_count() > 0) {
        let selection = trainer::select_successful(&reports)?;
        match selection.ranked.first() {
            Some(best) => println!(
                "{} of {} models free of false negatives; best {}",
                selection.ranked.len(),
                reports.len(),
                best.model_id
            ),
            None => println!("{}", selection.diagnostic.as_deref().unwrap_or("no successful model")),
        }
        write_json(&dir.join(SELECTION_FILE), &selection)?;
    } else {
        log::warn!("test set has no scorable positive image; model selection skipped");
    }
    Ok(())
}

pub enum MapSource {
    Manifest(String),
    File { path: PathBuf, density: f64 },
}

/// Explicit model, else the best selected one, else the first trained one.
fn map_model(config: &RunConfig, explicit: Option<PathBuf>) -> Result<TrainedModel> {
    if let Some(path) = explicit {
        return load_model(&path);
    }
    let (dir, index) = model_index(config)?;
    let selection_path = config.stage_dir("evaluate").join(SELECTION_FILE);
    let best = if selection_path.exists() {
        let s: trainer::Selection = read_json(&selection_path)?;
        s.ranked.first().and_then(|b| index.iter().find(|e| e.id == b.model_id)).cloned()
    } else {
        None
    };
    let entry = best
        .or_else(|| index.first().cloned())
        .ok_or_else(|| MissingInput {
            path: dir.join(MODEL_INDEX),
            hint: "lists no models".into(),
        })?;
    load_model(&dir.join(entry.file))
}

#[derive(Debug, Serialize)]
struct MapSummary {
    image: String,
    model_id: String,
    overall_prob: f64,
    predicted: ImageClass,
    width: u32,
    height: u32,
    covered_pixels: usize,
    red: usize,
    gold: usize,
    green: usize,
    blue: usize,
}

pub fn map(config: &RunConfig, source: MapSource, model: Option<PathBuf>) -> Result<()> {
    let (name, original) = match source {
        MapSource::Manifest(id) => {
            let entries = load_manifest(config)?;
            let e = entries
                .iter()
                .find(|e| e.id == id)
                .ok_or_else(|| ConfigError(format!("`{id}` is not in the manifest")))?;
            require(&e.image_path, "the manifest points at a missing image")?;
            (id, e.load_image()?)
        }
        MapSource::File { path, density } => {
            require(&path, "pass an existing image file")?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            (name.clone(), CanvasImage::load(&path, name, Some(density))?)
        }
    };
    let model = map_model(config, model)?;
    let dir = create_stage(config, "map")?;
    let spec = config.map_spec()?;
    let analysis = imaging::to_luminance(&imaging::resample_to_density(&original, config.density)?);
    let pm = inference::probability_map(&model, &analysis, &spec)?;
    let overall = pm
        .coverage_weighted_mean()
        .ok_or_else(|| salient_core::Error::NotAnalyzable(name.clone()))?;

    inference::render_map(&pm)
        .save(dir.join(format!("{name}.overlay.png")))
        .context("writing overlay")?;
    let scaled = inference::render_map_scaled(&pm, original.width(), original.height());
    inference::composite(&original.to_rgb_image(), &scaled)?
        .save(dir.join(format!("{name}.composite.png")))
        .context("writing composite")?;
    let header = MapDumpHeader {
        width: pm.width,
        height: pm.height,
        density: config.density,
        tile_side: spec.side_px,
        overlap: spec.overlap_fraction,
        model_id: model.id(),
    };
    inference::write_map_dump(&dir.join(format!("{name}.map")), &header, &pm)?;

    let mut bins = [0usize; 4];
    for (&p, &c) in pm.mean_prob.iter().zip(&pm.coverage) {
        if c > 0 {
            bins[ProbabilityBin::of(p) as usize] += 1;
        }
    }
    let summary = MapSummary {
        image: name.clone(),
        model_id: model.id(),
        overall_prob: overall,
        predicted: inference::classify_image(overall, config.threshold),
        width: pm.width,
        height: pm.height,
        covered_pixels: pm.covered_pixels(),
        red: bins[ProbabilityBin::Red as usize],
        gold: bins[ProbabilityBin::Gold as usize],
        green: bins[ProbabilityBin::Green as usize],
        blue: bins[ProbabilityBin::Blue as usize],
    };
    write_json(&dir.join(format!("{name}.json")), &summary)?;
    println!(
        "{name}: overall probability {overall:.3} under {} ({:?}); map {}x{}, {} px covered",
        summary.model_id, summary.predicted, pm.width, pm.height, summary.covered_pixels
    );
    Ok(())
}

/// Regression points from a summary table, or from plain `x,y` lines.
fn regression_points(text: &str) -> Result<Vec<(f64, f64)>> {
    let header = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if header.split(',').any(|c| c.trim() == "target_prob") {
        let rows = evaluation::parse_summary_csv(text)?;
        return Ok(rows.iter().filter_map(SummaryRow::point).collect());
    }
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split([',', ' ', '\t']).filter(|f| !f.is_empty()).collect();
        match fields.as_slice() {
            [x, y] => match (x.parse(), y.parse()) {
                (Ok(x), Ok(y)) => points.push((x, y)),
                // A non-numeric first line is a header.
                _ if points.is_empty() && i == 0 => {}
                _ => anyhow::bail!("line {}: `{line}` is not an x,y pair", i + 1),
            },
            _ => anyhow::bail!("line {}: expected two columns, got `{line}`", i + 1),
        }
    }
    Ok(points)
}

pub fn regress(config: &RunConfig, input: Option<PathBuf>) -> Result<()> {
    let input = input.unwrap_or_else(|| config.stage_dir("evaluate").join(SUMMARY_CSV));
    require(&input, "run `salient evaluate` with `target_id` set, or pass --input")?;
    let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
    let points = regression_points(&text).with_context(|| format!("parsing {}", input.display()))?;
    let fit = evaluation::linear_fit(&points)?;
    let dir = create_stage(config, "regress")?;
    write_json(&dir.join("fit.json"), &fit)?;
    evaluation::write_text(&dir.join("scatter.txt"), &evaluation::scatter_data(&points))?;
    println!(
        "R^2 = {:.4}, slope {:.5}, intercept {:.5}, n = {}",
        fit.r_squared, fit.slope, fit.intercept, fit.n_points
    );
    Ok(())
}

pub fn corroborate(config: &RunConfig, model_paths: Option<Vec<PathBuf>>) -> Result<()> {
    let entries = split_entries(config)?;
    let models = match model_paths {
        Some(paths) => paths.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?,
        None => trained_models(config)?,
    };
    let external: Vec<ManifestEntry> = entries.into_iter().filter(|e| e.role == Role::External).collect();
    let dir = create_stage(config, "corroborate")?;
    let report = evaluation::corroborate(&models, &external, &config.map_spec()?, config.density)?;
    write_json(&dir.join("ordering.json"), &report)?;
    println!(
        "{} models x {} images: {} concordant, {} discordant, {} tied model-pair comparisons",
        report.model_ids.len(),
        report.image_ids.len(),
        report.concordant,
        report.discordant,
        report.ties
    );
    for p in report.pairs.iter().filter(|p| p.flagged) {
        println!(
            "  flagged {} / {}: {} discordant of {}",
            p.image_a,
            p.image_b,
            p.discordant,
            p.concordant + p.discordant + p.ties
        );
    }
    for a in &report.annotations {
        println!("  note: {a}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_from_summary_and_plain_files() {
        let summary = "model_id,accuracy,false_negatives,false_positives,target_prob\na,0.9,0,2,0.8\nb,1,0,0,\n";
        assert_eq!(regression_points(summary).unwrap(), vec![(2.0, 0.8)]);
        let plain = "fp,prob\n2,0.82\n1 0.55\n";
        assert_eq!(regression_points(plain).unwrap(), vec![(2.0, 0.82), (1.0, 0.55)]);
        assert!(regression_points("1,2\nx,y\n").is_err());
    }
}
