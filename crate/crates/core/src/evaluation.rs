//! Image-level metrics, the false-positive regression and cross-model
//! ordering checks.
//!
//! Reports are JSON Lines: one `image` record per scored image, one
//! `excluded` record per image that could not be scored, then a `summary`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageClass, ManifestEntry, PreparedImage, QualityFlag};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::imaging::CanvasImage;
use crate::inference::{self, DEFAULT_THRESHOLD};
use crate::tiling::TileSpec;
use crate::trainer::TrainedModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub true_class: ImageClass,
    pub overall_prob: f64,
    pub predicted: ImageClass,
    /// Number of salient tiles scored.
    pub tiles: usize,
    #[serde(default)]
    pub fraction_positive: Option<f64>,
    #[serde(default)]
    pub quality_flag: QualityFlag,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        true_class: ImageClass,
        overall_prob: f64,
        predicted: ImageClass,
        tiles: usize,
    ) -> Self {
        Self {
            id: id.into(),
            true_class,
            overall_prob,
            predicted,
            tiles,
            fraction_positive: None,
            quality_flag: QualityFlag::Ok,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.true_class == self.predicted
    }
}

/// An image that could not be scored, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedImage {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub seed: u64,
    pub records: Vec<ImageRecord>,
    pub excluded: Vec<ExcludedImage>,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Summary {
    model_id: String,
    seed: u64,
    total: usize,
    correct: usize,
    accuracy: f64,
    false_positives: usize,
    false_negatives: usize,
    excluded: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Image(ImageRecord),
    Excluded(ExcludedImage),
    Summary(Summary),
}

impl EvaluationReport {
    /// Derives counts from the records; at least one record is required.
    pub fn from_records(
        model_id: impl Into<String>,
        seed: u64,
        records: Vec<ImageRecord>,
        excluded: Vec<ExcludedImage>,
    ) -> Result<Self> {
        let model_id = model_id.into();
        if records.is_empty() {
            return Err(Error::Empty(format!("no scorable test images for `{model_id}`")));
        }
        let total = records.len();
        let correct = records.iter().filter(|r| r.is_correct()).count();
        let false_positives = records
            .iter()
            .filter(|r| r.true_class == ImageClass::Comparative && r.predicted == ImageClass::Positive)
            .count();
        let false_negatives = records
            .iter()
            .filter(|r| r.true_class == ImageClass::Positive && r.predicted == ImageClass::Comparative)
            .count();
        Ok(Self {
            model_id,
            seed,
            records,
            excluded,
            total,
            correct,
            accuracy: correct as f64 / total as f64,
            false_positives,
            false_negatives,
        })
    }

    pub fn positive_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.true_class == ImageClass::Positive)
            .count()
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn summary(&self) -> Summary {
        Summary {
            model_id: self.model_id.clone(),
            seed: self.seed,
            total: self.total,
            correct: self.correct,
            accuracy: self.accuracy,
            false_positives: self.false_positives,
            false_negatives: self.false_negatives,
            excluded: self.excluded.len(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let lines = self
            .records
            .iter()
            .cloned()
            .map(ReportLine::Image)
            .chain(self.excluded.iter().cloned().map(ReportLine::Excluded))
            .chain(std::iter::once(ReportLine::Summary(self.summary())));
        for line in lines {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses a report and checks the summary against the records.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut excluded = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ReportLine = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                ReportLine::Image(r) => records.push(r),
                ReportLine::Excluded(x) => excluded.push(x),
                ReportLine::Summary(s) => summary = Some(s),
            }
        }
        let s = summary.ok_or_else(|| Error::Empty("report has no summary record".into()))?;
        let report = Self::from_records(s.model_id.clone(), s.seed, records, excluded)?;
        if report.summary() != s {
            return Err(Error::Config(format!(
                "report summary for `{}` disagrees with its image records",
                s.model_id
            )));
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Scores one luminance image into a record.
pub fn score_image(
    model: &TrainedModel,
    id: &str,
    class: ImageClass,
    quality_flag: QualityFlag,
    image: &CanvasImage,
    spec: &TileSpec,
    threshold: f64,
) -> Result<ImageRecord> {
    let scored = inference::score_tiles_with(model, image, spec, Execution::Sequential)?;
    let p = inference::mean_probability(&scored, id)?;
    Ok(ImageRecord {
        fraction_positive: Some(inference::fraction_positive(&scored)),
        quality_flag,
        ..ImageRecord::new(id, class, p, inference::classify_image(p, threshold), scored.len())
    })
}

fn assemble(
    model: &TrainedModel,
    outcomes: Vec<(String, Result<ImageRecord>)>,
) -> Result<EvaluationReport> {
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("excluding `{id}` from evaluation: {e}");
                excluded.push(ExcludedImage {
                    id,
                    reason: e.to_string(),
                });
            }
        }
    }
    EvaluationReport::from_records(model.id(), model.seed(), records, excluded)
}

/// Scores manifest entries at `density`. Unreadable or unanalyzable images
/// are excluded and listed in the report.
pub fn evaluate(
    model: &TrainedModel,
    entries: &[ManifestEntry],
    spec: &TileSpec,
    density: f64,
) -> Result<EvaluationReport> {
    evaluate_at(model, entries, spec, density, DEFAULT_THRESHOLD)
}

/// [`evaluate`] with an explicit decision threshold.
pub fn evaluate_at(
    model: &TrainedModel,
    entries: &[ManifestEntry],
    spec: &TileSpec,
    density: f64,
    threshold: f64,
) -> Result<EvaluationReport> {
    if entries.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let outcomes = exec::map_slice(Execution::default(), entries, |e| {
        let outcome = e.load_analysis_image(density).and_then(|img| {
            score_image(model, &e.id, e.class, e.quality_flag, &img, spec, threshold)
        });
        (e.id.clone(), outcome)
    });
    assemble(model, outcomes)
}

/// [`evaluate`] over images already at analysis density.
pub fn evaluate_prepared(
    model: &TrainedModel,
    images: &[PreparedImage],
    spec: &TileSpec,
) -> Result<EvaluationReport> {
    evaluate_prepared_with(model, images, spec, Execution::default())
}

pub fn evaluate_prepared_with(
    model: &TrainedModel,
    images: &[PreparedImage],
    spec: &TileSpec,
    mode: Execution,
) -> Result<EvaluationReport> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let outcomes = exec::map_slice(mode, images, |p| {
        let r = score_image(
            model,
            &p.id,
            p.class,
            QualityFlag::Ok,
            &p.image,
            spec,
            DEFAULT_THRESHOLD,
        );
        (p.id.clone(), r)
    });
    assemble(model, outcomes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Ordinary least squares of y on x; R² in correlation form.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<RegressionResult> {
    if points.len() < 2 {
        return Err(Error::Empty(format!(
            "linear fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit);
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        0.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(RegressionResult {
        slope,
        intercept: my - slope * mx,
        r_squared,
        n_points: points.len(),
    })
}

/// One model's headline numbers, optionally with its probability for a
/// single target image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model_id: String,
    pub accuracy: f64,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub target_prob: Option<f64>,
}

impl SummaryRow {
    pub fn from_report(report: &EvaluationReport, target_prob: Option<f64>) -> Self {
        Self {
            model_id: report.model_id.clone(),
            accuracy: report.accuracy,
            false_negatives: report.false_negatives,
            false_positives: report.false_positives,
            target_prob,
        }
    }

    /// `(false_positives, target_prob)`, the regression point.
    pub fn point(&self) -> Option<(f64, f64)> {
        self.target_prob.map(|p| (self.false_positives as f64, p))
    }
}

const SUMMARY_HEADER: &str = "model_id,accuracy,false_negatives,false_positives,target_prob";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let target = r.target_prob.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{target}\n",
            r.model_id, r.accuracy, r.false_negatives, r.false_positives
        ));
    }
    out
}

/// Parses a summary table. Columns are located by header name, so extra
/// columns and reordering are tolerated.
pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Empty("summary table".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::Manifest {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (ci, ca, cfn, cfp, ct) = (
        find("model_id")?,
        find("accuracy")?,
        find("false_negatives")?,
        find("false_positives")?,
        find("target_prob")?,
    );
    lines
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |message: String| Error::Manifest { line: i + 1, message };
            let field = |c: usize| {
                fields
                    .get(c)
                    .copied()
                    .ok_or_else(|| bad(format!("expected {} columns", cols.len())))
            };
            let num = |c: usize| -> Result<f64> {
                let f = field(c)?;
                f.parse().map_err(|_| bad(format!("`{f}` is not a number")))
            };
            let count = |c: usize| -> Result<usize> {
                let f = field(c)?;
                f.parse().map_err(|_| bad(format!("`{f}` is not a count")))
            };
            let target = field(ct)?;
            Ok(SummaryRow {
                model_id: field(ci)?.to_string(),
                accuracy: num(ca)?,
                false_negatives: count(cfn)?,
                false_positives: count(cfp)?,
                target_prob: if target.is_empty() { None } else { Some(num(ct)?) },
            })
        })
        .collect()
}

/// Concordance of one image pair across all model pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOrdering {
    pub image_a: String,
    pub image_b: String,
    pub concordant: usize,
    pub discordant: usize,
    pub ties: usize,
    /// Set when any model pair moves the two images in opposite directions.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub model_ids: Vec<String>,
    pub image_ids: Vec<String>,
    /// `probabilities[m][i]`: model `m`'s overall probability for image `i`.
    pub probabilities: Vec<Vec<f64>>,
    pub pairs: Vec<PairOrdering>,
    pub concordant: usize,
    pub discordant: usize,
    pub ties: usize,
    /// Notes on images whose scores need caution, e.g. degraded sources.
    pub annotations: Vec<String>,
}

/// Counts, for every image pair, how often switching between two models
/// moves both probabilities the same way (concordant), opposite ways
/// (discordant) or leaves one unchanged (tie).
pub fn ordering_report(
    model_ids: Vec<String>,
    image_ids: Vec<String>,
    probabilities: Vec<Vec<f64>>,
) -> Result<OrderingReport> {
    if model_ids.len() < 2 || image_ids.len() < 2 {
        return Err(Error::Config(format!(
            "ordering needs at least 2 models and 2 images, got {} and {}",
            model_ids.len(),
            image_ids.len()
        )));
    }
    if probabilities.len() != model_ids.len()
        || probabilities.iter().any(|row| row.len() != image_ids.len())
    {
        return Err(Error::Shape("probability table does not match models x images".into()));
    }
    let mut pairs = Vec::new();
    for a in 0..image_ids.len() {
        for b in a + 1..image_ids.len() {
            let (mut c, mut d, mut t) = (0, 0, 0);
            for m1 in 0..model_ids.len() {
                for m2 in m1 + 1..model_ids.len() {
                    let da = probabilities[m2][a] - probabilities[m1][a];
                    let db = probabilities[m2][b] - probabilities[m1][b];
                    let s = da * db;
                    if s > 0.0 {
                        c += 1;
                    } else if s < 0.0 {
                        d += 1;
                    } else {
                        t += 1;
                    }
                }
            }
            pairs.push(PairOrdering {
                image_a: image_ids[a].clone(),
                image_b: image_ids[b].clone(),
                concordant: c,
                discordant: d,
                ties: t,
                flagged: d > 0,
            });
        }
    }
    Ok(OrderingReport {
        concordant: pairs.iter().map(|p| p.concordant).sum(),
        discordant: pairs.iter().map(|p| p.discordant).sum(),
        ties: pairs.iter().map(|p| p.ties).sum(),
        model_ids,
        image_ids,
        probabilities,
        pairs,
        annotations: Vec::new(),
    })
}

/// Scores every external image under every model and summarizes how the
/// models co-move. Degraded images are scored but annotated.
pub fn corroborate(
    models: &[TrainedModel],
    entries: &[ManifestEntry],
    spec: &TileSpec,
    density: f64,
) -> Result<OrderingReport> {
    if models.len() < 2 || entries.len() < 2 {
        return Err(Error::Config(format!(
            "corroboration needs at least 2 models and 2 images, got {} and {}",
            models.len(),
            entries.len()
        )));
    }
    let images = exec::map_slice(Execution::default(), entries, |e| e.load_analysis_image(density))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let labelled: Vec<(&str, QualityFlag, &CanvasImage)> = entries
        .iter()
        .zip(&images)
        .map(|(e, img)| (e.id.as_str(), e.quality_flag, img))
        .collect();
    corroborate_images(models, &labelled, spec)
}

/// [`corroborate`] over images already at analysis density.
pub fn corroborate_images(
    models: &[TrainedModel],
    images: &[(&str, QualityFlag, &CanvasImage)],
    spec: &TileSpec,
) -> Result<OrderingReport> {
    let probabilities = models
        .iter()
        .map(|m| {
            exec::map_slice(Execution::default(), images, |(id, _, img)| {
                let scored = inference::score_tiles_with(m, img, spec, Execution::Sequential)?;
                inference::mean_probability(&scored, id)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = ordering_report(
        models.iter().map(|m| m.id()).collect(),
        images.iter().map(|(id, _, _)| id.to_string()).collect(),
        probabilities,
    )?;
    report.annotations = images
        .iter()
        .filter(|(_, q, _)| *q == QualityFlag::Degraded)
        .map(|(id, _, _)| format!("`{id}` is a degraded reproduction; its scores are indicative only"))
        .collect();
    Ok(report)
}

/// `x y` lines for external plotting.
pub fn scatter_data(points: &[(f64, f64)]) -> String {
    points.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
