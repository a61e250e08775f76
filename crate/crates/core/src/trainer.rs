//! Tile-classifier training, seed ensembles and the zero-false-negative
//! selection rule.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn::{bundle, ArchitectureSpec, Gradients, Network, Parameters, Workspace};
use crate::dataset::{TileConfig, TileSet};
use crate::error::{Error, Result};
use crate::evaluation::EvaluationReport;
use crate::exec::{self, Execution};
use crate::imaging;
use crate::seed;
use crate::tiling::Tile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f32,
    pub accuracy: f32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub split_id: String,
    pub tile: Option<TileConfig>,
    pub tileset_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ArchitectureSpec,
    pub params: Parameters,
    pub hyper: Hyperparams,
    pub history: Vec<EpochMetrics>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    spec: ArchitectureSpec,
    hyper: Hyperparams,
    history: Vec<EpochMetrics>,
    provenance: Provenance,
}

impl TrainedModel {
    pub fn id(&self) -> String {
        let variant = match self.spec.variant {
            crate::cnn::Variant::FiveLayer => "five",
            crate::cnn::Variant::EightLayer => "eight",
        };
        format!("{variant}-{}-seed{}", self.provenance.split_id, self.hyper.seed)
    }

    pub fn seed(&self) -> u64 {
        self.hyper.seed
    }

    pub fn network(&self) -> Result<Network<'_>> {
        Network::new(&self.spec, &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            spec: self.spec.clone(),
            hyper: self.hyper,
            history: self.history.clone(),
            provenance: self.provenance.clone(),
        };
        bundle::encode(&header, &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params): (ModelHeader, Parameters) = bundle::read(path)?;
        params.check(&h.spec)?;
        Ok(Self {
            spec: h.spec,
            params,
            hyper: h.hyper,
            history: h.history,
            provenance: h.provenance,
        })
    }
}

/// Tiles resampled to the network input side and scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub input_side: u32,
    pub inputs: Vec<f32>,
    pub labels: Vec<f32>,
}

/// Resamples a square luminance crop to `input_side` and scales to [0, 1].
pub fn prepare_crop(crop: &[u8], side: u32, input_side: u32) -> Vec<f32> {
    let resized = imaging::resize_raw(
        crop,
        side as usize,
        side as usize,
        1,
        input_side as usize,
        input_side as usize,
    );
    resized.into_iter().map(|v| v as f32 / 255.0).collect()
}

impl TrainingData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = (self.input_side * self.input_side) as usize;
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Labelled tiles of a tile set; unlabelled tiles are skipped.
    pub fn from_tileset(set: &TileSet, input_side: u32, mode: Execution) -> Result<Self> {
        let labelled: Vec<&Tile> = set.tiles.iter().filter(|t| t.label.target().is_some()).collect();
        let crops = exec::map_slice(mode, &labelled, |t| {
            set.image(&t.source_id)
                .map(|img| prepare_crop(&img.crop_square(t.x, t.y, t.side), t.side, input_side))
                .ok_or_else(|| Error::InvalidImage(format!("no image for tile source `{}`", t.source_id)))
        });
        let mut inputs = Vec::with_capacity(labelled.len() * (input_side * input_side) as usize);
        for c in crops {
            inputs.extend(c?);
        }
        Ok(Self {
            input_side,
            inputs,
            labels: labelled.iter().map(|t| t.label.target().expect("filtered")).collect(),
        })
    }

    /// SHA-256 over side, labels and inputs, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.input_side.to_le_bytes());
        for y in &self.labels {
            h.update(y.to_le_bytes());
        }
        for v in &self.inputs {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Trains with SGD + momentum (`v = m·v + g`, `w -= lr·v`) for exactly
/// `hyper.epochs` epochs. Initialisation and shuffling derive from
/// `hyper.seed`.
pub fn train_model(
    spec: &ArchitectureSpec,
    data: &TrainingData,
    hyper: &Hyperparams,
    provenance: Provenance,
) -> Result<TrainedModel> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set has no tiles".into()));
    }
    if data.input_side != spec.input_side {
        return Err(Error::Shape(format!(
            "training tiles of side {} for a network expecting {}",
            data.input_side, spec.input_side
        )));
    }
    let positives = data.labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::SingleClass);
    }

    let mut params = Parameters::init(spec, seed::derive(hyper.seed, "init", 0));
    let mut velocity = Gradients::zeros_like(&params);
    let mut grads = Gradients::zeros_like(&params);
    let mut ws = Workspace::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        if hyper.shuffle {
            let mut rng = seed::derived_rng(hyper.seed, "shuffle", epoch as u64);
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(hyper.batch_size).enumerate() {
            grads.fill_zero();
            let mut batch_loss = 0.0f32;
            {
                let net = Network::new(spec, &params)?;
                for &i in batch {
                    let y = data.labels[i];
                    let (loss, p) = net.accumulate(data.sample(i), y, &mut grads, &mut ws);
                    batch_loss += loss;
                    if (p > 0.5) == (y == 1.0) {
                        correct += 1;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss as f64;
            let scale = 1.0 / batch.len() as f32;
            for ((p, v), g) in params.tensors.iter_mut().zip(&mut velocity.tensors).zip(&grads.tensors) {
                for ((w, vel), &gr) in p.tensor.values_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *vel = hyper.momentum * *vel + gr * scale;
                    *w -= hyper.learning_rate * *vel;
                }
            }
        }
        let metrics = EpochMetrics {
            epoch,
            loss: (loss_sum / data.len() as f64) as f32,
            accuracy: correct as f32 / data.len() as f32,
        };
        log::debug!("seed {} epoch {epoch}: loss {:.4} acc {:.3}", hyper.seed, metrics.loss, metrics.accuracy);
        history.push(metrics);
    }
    Ok(TrainedModel {
        spec: spec.clone(),
        params,
        hyper: *hyper,
        history,
        provenance,
    })
}

/// One model per seed; models are independent of each other and of order.
pub fn train_ensemble(
    spec: &ArchitectureSpec,
    data: &TrainingData,
    hyper: &Hyperparams,
    seeds: &[u64],
    provenance: &Provenance,
    mode: Execution,
) -> Result<Vec<TrainedModel>> {
    if seeds.is_empty() {
        return Err(Error::Config("ensemble needs at least one seed".into()));
    }
    exec::map_slice(mode, seeds, |&s| {
        let h = Hyperparams { seed: s, ..*hyper };
        train_model(spec, data, &h, provenance.clone())
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    /// Index into the candidate list.
    pub index: usize,
    pub model_id: String,
    pub seed: u64,
    pub accuracy: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub ranked: Vec<RankedModel>,
    pub rejected: Vec<RankedModel>,
    pub diagnostic: Option<String>,
}

/// Keeps models with zero image-level false negatives, best first: higher
/// accuracy, then fewer false positives, then lower seed.
pub fn select_successful(reports: &[EvaluationReport]) -> Result<Selection> {
    if let Some(r) = reports.iter().find(|r| r.positive_count() == 0) {
        return Err(Error::Config(format!(
            "report for `{}` has no positive test image; the false-negative rule cannot apply",
            r.model_id
        )));
    }
    let (mut ranked, rejected): (Vec<RankedModel>, Vec<RankedModel>) = reports
        .iter()
        .enumerate()
        .map(|(index, r)| RankedModel {
            index,
            model_id: r.model_id.clone(),
            seed: r.seed,
            accuracy: r.accuracy,
            false_positives: r.false_positives,
            false_negatives: r.false_negatives,
        })
        .partition(|m| m.false_negatives == 0);
    ranked.sort_by(|a, b| {
        b.accuracy
            .partial_cmp(&a.accuracy)
            .unwrap_or(Ordering::Equal)
            .then(a.false_positives.cmp(&b.false_positives))
            .then(a.seed.cmp(&b.seed))
    });
    let diagnostic = ranked.is_empty().then(|| {
        format!(
            "all {} models misclassified at least one positive test image",
            reports.len()
        )
    });
    Ok(Selection {
        ranked,
        rejected,
        diagnostic,
    })
}

/// [`select_successful`] over models scored by `classify`.
pub fn select_models<F>(models: &[TrainedModel], mut classify: F) -> Result<Selection>
where
    F: FnMut(&TrainedModel) -> Result<EvaluationReport>,
{
    let reports = models.iter().map(&mut classify).collect::<Result<Vec<_>>>()?;
    select_successful(&reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageClass;
    use crate::evaluation::{EvaluationReport, ImageRecord};

    fn toy_data(spec: &ArchitectureSpec, n: usize) -> TrainingData {
        let side = spec.input_side as usize;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = (i % 2) as f32;
            for y in 0..side {
                for x in 0..side {
                    // Positive tiles carry fine vertical stripes, comparative coarse ones.
                    let period = if label == 1.0 { 2 } else { 8 };
                    let v = if (x / period) % 2 == 0 { 0.2 } else { 0.8 };
                    let jitter = (seed::splitmix64((i * side * side + y * side + x) as u64) % 100) as f32 / 1000.0;
                    inputs.push(v + jitter);
                }
            }
            labels.push(label);
        }
        TrainingData {
            input_side: spec.input_side,
            inputs,
            labels,
        }
    }

    fn quick() -> Hyperparams {
        Hyperparams {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.01,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let spec = ArchitectureSpec::five_layer(80).unwrap();
        let data = toy_data(&spec, 6);
        let h = Hyperparams {
            learning_rate: 0.0,
            ..quick()
        };
        let m = train_model(&spec, &data, &h, Provenance::default()).unwrap();
        assert_eq!(m.params, Parameters::init(&spec, seed::derive(h.seed, "init", 0)));
        assert_eq!(m.history.len(), 2);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = ArchitectureSpec::five_layer(80).unwrap();
        let data = toy_data(&spec, 8);
        let a = train_model(&spec, &data, &quick(), Provenance::default()).unwrap();
        let b = train_model(&spec, &data, &quick(), Provenance::default()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert!(a.history.iter().all(|m| m.loss.is_finite()));
    }

    #[test]
    fn single_class_is_rejected() {
        let spec = ArchitectureSpec::five_layer(80).unwrap();
        let mut data = toy_data(&spec, 4);
        data.labels.fill(1.0);
        assert!(matches!(
            train_model(&spec, &data, &quick(), Provenance::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn ensemble_members_are_independent() {
        let spec = ArchitectureSpec::five_layer(80).unwrap();
        let data = toy_data(&spec, 6);
        let h = Hyperparams { epochs: 1, ..quick() };
        let p = Provenance::default();
        let one = train_ensemble(&spec, &data, &h, &[7], &p, Execution::Parallel).unwrap();
        let two = train_ensemble(&spec, &data, &h, &[9, 7], &p, Execution::Sequential).unwrap();
        assert_eq!(one[0], two[1]);
        assert_ne!(two[0].params, two[1].params);
    }

    fn report(seed: u64, fp: usize, fn_: usize, n_neg: usize) -> EvaluationReport {
        let mut records = Vec::new();
        for i in 0..2 {
            let predicted = if i < fn_ { ImageClass::Comparative } else { ImageClass::Positive };
            records.push(ImageRecord::new(format!("pos{i}"), ImageClass::Positive, 0.6, predicted, 10));
        }
        for i in 0..n_neg {
            let predicted = if i < fp { ImageClass::Positive } else { ImageClass::Comparative };
            records.push(ImageRecord::new(format!("neg{i}"), ImageClass::Comparative, 0.4, predicted, 10));
        }
        EvaluationReport::from_records(format!("m{seed}"), seed, records, Vec::new()).unwrap()
    }

    #[test]
    fn selection_rule() {
        let reports = vec![
            report(1, 1, 0, 31), // 0.97
            report(2, 0, 1, 31), // one false negative: excluded
            report(3, 0, 0, 31), // 1.00
            report(0, 1, 0, 31), // ties seed 1 on accuracy and FP, lower seed wins
        ];
        let s = select_successful(&reports).unwrap();
        let seeds: Vec<u64> = s.ranked.iter().map(|m| m.seed).collect();
        assert_eq!(seeds, vec![3, 0, 1]);
        assert_eq!(s.ranked[0].accuracy, 1.0);
        assert!(s.ranked.iter().all(|m| m.false_negatives == 0));
        assert_eq!(s.rejected.len(), 1);

        let failing = vec![report(1, 0, 1, 5), report(2, 0, 2, 5)];
        let s = select_successful(&failing).unwrap();
        assert!(s.ranked.is_empty());
        assert!(s.diagnostic.unwrap().contains("all 2 models"));
    }
}
