//! Training, evaluation and model bundles for the plane and tumor tasks.

mod bundle;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{self, BalancedSampler, ContextKind, ContextStrategy, SiblingIndex, UniformSampler};
use crate::error::{Error, Result};
use crate::ingest::{PlaneLabel, SliceRecord, TumorLabel};
use crate::nn::{ops, Adam, Mode, Network, Tensor};

pub use bundle::{
    build_model, classify_image, export_portable, image_input, load_bundle, pretrained_path, read_fixtures,
    save_bundle, BundleMeta, ExportReport, Fixture, LoadedModel, BUNDLE_SCHEMA_VERSION, CACHE_ENV, FIXTURE_DIR,
    FIXTURE_INDEX, META_FILE, MODEL_FILE, PARITY_TOLERANCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Plane,
    Tumor,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Plane => 3,
            Task::Tumor => 4,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            Task::Plane => PlaneLabel::ALL.iter().map(|p| p.name().to_string()).collect(),
            Task::Tumor => TumorLabel::ALL.iter().map(|t| t.name().to_string()).collect(),
        }
    }

    pub fn label_of(self, record: &SliceRecord) -> Result<usize> {
        match self {
            Task::Plane => Ok(record.plane.code()),
            Task::Tumor => record
                .tumor_label
                .map(|t| t.code())
                .ok_or_else(|| Error::MissingLabel(format!("tumor label for {}", record.record_id()))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Plane => "plane",
            Task::Tumor => "tumor",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plane" => Ok(Task::Plane),
            "tumor" | "tumour" => Ok(Task::Tumor),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Leaves [0, 1] inputs untouched.
    MinMax01,
    /// Natural-image channel statistics matching pretrained weights.
    PretrainStats,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::MinMax01 => "min_max01",
            NormMode::PretrainStats => "pretrain_stats",
        }
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "min_max01" | "minmax" | "minmax01" => Ok(NormMode::MinMax01),
            "pretrain_stats" | "pretrain" | "imagenet" => Ok(NormMode::PretrainStats),
            other => Err(Error::Config(format!("unknown normalization '{other}'"))),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const PRETRAIN_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PRETRAIN_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub mode: NormMode,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormConfig {
    pub fn new(mode: NormMode) -> Self {
        match mode {
            NormMode::MinMax01 => NormConfig {
                mode,
                mean: [0.0; 3],
                std: [1.0; 3],
            },
            NormMode::PretrainStats => NormConfig {
                mode,
                mean: PRETRAIN_MEAN,
                std: PRETRAIN_STD,
            },
        }
    }

    /// Normalizes a (3, H, W) buffer in place.
    pub fn apply(&self, chw: &mut [f32]) {
        if self.mode == NormMode::MinMax01 {
            return;
        }
        let plane = chw.len() / 3;
        for (c, block) in chw.chunks_mut(plane).enumerate() {
            for v in block {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub context: ContextKind,
    pub norm: NormMode,
    pub seed: u64,
    pub augment: bool,
    pub balanced: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.001,
            batch_size: 64,
            context: ContextKind::Random,
            norm: NormMode::MinMax01,
            seed: 0,
            augment: true,
            balanced: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Labeled records plus the sibling lookup needed for context assembly.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub records: Vec<SliceRecord>,
    pub labels: Vec<usize>,
    /// Plane one-hot side input for the metadata-enhanced tumor model.
    pub aux_planes: Option<Vec<PlaneLabel>>,
    siblings: SiblingIndex,
}

impl Dataset {
    pub fn new(task: Task, records: Vec<SliceRecord>) -> Result<Self> {
        let labels = records.iter().map(|r| task.label_of(r)).collect::<Result<Vec<_>>>()?;
        let siblings = SiblingIndex::new(&records);
        Ok(Dataset {
            task,
            records,
            labels,
            aux_planes: None,
            siblings,
        })
    }

    pub fn with_aux_planes(mut self, planes: Vec<PlaneLabel>) -> Result<Self> {
        if planes.len() != self.records.len() {
            return Err(Error::DimensionMismatch {
                expected: self.records.len(),
                actual: planes.len(),
            });
        }
        self.aux_planes = Some(planes);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.task.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn require_all_classes(&self) -> Result<()> {
        let names = self.task.class_names();
        for (c, n) in self.class_counts().iter().enumerate() {
            if *n == 0 {
                return Err(Error::MissingClass(names[c].clone()));
            }
        }
        Ok(())
    }

    /// Normalized (3, H, W) input for record `i`.
    pub fn input(
        &self,
        i: usize,
        strategy: ContextStrategy,
        augment_seed: Option<u64>,
        norm: &NormConfig,
    ) -> Result<Vec<f32>> {
        let siblings = self.siblings.siblings(&self.records, i);
        let mut input = context::assemble(&self.records[i], &siblings, strategy)?;
        if let Some(seed) = augment_seed {
            input = context::augment(&input, seed);
        }
        let mut v = input.channels.into_raw_vec_and_offset().0;
        norm.apply(&mut v);
        Ok(v)
    }

    pub fn inference_input(&self, i: usize, kind: ContextKind, norm: &NormConfig) -> Result<Vec<f32>> {
        self.input(i, ContextStrategy::for_inference(kind, &self.records[i]), None, norm)
    }

    fn aux_tensor(&self, idx: &[usize]) -> Option<Tensor> {
        self.aux_planes.as_ref().map(|planes| Tensor {
            shape: vec![idx.len(), 3],
            data: idx.iter().flat_map(|&i| planes[i].one_hot()).collect(),
        })
    }

    fn pixel_side(&self) -> usize {
        self.records.first().map(|r| r.pixels.nrows()).unwrap_or(0)
    }
}

/// Splits records into (train, held-out) by volume so sibling slices never straddle the split.
pub fn split_by_volume(
    records: Vec<SliceRecord>,
    holdout_frac: f64,
    seed: u64,
) -> (Vec<SliceRecord>, Vec<SliceRecord>) {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.volume_id.as_str()).collect();
    let mut ids: Vec<String> = ids.into_iter().map(String::from).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_hold = (ids.len() as f64 * holdout_frac).ceil() as usize;
    if ids.len() >= 2 {
        n_hold = n_hold.clamp(1, ids.len() - 1);
    } else {
        n_hold = 0;
    }
    let held: BTreeSet<String> = ids.into_iter().take(n_hold).collect();
    records.into_iter().partition(|r| !held.contains(&r.volume_id))
}

/// Assigns each distinct volume id to one of `fractions.len()` parts, with
/// part sizes following the cumulative fractions rounded to whole volumes.
pub fn assign_volume_splits<'a>(
    volume_ids: impl IntoIterator<Item = &'a str>,
    fractions: &[f64],
    seed: u64,
) -> Result<BTreeMap<String, usize>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let ids: BTreeSet<&str> = volume_ids.into_iter().collect();
    let mut ids: Vec<String> = ids.into_iter().map(String::from).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len() as f64;
    let mut cum = 0.0;
    let bounds: Vec<usize> = fractions
        .iter()
        .map(|f| {
            cum += f;
            (cum * n).round() as usize
        })
        .collect();
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, bounds.iter().position(|&b| i < b).unwrap_or(fractions.len() - 1)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no validation records were supplied.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochStats>,
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.batch();
    let c = logits.item_len();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    for (i, &y) in labels.iter().enumerate() {
        let p = ops::softmax(logits.item(i));
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for (k, pk) in p.iter().enumerate() {
            let t = if k == y { 1.0 } else { 0.0 };
            grad.push(((pk - t) / n as f64) as f32);
        }
    }
    (
        loss / n as f64,
        Tensor {
            shape: logits.shape.clone(),
            data: grad,
        },
    )
}

fn gather_inputs(
    data: &Dataset,
    idx: &[usize],
    seeds: &[(u64, u64)],
    kind: ContextKind,
    augment: bool,
    norm: &NormConfig,
) -> Result<Tensor> {
    let items: Vec<Vec<f32>> = idx
        .par_iter()
        .zip(seeds)
        .map(|(&i, &(ctx, aug))| data.input(i, ContextStrategy::from_kind(kind, ctx), augment.then_some(aug), norm))
        .collect::<Result<_>>()?;
    let s = data.pixel_side();
    let refs: Vec<&[f32]> = items.iter().map(|v| v.as_slice()).collect();
    Tensor::stack(&refs, &[3, s, s])
}

/// Loss on one fixed batch, in training mode without augmentation.
pub fn batch_loss(net: &Network, data: &Dataset, idx: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let norm = NormConfig::new(cfg.norm);
    let seeds: Vec<(u64, u64)> = idx.iter().map(|&i| (i as u64, 0)).collect();
    let x = gather_inputs(data, idx, &seeds, cfg.context, false, &norm)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let (logits, _) = net.forward(x, data.aux_tensor(idx).as_ref(), Mode::Train { seed: cfg.seed })?;
    Ok(cross_entropy(&logits, &labels).0)
}

/// One Adam step on a fixed batch; returns the loss before the step.
pub fn train_step(net: &mut Network, opt: &mut Adam, data: &Dataset, idx: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let norm = NormConfig::new(cfg.norm);
    let seeds: Vec<(u64, u64)> = idx.iter().map(|&i| (i as u64, 0)).collect();
    let x = gather_inputs(data, idx, &seeds, cfg.context, false, &norm)?;
    step(net, opt, data, idx, x, cfg.seed)
}

fn step(net: &mut Network, opt: &mut Adam, data: &Dataset, idx: &[usize], x: Tensor, seed: u64) -> Result<f64> {
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let (logits, cache) = net.forward(x, data.aux_tensor(idx).as_ref(), Mode::Train { seed })?;
    let (loss, dlogits) = cross_entropy(&logits, &labels);
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = net.backward(&cache, dlogits)?;
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Ok(f64::NAN);
    }
    net.commit_stats(&cache);
    opt.step(net.params_mut(), &grads);
    Ok(loss)
}

/// Trains for `cfg.epochs` epochs of ⌈n / batch⌉ steps each and returns the final-epoch model.
pub fn train(mut network: Network, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    train_set.require_all_classes()?;
    if network.spec.num_classes != train_set.task.num_classes() {
        return Err(Error::ClassMismatch(
            network.spec.num_classes,
            train_set.task.num_classes(),
        ));
    }
    let norm = NormConfig::new(cfg.norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut balanced = if cfg.balanced {
        Some(BalancedSampler::new(
            &train_set.labels,
            train_set.task.num_classes(),
            rng.gen(),
        )?)
    } else {
        None
    };
    let mut uniform = UniformSampler::new(train_set.len(), rng.gen());
    let mut opt = Adam::new(cfg.learning_rate);
    let steps = train_set.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let idx = match balanced.as_mut() {
                Some(s) => s.next_batch(cfg.batch_size),
                None => uniform.next_batch(cfg.batch_size),
            };
            let seeds: Vec<(u64, u64)> = idx.iter().map(|_| (rng.gen(), rng.gen())).collect();
            let x = gather_inputs(train_set, &idx, &seeds, cfg.context, cfg.augment, &norm)?;
            let loss = step(&mut network, &mut opt, train_set, &idx, x, rng.gen())?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch, history });
            }
            total += loss;
        }
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&network, val_set, cfg.context, &norm)?.accuracy)
        };
        history.push(EpochStats {
            epoch,
            train_loss: total / steps as f64,
            val_accuracy,
        });
    }
    Ok(TrainOutcome { network, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub uncertainty: f64,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let label = argmax(&probs);
        let uncertainty = crate::fusion::shannon_normalized(&probs);
        Prediction {
            probs,
            label,
            uncertainty,
        }
    }

    pub fn from_logits(logits: &[f32]) -> Self {
        Prediction::from_probs(ops::softmax(logits))
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

const INFER_BATCH: usize = 64;

/// Eval-mode predictions for every record, using the deterministic inference context.
pub fn predict(network: &Network, data: &Dataset, kind: ContextKind, norm: &NormConfig) -> Result<Vec<Prediction>> {
    let s = network.spec.input_size;
    if data.pixel_side() != s && !data.is_empty() {
        return Err(Error::Shape(format!(
            "records are {} px, model expects {s}",
            data.pixel_side()
        )));
    }
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(INFER_BATCH) {
        let items: Vec<Vec<f32>> = idx
            .par_iter()
            .map(|&i| data.inference_input(i, kind, norm))
            .collect::<Result<_>>()?;
        let refs: Vec<&[f32]> = items.iter().map(|v| v.as_slice()).collect();
        let x = Tensor::stack(&refs, &[3, s, s])?;
        let logits = network.logits(x, data.aux_tensor(idx).as_ref())?;
        out.extend((0..idx.len()).map(|i| Prediction::from_logits(logits.item(i))));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordPrediction {
    pub record_id: String,
    pub truth: usize,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub total: usize,
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Rows are ground truth, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub misclassified: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub predictions: Vec<RecordPrediction>,
}

impl Metrics {
    pub fn from_labels(truths: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truths.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truths.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        Ok(Metrics {
            total: truths.len(),
            accuracy: correct as f64 / truths.len() as f64,
            per_class_accuracy,
            confusion,
            misclassified: truths.len() - correct,
            predictions: Vec::new(),
        })
    }
}

pub fn evaluate(network: &Network, data: &Dataset, kind: ContextKind, norm: &NormConfig) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let preds = predict(network, data, kind, norm)?;
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let mut m = Metrics::from_labels(&data.labels, &labels, network.spec.num_classes)?;
    m.predictions = data
        .records
        .iter()
        .zip(&data.labels)
        .zip(preds)
        .map(|((r, &truth), prediction)| RecordPrediction {
            record_id: r.record_id(),
            truth,
            prediction,
        })
        .collect();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SourceKind;
    use ndarray::Array2;

    fn record(vol: &str, plane: PlaneLabel, idx: usize) -> SliceRecord {
        SliceRecord {
            pixels: Array2::from_elem((8, 8), 0.5),
            plane,
            volume_id: vol.into(),
            slice_index: idx,
            source_kind: SourceKind::Native3D,
            tumor_label: None,
        }
    }

    #[test]
    fn defaults_match_published_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.learning_rate, c.batch_size), (30, 0.001, 64));
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { epochs: 0, ..c }.validate().is_err());
    }

    #[test]
    fn perfect_predictor_metrics() {
        let t = vec![0, 1, 2, 2, 1];
        let m = Metrics::from_labels(&t, &t, 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.misclassified, 0);
        for (i, row) in m.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    assert_eq!(*v, 0);
                }
            }
        }
        assert!(matches!(Metrics::from_labels(&[], &[], 3), Err(Error::EmptyTestSet)));
    }

    #[test]
    fn misclassified_count_is_exact() {
        let t = vec![0, 0, 1, 1, 2, 2, 2];
        let p = vec![0, 1, 1, 2, 2, 2, 0];
        let m = Metrics::from_labels(&t, &p, 3).unwrap();
        assert_eq!(m.misclassified, 3);
        assert_eq!(m.misclassified, (m.total as f64 * (1.0 - m.accuracy)).round() as usize);
        assert_eq!(m.per_class_accuracy[0], Some(0.5));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn pretrain_norm_uses_channel_stats() {
        let mut v = vec![0.485, 0.456, 0.406 + 0.225];
        NormConfig::new(NormMode::PretrainStats).apply(&mut v);
        assert!(v[0].abs() < 1e-6 && v[1].abs() < 1e-6 && (v[2] - 1.0).abs() < 1e-5);
        let mut w = vec![0.3, 0.6, 0.9];
        NormConfig::new(NormMode::MinMax01).apply(&mut w);
        assert_eq!(w, vec![0.3, 0.6, 0.9]);
    }

    #[test]
    fn volume_splits_follow_fractions() {
        let ids: Vec<String> = (0..10).map(|i| format!("v{i}")).collect();
        let parts = assign_volume_splits(ids.iter().map(String::as_str), &[0.6, 0.2, 0.2], 3).unwrap();
        let mut sizes = [0; 3];
        parts.values().for_each(|&p| sizes[p] += 1);
        assert_eq!(sizes, [6, 2, 2]);
        assert_eq!(
            parts,
            assign_volume_splits(ids.iter().map(String::as_str), &[0.6, 0.2, 0.2], 3).unwrap()
        );
        assert!(assign_volume_splits(ids.iter().map(String::as_str), &[0.6, 0.2], 3).is_err());
    }

    #[test]
    fn split_never_shares_volumes() {
        let mut recs = Vec::new();
        for v in 0..20 {
            for i in 0..5 {
                recs.push(record(&format!("v{v:02}"), PlaneLabel::ALL[i % 3], i));
            }
        }
        let (train, held) = split_by_volume(recs, 0.1, 4);
        assert_eq!(held.len(), 10);
        let a: BTreeSet<_> = train.iter().map(|r| &r.volume_id).collect();
        let b: BTreeSet<_> = held.iter().map(|r| &r.volume_id).collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn missing_class_is_reported() {
        let recs = vec![record("a", PlaneLabel::Axial, 0), record("a", PlaneLabel::Coronal, 0)];
        let d = Dataset::new(Task::Plane, recs).unwrap();
        assert!(matches!(d.require_all_classes(), Err(Error::MissingClass(c)) if c == "sagittal"));
        assert!(matches!(
            Dataset::new(Task::Tumor, vec![record("a", PlaneLabel::Axial, 0)]),
            Err(Error::MissingLabel(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let logits = Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.5]).unwrap();
        let (loss, g) = cross_entropy(&logits, &[1]);
        let p = ops::softmax(&logits.data);
        assert!((loss + p[1].ln()).abs() < 1e-12);
        assert!((g.data[1] as f64 - (p[1] - 1.0)).abs() < 1e-6);
        assert!((g.data[0] as f64 - p[0]).abs() < 1e-6);
    }
}
