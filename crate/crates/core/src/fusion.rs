//! Uncertainty-gated fusion of an image-only and a metadata-enhanced tumor classifier.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::ContextKind;
use crate::error::{Error, Result};
use crate::ingest::{PlaneLabel, SliceRecord};
use crate::models::{self, argmax, Dataset, NormConfig, Prediction, Task};
use crate::nn::layers::Linear;
use crate::nn::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Shannon entropy divided by ln C, in [0, 1].
    #[default]
    Normalized,
    /// Shannon entropy in nats.
    RawNats,
}

impl fmt::Display for EntropyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntropyMode::Normalized => "normalized",
            EntropyMode::RawNats => "raw_nats",
        })
    }
}

impl FromStr for EntropyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normalized" | "norm" => Ok(EntropyMode::Normalized),
            "raw_nats" | "raw" | "nats" => Ok(EntropyMode::RawNats),
            other => Err(Error::Config(format!("unknown entropy mode '{other}'"))),
        }
    }
}

const SIMPLEX_TOL: f64 = 1e-6;

fn check_simplex(probs: &[f64]) -> Result<()> {
    if probs.len() < 2 {
        return Err(Error::InvalidDistribution(format!(
            "{} classes; need at least 2",
            probs.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidDistribution(format!("entry {p} is not a probability")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
    }
    Ok(())
}

fn shannon(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

pub(crate) fn shannon_normalized(probs: &[f64]) -> f64 {
    if probs.len() < 2 {
        return 0.0;
    }
    // exact for the uniform distribution, where the ratio of logs can land
    // one ulp away from 1
    if probs.iter().all(|&p| p == probs[0]) {
        return 1.0;
    }
    (shannon(probs) / (probs.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Predictive entropy of a probability vector, with 0·ln 0 = 0.
pub fn entropy(probs: &[f64], mode: EntropyMode) -> Result<f64> {
    check_simplex(probs)?;
    Ok(match mode {
        EntropyMode::Normalized => shannon_normalized(probs),
        EntropyMode::RawNats => shannon(probs).max(0.0),
    })
}

/// Tumor logits from penultimate image features plus the one-hot plane.
pub fn metadata_head(features: &[f32], plane: PlaneLabel, head: &Linear) -> Result<Vec<f32>> {
    let width = features.len() + 3;
    if head.in_f != width {
        return Err(Error::DimensionMismatch {
            expected: head.in_f,
            actual: width,
        });
    }
    let mut x = features.to_vec();
    x.extend_from_slice(&plane.one_hot());
    Ok(crate::nn::ops::linear_forward(
        &x,
        1,
        &head.weight,
        &head.bias,
        head.in_f,
        head.out_f,
    ))
}

pub const DEFAULT_GRID_POINTS: usize = 101;

/// `n` evenly spaced thresholds covering [0, 1].
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub tau: f64,
    pub grid_points: usize,
    pub entropy: EntropyMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau: 0.2020,
            grid_points: DEFAULT_GRID_POINTS,
            entropy: EntropyMode::Normalized,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.grid_points < 2 {
            return Err(Error::Config("grid needs at least 2 points".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.grid_points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsedModel {
    ImageOnly,
    MetadataEnhanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPrediction {
    pub final_label: usize,
    pub used_model: UsedModel,
    pub meta_uncertainty: f64,
    pub image: Prediction,
    pub meta: Prediction,
}

/// Uses the metadata-enhanced prediction when its uncertainty is at most `tau`.
pub fn gate(image: &Prediction, meta: &Prediction, tau: f64) -> Result<FusionPrediction> {
    if image.probs.len() != meta.probs.len() {
        return Err(Error::ClassMismatch(image.probs.len(), meta.probs.len()));
    }
    let used_model = if meta.uncertainty <= tau {
        UsedModel::MetadataEnhanced
    } else {
        UsedModel::ImageOnly
    };
    Ok(FusionPrediction {
        final_label: match used_model {
            UsedModel::MetadataEnhanced => meta.label,
            UsedModel::ImageOnly => image.label,
        },
        used_model,
        meta_uncertainty: meta.uncertainty,
        image: image.clone(),
        meta: meta.clone(),
    })
}

/// One record's predictions from both tumor models, with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub record_id: String,
    pub image_probs: Vec<f64>,
    pub meta_probs: Vec<f64>,
    pub truth: usize,
}

struct Scored {
    uncertainty: f64,
    image_correct: bool,
    meta_correct: bool,
}

fn score(pairs: &[PredictionPair], mode: EntropyMode) -> Result<Vec<Scored>> {
    pairs
        .iter()
        .map(|p| {
            if p.image_probs.len() != p.meta_probs.len() {
                return Err(Error::ClassMismatch(p.image_probs.len(), p.meta_probs.len()));
            }
            check_simplex(&p.image_probs)?;
            Ok(Scored {
                uncertainty: entropy(&p.meta_probs, mode)?,
                image_correct: argmax(&p.image_probs) == p.truth,
                meta_correct: argmax(&p.meta_probs) == p.truth,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_tau: f64,
    pub best_accuracy: f64,
    pub total: usize,
    pub curve: Vec<SweepPoint>,
}

/// Gated accuracy at every grid threshold; the best threshold is the
/// smallest one reaching the maximum. Runs in O(n log n + |grid|).
pub fn sweep_threshold(pairs: &[PredictionPair], grid: &[f64], mode: EntropyMode) -> Result<SweepResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("grid must be strictly ascending within [0, 1]".into()));
    }
    let mut scored = score(pairs, mode)?;
    scored.sort_by(|a, b| a.uncertainty.total_cmp(&b.uncertainty));
    let mut correct = scored.iter().filter(|s| s.image_correct).count() as i64;
    let n = scored.len();
    let mut next = 0;
    let mut curve = Vec::with_capacity(grid.len());
    for &tau in grid {
        while next < n && scored[next].uncertainty <= tau {
            correct += scored[next].meta_correct as i64 - scored[next].image_correct as i64;
            next += 1;
        }
        curve.push(SweepPoint {
            tau,
            correct: correct as usize,
            accuracy: correct as f64 / n as f64,
        });
    }
    let mut best = 0;
    for (i, p) in curve.iter().enumerate() {
        if p.correct > curve[best].correct {
            best = i;
        }
    }
    Ok(SweepResult {
        best_tau: curve[best].tau,
        best_accuracy: curve[best].accuracy,
        total: n,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub accuracy: f64,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub tau: f64,
    pub entropy: EntropyMode,
    pub total: usize,
    /// Image-only, always-on metadata-enhanced, gated.
    pub rows: Vec<VariantRow>,
    pub routed_to_metadata: usize,
    /// Relative drop in errors of the gated variant versus image-only.
    pub error_reduction_pct: f64,
}

impl FusionReport {
    pub fn row(&self, variant: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

pub fn fusion_report(pairs: &[PredictionPair], tau: f64, mode: EntropyMode) -> Result<FusionReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let scored = score(pairs, mode)?;
    let n = scored.len();
    let image_err = scored.iter().filter(|s| !s.image_correct).count();
    let meta_err = scored.iter().filter(|s| !s.meta_correct).count();
    let routed = scored.iter().filter(|s| s.uncertainty <= tau).count();
    let gated_err = scored
        .iter()
        .filter(|s| {
            if s.uncertainty <= tau {
                !s.meta_correct
            } else {
                !s.image_correct
            }
        })
        .count();
    let row = |variant: &str, errors: usize| VariantRow {
        variant: variant.into(),
        accuracy: (n - errors) as f64 / n as f64,
        errors,
    };
    let error_reduction_pct = if image_err == 0 {
        0.0
    } else {
        100.0 * (image_err as f64 - gated_err as f64) / image_err as f64
    };
    Ok(FusionReport {
        tau,
        entropy: mode,
        total: n,
        rows: vec![
            row("image_only", image_err),
            row("metadata_enhanced", meta_err),
            row("gated", gated_err),
        ],
        routed_to_metadata: routed,
        error_reduction_pct,
    })
}

/// A trained model together with the inference settings it was trained under.
pub struct ModelHandle<'a> {
    pub network: &'a Network,
    pub context: ContextKind,
    pub norm: NormConfig,
}

/// Plane labels predicted by the plane classifier, one per record.
pub fn infer_planes(records: &[SliceRecord], plane_model: &ModelHandle<'_>) -> Result<Vec<PlaneLabel>> {
    let data = Dataset::new(Task::Plane, records.to_vec())?;
    let preds = models::predict(plane_model.network, &data, plane_model.context, &plane_model.norm)?;
    Ok(preds
        .iter()
        .map(|p| PlaneLabel::from_code(p.label).expect("plane model has three classes"))
        .collect())
}

/// Predictions of both tumor models on labeled records. The metadata model
/// receives planes from the plane classifier, never the stored labels.
pub fn prediction_pairs(
    records: &[SliceRecord],
    image_model: &ModelHandle<'_>,
    meta_model: &ModelHandle<'_>,
    plane_model: &ModelHandle<'_>,
) -> Result<Vec<PredictionPair>> {
    let planes = infer_planes(records, plane_model)?;
    let image_data = Dataset::new(Task::Tumor, records.to_vec())?;
    let meta_data = image_data.clone().with_aux_planes(planes)?;
    let image_preds = models::predict(image_model.network, &image_data, image_model.context, &image_model.norm)?;
    let meta_preds = models::predict(meta_model.network, &meta_data, meta_model.context, &meta_model.norm)?;
    Ok(records
        .iter()
        .zip(&image_data.labels)
        .zip(image_preds.into_iter().zip(meta_preds))
        .map(|((r, &truth), (ip, mp))| PredictionPair {
            record_id: r.record_id(),
            image_probs: ip.probs,
            meta_probs: mp.probs,
            truth,
        })
        .collect())
}

pub fn evaluate_fusion(
    records: &[SliceRecord],
    image_model: &ModelHandle<'_>,
    meta_model: &ModelHandle<'_>,
    plane_model: &ModelHandle<'_>,
    config: &GateConfig,
) -> Result<(FusionReport, Vec<PredictionPair>)> {
    config.validate()?;
    let pairs = prediction_pairs(records, image_model, meta_model, plane_model)?;
    Ok((fusion_report(&pairs, config.tau, config.entropy)?, pairs))
}

const PAIR_HEADER: [&str; 4] = ["record_id", "image_probs", "meta_probs", "truth"];

fn join_probs(p: &[f64]) -> String {
    p.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

fn parse_probs(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Manifest(format!("line {line}: '{t}' is not a number")))
        })
        .collect()
}

/// Writes pairs as CSV; probability vectors are space-separated and round-trip exactly.
pub fn write_pairs(path: &Path, pairs: &[PredictionPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Manifest(e.to_string());
    w.write_record(PAIR_HEADER).map_err(wrap)?;
    for p in pairs {
        w.write_record([
            p.record_id.clone(),
            join_probs(&p.image_probs),
            join_probs(&p.meta_probs),
            p.truth.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PredictionPair>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| Error::Manifest(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != PAIR_HEADER {
        return Err(Error::Manifest(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Manifest(format!("line {line}: {e}")))?;
        if rec.len() != 4 {
            return Err(Error::Manifest(format!("line {line}: expected 4 fields")));
        }
        out.push(PredictionPair {
            record_id: rec[0].to_string(),
            image_probs: parse_probs(&rec[1], line)?,
            meta_probs: parse_probs(&rec[2], line)?,
            truth: rec[3]
                .parse()
                .map_err(|_| Error::Manifest(format!("line {line}: bad truth '{}'", &rec[3])))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(probs: Vec<f64>) -> Prediction {
        Prediction::from_probs(probs)
    }

    #[test]
    fn entropy_endpoints() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0, 0.0], EntropyMode::Normalized).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4], EntropyMode::Normalized).unwrap() - 1.0).abs() < 1e-15);
        assert!((entropy(&[0.25; 4], EntropyMode::RawNats).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_of_skewed_four_class_vector() {
        // -(0.7 ln 0.7 + 3 * 0.1 ln 0.1) / ln 4, evaluated independently
        let h = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.1f64.ln()) / 4f64.ln();
        let got = entropy(&[0.7, 0.1, 0.1, 0.1], EntropyMode::Normalized).unwrap();
        assert!((got - h).abs() < 1e-12);
        assert!((got - 0.678).abs() < 5e-4);
    }

    #[test]
    fn entropy_rejects_bad_input() {
        for bad in [vec![1.0], vec![0.6, 0.6], vec![-0.1, 1.1], vec![f64::NAN, 1.0]] {
            assert!(matches!(
                entropy(&bad, EntropyMode::Normalized),
                Err(Error::InvalidDistribution(_))
            ));
        }
    }

    #[test]
    fn head_appends_one_hot() {
        let head = Linear {
            in_f: 5,
            out_f: 1,
            weight: vec![0.0, 0.0, 1.0, 2.0, 4.0],
            bias: vec![0.5],
        };
        assert_eq!(metadata_head(&[9.0, 9.0], PlaneLabel::Axial, &head).unwrap(), vec![1.5]);
        assert_eq!(
            metadata_head(&[9.0, 9.0], PlaneLabel::Sagittal, &head).unwrap(),
            vec![4.5]
        );
        assert!(matches!(
            metadata_head(&[1.0], PlaneLabel::Axial, &head),
            Err(Error::DimensionMismatch { expected: 5, actual: 4 })
        ));
    }

    #[test]
    fn gate_boundaries() {
        let img = pred(vec![0.1, 0.7, 0.1, 0.1]);
        let meta = pred(vec![0.4, 0.2, 0.2, 0.2]);
        assert_eq!(gate(&img, &meta, 1.0).unwrap().used_model, UsedModel::MetadataEnhanced);
        let g0 = gate(&img, &meta, 0.0).unwrap();
        assert_eq!((g0.used_model, g0.final_label), (UsedModel::ImageOnly, 1));
        let confident = Prediction {
            uncertainty: 0.15,
            ..pred(vec![0.97, 0.01, 0.01, 0.01])
        };
        assert_eq!(
            gate(&img, &confident, 0.2020).unwrap().used_model,
            UsedModel::MetadataEnhanced
        );
        assert!(matches!(
            gate(&img, &pred(vec![0.5, 0.5]), 0.5),
            Err(Error::ClassMismatch(4, 2))
        ));
    }

    fn pair(image: Vec<f64>, meta: Vec<f64>, truth: usize) -> PredictionPair {
        PredictionPair {
            record_id: String::new(),
            image_probs: image,
            meta_probs: meta,
            truth,
        }
    }

    #[test]
    fn sweep_prefers_metadata_when_it_is_always_right() {
        let pairs: Vec<_> = (0..20)
            .map(|i| {
                let u = i as f64 / 40.0;
                pair(vec![0.1, 0.9], vec![0.5 + u, 0.5 - u], 0)
            })
            .collect();
        let r = sweep_threshold(&pairs, &uniform_grid(101), EntropyMode::Normalized).unwrap();
        assert_eq!(r.best_tau, 1.0);
        assert_eq!(r.best_accuracy, 1.0);
    }

    #[test]
    fn identical_models_give_flat_curve_and_smallest_tau() {
        let pairs: Vec<_> = (0..10).map(|i| pair(vec![0.8, 0.2], vec![0.8, 0.2], i % 2)).collect();
        let r = sweep_threshold(&pairs, &uniform_grid(11), EntropyMode::Normalized).unwrap();
        assert!(r.curve.iter().all(|p| p.correct == r.curve[0].correct));
        assert_eq!(r.best_tau, 0.0);
        let rep = fusion_report(&pairs, 0.3, EntropyMode::Normalized).unwrap();
        assert!(rep.rows.iter().all(|row| row.errors == rep.rows[0].errors));
        assert!(matches!(
            sweep_threshold(&[], &[0.0], EntropyMode::Normalized),
            Err(Error::EmptyValidation)
        ));
    }

    #[test]
    fn pairs_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        let pairs = vec![
            pair(
                vec![0.1, 0.2, 0.30000000000000004, 0.4 - 1e-17],
                vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
                2,
            ),
            PredictionPair {
                record_id: "vol,with comma__axial__0003".into(),
                ..pair(vec![0.25; 4], vec![0.25; 4], 0)
            },
        ];
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(p in simplex(4), rot in 0usize..4) {
            let mut q = p.clone();
            q.rotate_left(rot);
            q.swap(0, 3);
            let a = entropy(&p, EntropyMode::Normalized).unwrap();
            let b = entropy(&q, EntropyMode::Normalized).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn entropy_grows_toward_uniform(p in simplex(4), t1 in 0.05f64..0.5, dt in 0.05f64..0.5) {
            let mix = |t: f64| p.iter().map(|x| (1.0 - t) * x + t * 0.25).collect::<Vec<_>>();
            let spread = p.iter().map(|x| (x - 0.25).abs()).fold(0.0, f64::max);
            prop_assume!(spread > 1e-3);
            let a = entropy(&mix(t1), EntropyMode::Normalized).unwrap();
            let b = entropy(&mix(t1 + dt), EntropyMode::Normalized).unwrap();
            prop_assert!(b > a);
        }

        #[test]
        fn gate_routing_grows_with_tau(us in prop::collection::vec(0.0f64..1.0, 1..40), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let img = pred(vec![0.5, 0.5]);
            for u in us {
                let meta = Prediction { probs: vec![0.9, 0.1], label: 0, uncertainty: u };
                let a = gate(&img, &meta, lo).unwrap();
                let b = gate(&img, &meta, hi).unwrap();
                if a.used_model == UsedModel::MetadataEnhanced {
                    prop_assert_eq!(b.used_model, UsedModel::MetadataEnhanced);
                }
                prop_assert!(b.final_label == img.label || b.final_label == meta.label);
            }
        }
    }
}
