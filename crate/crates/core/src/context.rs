//! Three-channel input assembly (static 2D, sequential 2.5D, random 2.5D),
//! class-balanced sampling, and geometric augmentation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{PlaneLabel, SliceRecord, SourceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    #[serde(rename = "2d")]
    Static2D,
    #[serde(rename = "seq")]
    Sequential,
    Random,
    /// Two distinct draws only: channels (i, j, j).
    #[serde(rename = "random2")]
    RandomPair,
}

impl ContextKind {
    pub fn name(self) -> &'static str {
        match self {
            ContextKind::Static2D => "2d",
            ContextKind::Sequential => "seq",
            ContextKind::Random => "random",
            ContextKind::RandomPair => "random2",
        }
    }
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "2d" | "static" | "static2d" => Ok(ContextKind::Static2D),
            "seq" | "sequential" => Ok(ContextKind::Sequential),
            "random" | "rand" => Ok(ContextKind::Random),
            "random2" | "pair" => Ok(ContextKind::RandomPair),
            other => Err(Error::Config(format!("unknown context strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextStrategy {
    Static2D,
    Sequential,
    Random { seed: u64 },
    RandomPair { seed: u64 },
}

impl ContextStrategy {
    pub fn kind(self) -> ContextKind {
        match self {
            ContextStrategy::Static2D => ContextKind::Static2D,
            ContextStrategy::Sequential => ContextKind::Sequential,
            ContextStrategy::Random { .. } => ContextKind::Random,
            ContextStrategy::RandomPair { .. } => ContextKind::RandomPair,
        }
    }

    pub fn from_kind(kind: ContextKind, seed: u64) -> Self {
        match kind {
            ContextKind::Static2D => ContextStrategy::Static2D,
            ContextKind::Sequential => ContextStrategy::Sequential,
            ContextKind::Random => ContextStrategy::Random { seed },
            ContextKind::RandomPair => ContextStrategy::RandomPair { seed },
        }
    }

    /// Inference-time strategy for one record: random draws are seeded from
    /// the record's volume and slice so predictions are reproducible.
    pub fn for_inference(kind: ContextKind, record: &SliceRecord) -> Self {
        Self::from_kind(
            kind,
            stable_seed(&[record.volume_id.as_bytes(), &record.slice_index.to_le_bytes()]),
        )
    }
}

/// Hash-derived seed, stable across platforms and runs.
pub fn stable_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Three stacked slices of one volume and plane, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ContextInput {
    /// Shape (3, H, W).
    pub channels: Array3<f32>,
    pub plane: PlaneLabel,
    pub volume_id: String,
    pub slice_indices: [usize; 3],
}

/// Builds the three-channel input for `record`. `siblings` are the kept
/// slices of the same volume and plane sorted by slice index. 2D-native
/// records always use the static strategy.
pub fn assemble(record: &SliceRecord, siblings: &[&SliceRecord], strategy: ContextStrategy) -> Result<ContextInput> {
    let strategy = if record.source_kind == SourceKind::Native2D {
        ContextStrategy::Static2D
    } else {
        strategy
    };
    if strategy != ContextStrategy::Static2D && siblings.is_empty() {
        return Err(Error::EmptySiblingSet(record.volume_id.clone()));
    }
    let picks: [&SliceRecord; 3] = match strategy {
        ContextStrategy::Static2D => [record; 3],
        ContextStrategy::Sequential => {
            let pos = siblings
                .iter()
                .position(|s| s.slice_index == record.slice_index)
                .ok_or_else(|| {
                    Error::EmptySiblingSet(format!(
                        "{} (slice {} not among siblings)",
                        record.volume_id, record.slice_index
                    ))
                })?;
            let prev = if pos == 0 { record } else { siblings[pos - 1] };
            let next = siblings.get(pos + 1).copied().unwrap_or(record);
            [prev, record, next]
        }
        ContextStrategy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = siblings[rng.gen_range(0..siblings.len())];
            let k = siblings[rng.gen_range(0..siblings.len())];
            [record, j, k]
        }
        ContextStrategy::RandomPair { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = siblings[rng.gen_range(0..siblings.len())];
            [record, j, j]
        }
    };
    let (h, w) = record.pixels.dim();
    let mut channels = Array3::zeros((3, h, w));
    for (c, s) in picks.iter().enumerate() {
        if s.pixels.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "sibling slice {} is {:?}, anchor is {:?}",
                s.slice_index,
                s.pixels.dim(),
                (h, w)
            )));
        }
        channels.index_axis_mut(Axis(0), c).assign(&s.pixels);
    }
    Ok(ContextInput {
        channels,
        plane: record.plane,
        volume_id: record.volume_id.clone(),
        slice_indices: picks.map(|s| s.slice_index),
    })
}

/// Groups record indices by (volume_id, plane), each group sorted by slice index.
#[derive(Debug, Clone, Default)]
pub struct SiblingIndex {
    groups: HashMap<(String, PlaneLabel), Vec<usize>>,
}

impl SiblingIndex {
    pub fn new(records: &[SliceRecord]) -> Self {
        let mut groups: HashMap<(String, PlaneLabel), Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            groups.entry((r.volume_id.clone(), r.plane)).or_default().push(i);
        }
        for v in groups.values_mut() {
            v.sort_by_key(|&i| records[i].slice_index);
        }
        SiblingIndex { groups }
    }

    pub fn siblings<'a>(&self, records: &'a [SliceRecord], i: usize) -> Vec<&'a SliceRecord> {
        let r = &records[i];
        self.groups
            .get(&(r.volume_id.clone(), r.plane))
            .map(|ids| ids.iter().map(|&j| &records[j]).collect())
            .unwrap_or_default()
    }

    /// Position of record `i` within its sibling list and the list length.
    pub fn position(&self, records: &[SliceRecord], i: usize) -> Option<(usize, usize)> {
        let r = &records[i];
        let ids = self.groups.get(&(r.volume_id.clone(), r.plane))?;
        ids.iter().position(|&j| j == i).map(|p| (p, ids.len()))
    }
}

/// Sampling with replacement, each record weighted by the inverse frequency
/// of its class, so every class is drawn with probability 1/C.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    class_probs: Vec<f64>,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(Error::MissingClass(format!("label {l} out of range")));
            }
            counts[l] += 1;
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass(class_name(missing, num_classes)));
        }
        let weights: Vec<f64> = labels.iter().map(|&l| 1.0 / counts[l] as f64).collect();
        let total: f64 = weights.iter().sum();
        let class_probs = counts.iter().map(|&c| c as f64 * (1.0 / c as f64) / total).collect();
        Ok(BalancedSampler {
            dist: WeightedIndex::new(&weights).map_err(|e| Error::MissingClass(e.to_string()))?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            class_probs,
        })
    }

    /// Per-draw probability of each class.
    pub fn class_probabilities(&self) -> &[f64] {
        &self.class_probs
    }

    pub fn next_index(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.next_index()).collect()
    }
}

fn class_name(code: usize, num_classes: usize) -> String {
    if num_classes == 3 {
        PlaneLabel::from_code(code).map(|p| p.to_string()).unwrap_or_default()
    } else {
        format!("class {code}")
    }
}

/// Uniform sampling with replacement; the unbalanced baseline.
#[derive(Debug, Clone)]
pub struct UniformSampler {
    n: usize,
    rng: ChaCha8Rng,
}

impl UniformSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        UniformSampler {
            n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.rng.gen_range(0..self.n)).collect()
    }
}

pub const MAX_ROTATION_DEG: f64 = 20.0;
pub const FLIP_PROBABILITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        hflip: false,
        vflip: false,
        angle_deg: 0.0,
    };

    pub fn draw(rng: &mut impl Rng) -> Self {
        AugmentParams {
            hflip: rng.gen_bool(FLIP_PROBABILITY),
            vflip: rng.gen_bool(FLIP_PROBABILITY),
            angle_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }
}

/// Random flips and rotation, identical across the three channels.
pub fn augment(input: &ContextInput, seed: u64) -> ContextInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_with(input, AugmentParams::draw(&mut rng))
}

pub fn augment_with(input: &ContextInput, params: AugmentParams) -> ContextInput {
    let mut channels = input.channels.clone();
    if params.hflip {
        channels.invert_axis(Axis(2));
    }
    if params.vflip {
        channels.invert_axis(Axis(1));
    }
    let mut channels = channels.as_standard_layout().to_owned();
    if params.angle_deg != 0.0 {
        for mut ch in channels.outer_iter_mut() {
            let rotated = rotate_bilinear(&ch.to_owned(), params.angle_deg);
            ch.assign(&rotated);
        }
    }
    ContextInput {
        channels,
        ..input.clone()
    }
}

/// Rotates about the image centre with bilinear sampling and zero fill.
pub fn rotate_bilinear(src: &Array2<f32>, angle_deg: f64) -> Array2<f32> {
    let (h, w) = src.dim();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            src[[r as usize, c as usize]] as f64
        }
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        // inverse rotation maps output pixels back into the source
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
            + at(y0, x0 + 1) * fx * (1.0 - fy)
            + at(y0 + 1, x0) * (1.0 - fx) * fy
            + at(y0 + 1, x0 + 1) * fx * fy;
        v.clamp(0.0, 1.0) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rec(idx: usize, kind: SourceKind) -> SliceRecord {
        SliceRecord {
            pixels: Array2::from_elem((4, 4), idx as f32 / 100.0),
            plane: PlaneLabel::Coronal,
            volume_id: "vol".into(),
            slice_index: idx,
            source_kind: kind,
            tumor_label: None,
        }
    }

    fn siblings(n: usize) -> Vec<SliceRecord> {
        (0..n).map(|i| rec(i * 10, SourceKind::Native3D)).collect()
    }

    #[test]
    fn native2d_always_static() {
        let r = rec(0, SourceKind::Native2D);
        let out = assemble(&r, &[], ContextStrategy::Random { seed: 1 }).unwrap();
        assert_eq!(out.slice_indices, [0, 0, 0]);
        let c = &out.channels;
        assert_eq!(c.index_axis(Axis(0), 0), c.index_axis(Axis(0), 1));
        assert_eq!(c.index_axis(Axis(0), 1), c.index_axis(Axis(0), 2));
    }

    #[test]
    fn sequential_edges_replicate_centre() {
        let sib = siblings(5);
        let refs: Vec<&SliceRecord> = sib.iter().collect();
        let first = assemble(&sib[0], &refs, ContextStrategy::Sequential).unwrap();
        assert_eq!(first.slice_indices, [0, 0, 10]);
        let last = assemble(&sib[4], &refs, ContextStrategy::Sequential).unwrap();
        assert_eq!(last.slice_indices, [30, 40, 40]);
        let mid = assemble(&sib[2], &refs, ContextStrategy::Sequential).unwrap();
        assert_eq!(mid.slice_indices, [10, 20, 30]);
        assert_eq!(mid.channels[[0, 0, 0]], 0.10);
        assert_eq!(mid.channels[[2, 0, 0]], 0.30);
    }

    #[test]
    fn random_is_deterministic_and_within_siblings() {
        let sib = siblings(12);
        let refs: Vec<&SliceRecord> = sib.iter().collect();
        let valid: Vec<usize> = sib.iter().map(|s| s.slice_index).collect();
        for seed in 0..50 {
            let a = assemble(&sib[3], &refs, ContextStrategy::Random { seed }).unwrap();
            let b = assemble(&sib[3], &refs, ContextStrategy::Random { seed }).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.slice_indices[0], 30);
            assert!(a.slice_indices.iter().all(|i| valid.contains(i)));
        }
    }

    #[test]
    fn random_pair_repeats_second_draw() {
        let sib = siblings(12);
        let refs: Vec<&SliceRecord> = sib.iter().collect();
        for seed in 0..20 {
            let a = assemble(&sib[5], &refs, ContextStrategy::RandomPair { seed }).unwrap();
            assert_eq!(a.slice_indices[0], 50);
            assert_eq!(a.slice_indices[1], a.slice_indices[2]);
            assert_eq!(a.channels.index_axis(Axis(0), 1), a.channels.index_axis(Axis(0), 2));
        }
        assert_eq!("random2".parse::<ContextKind>().unwrap(), ContextKind::RandomPair);
    }

    #[test]
    fn empty_siblings_error() {
        let r = rec(0, SourceKind::Native3D);
        assert!(matches!(
            assemble(&r, &[], ContextStrategy::Sequential),
            Err(Error::EmptySiblingSet(_))
        ));
        assert!(matches!(
            assemble(&r, &[], ContextStrategy::Random { seed: 0 }),
            Err(Error::EmptySiblingSet(_))
        ));
    }

    #[test]
    fn sampler_balances_skewed_counts() {
        let mut labels = vec![0; 1000];
        labels.extend(vec![1; 500]);
        labels.extend(vec![2; 250]);
        let mut s = BalancedSampler::new(&labels, 3, 42).unwrap();
        let mut freq = [0usize; 3];
        for i in s.next_batch(10_000) {
            freq[labels[i]] += 1;
        }
        for f in freq {
            assert!((f as f64 / 10_000.0 - 1.0 / 3.0).abs() <= 0.02, "{freq:?}");
        }
    }

    #[test]
    fn sampler_probabilities_by_construction() {
        let mut labels = vec![0, 1];
        labels.extend(vec![2; 10_000]);
        let s = BalancedSampler::new(&labels, 3, 0).unwrap();
        for p in s.class_probabilities() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(matches!(
            BalancedSampler::new(&[0, 0, 1], 3, 0),
            Err(Error::MissingClass(_))
        ));
    }

    #[test]
    fn balanced_counts_give_equal_weights() {
        let labels = [0, 1, 2, 0, 1, 2];
        let s = BalancedSampler::new(&labels, 3, 0).unwrap();
        assert_eq!(s.class_probabilities()[0], s.class_probabilities()[1]);
    }

    fn input(seed: u64) -> ContextInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ContextInput {
            channels: Array3::from_shape_fn((3, 9, 7), |_| rng.gen::<f32>()),
            plane: PlaneLabel::Axial,
            volume_id: "v".into(),
            slice_indices: [0, 0, 0],
        }
    }

    #[test]
    fn identity_augmentation() {
        let x = input(1);
        assert_eq!(augment_with(&x, AugmentParams::IDENTITY), x);
    }

    #[test]
    fn zero_image_stays_zero() {
        let mut x = input(1);
        x.channels.fill(0.0);
        for seed in 0..20 {
            assert!(augment(&x, seed).channels.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn flips_are_involutions() {
        let x = input(2);
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let p = AugmentParams {
                hflip: h,
                vflip: v,
                angle_deg: 0.0,
            };
            let back = augment_with(&augment_with(&x, p), p);
            for (a, b) in back.channels.iter().zip(x.channels.iter()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn channels_share_one_transform() {
        let mut x = input(3);
        let c0 = x.channels.index_axis(Axis(0), 0).to_owned();
        for c in 1..3 {
            x.channels.index_axis_mut(Axis(0), c).assign(&c0);
        }
        let y = augment(&x, 99);
        assert_eq!(y.channels.index_axis(Axis(0), 0), y.channels.index_axis(Axis(0), 2));
    }

    proptest! {
        #[test]
        fn augmentation_preserves_shape_and_range(seed in any::<u64>(), img in 0u64..1000) {
            let x = input(img);
            let y = augment(&x, seed);
            prop_assert_eq!(y.channels.dim(), x.channels.dim());
            prop_assert!(y.channels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn interior_sequential_indices_increase(n in 3usize..20, pos in 1usize..18) {
            prop_assume!(pos + 1 < n);
            let sib = siblings(n);
            let refs: Vec<&SliceRecord> = sib.iter().collect();
            let out = assemble(&sib[pos], &refs, ContextStrategy::Sequential).unwrap();
            prop_assert!(out.slice_indices[0] < out.slice_indices[1] && out.slice_indices[1] < out.slice_indices[2]);
        }
    }
}
