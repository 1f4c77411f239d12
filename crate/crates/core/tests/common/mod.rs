#![allow(dead_code)]

use planemeta::ingest::{generate_lesion_phantom, generate_phantom, SliceRecord, TumorLabel};
use planemeta::preprocess::{lesion_records, run_pipeline, CleaningConfig};

pub const SHAPE: [usize; 3] = [48, 52, 46];
pub const SIZE: usize = 32;

pub fn cleaning(stride: usize) -> CleaningConfig {
    CleaningConfig {
        sample_stride: stride,
        target_size: SIZE,
        ..Default::default()
    }
}

/// Cleaned plane-task slices from phantoms `seeds`.
pub fn plane_records(seeds: std::ops::Range<u64>, stride: usize) -> Vec<SliceRecord> {
    let vols: Vec<_> = seeds.map(|s| generate_phantom(s, SHAPE).unwrap()).collect();
    run_pipeline(&vols, &[], &cleaning(stride)).records
}

/// Lesion-proxy slices with classes cycling through all four labels.
pub fn lesion_set(seeds: std::ops::Range<u64>) -> Vec<SliceRecord> {
    seeds
        .flat_map(|s| {
            let (v, info) = generate_lesion_phantom(s, SHAPE, TumorLabel::ALL[(s % 4) as usize]).unwrap();
            lesion_records(&v, &info, &cleaning(3), 2)
        })
        .collect()
}
