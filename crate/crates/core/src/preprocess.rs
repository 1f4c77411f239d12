//! Slice cleaning: 3D morphological opening, sparse slice sampling, quality
//! filtering, and square padding with bilinear resizing.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayViewMut1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, ImageLabels, ParseOptions, PlaneLabel, SliceRecord, SourceKind, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleaningConfig {
    /// Structuring-element radius; the element is a cube of side 2r+1.
    pub opening_radius: usize,
    pub foreground_threshold: f32,
    pub sample_stride: usize,
    pub mean_intensity_min: f32,
    pub coverage_min: f32,
    pub target_size: usize,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            opening_radius: 1,
            foreground_threshold: 0.1,
            sample_stride: 10,
            mean_intensity_min: 0.1,
            coverage_min: 0.25,
            target_size: 224,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f32| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("foreground_threshold", self.foreground_threshold)?;
        unit("mean_intensity_min", self.mean_intensity_min)?;
        unit("coverage_min", self.coverage_min)?;
        if self.opening_radius < 1 {
            return Err(Error::Config("opening_radius must be >= 1".into()));
        }
        if self.sample_stride < 1 {
            return Err(Error::Config("sample_stride must be >= 1".into()));
        }
        if self.target_size < 16 {
            return Err(Error::Config("target_size must be >= 16".into()));
        }
        Ok(())
    }
}

/// Binarizes at the foreground threshold, opens the mask with a cubic
/// element, and zeroes every voxel outside the opened mask. Voxels beyond the
/// volume border count as background.
pub fn morphological_open(volume: &Volume, config: &CleaningConfig) -> Volume {
    let mask = volume.voxels().mapv(|v| v > config.foreground_threshold);
    let opened = binary_open(&mask, config.opening_radius);
    let mut out = volume.voxels().clone();
    out.zip_mut_with(&opened, |v, &keep| {
        if !keep {
            *v = 0.0;
        }
    });
    volume.map_voxels(out)
}

/// Binary opening (erosion then dilation) with a (2r+1)³ cube.
pub fn binary_open(mask: &Array3<bool>, radius: usize) -> Array3<bool> {
    let eroded = box_filter(mask, radius, true);
    box_filter(&eroded, radius, false)
}

/// Separable cube erosion (`all`) or dilation (any) with zero padding.
fn box_filter(mask: &Array3<bool>, radius: usize, erode: bool) -> Array3<bool> {
    let mut cur = mask.clone();
    for axis in 0..3 {
        let mut next = cur.clone();
        for (src, dst) in cur.lanes(Axis(axis)).into_iter().zip(next.lanes_mut(Axis(axis))) {
            filter_lane(src.to_vec(), dst, radius, erode);
        }
        cur = next;
    }
    cur
}

fn filter_lane(src: Vec<bool>, mut dst: ArrayViewMut1<bool>, radius: usize, erode: bool) {
    let n = src.len();
    // prefix count of set bits
    let mut prefix = vec![0usize; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + src[i] as usize;
    }
    for i in 0..n {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(n - 1);
        let count = prefix[hi + 1] - prefix[lo];
        dst[i] = if erode {
            // out-of-range neighbours are background
            i >= radius && i + radius < n && count == 2 * radius + 1
        } else {
            count > 0
        };
    }
}

/// Slices at indices 0, stride, 2·stride, … along the plane normal.
pub fn sample_slices(volume: &Volume, plane: PlaneLabel, config: &CleaningConfig) -> Vec<SliceRecord> {
    (0..volume.extent(plane))
        .step_by(config.sample_stride.max(1))
        .map(|index| SliceRecord {
            pixels: volume.slice(plane, index),
            plane,
            volume_id: volume.source_id().to_string(),
            slice_index: index,
            source_kind: SourceKind::Native3D,
            tumor_label: None,
        })
        .collect()
}

/// Cleaned, labeled slices through a lesion phantom's lesion centre in
/// every plane, `spread` slices apart. Slices failing the quality filter
/// are dropped.
pub fn lesion_records(
    volume: &Volume,
    info: &ingest::LesionInfo,
    config: &CleaningConfig,
    spread: usize,
) -> Vec<SliceRecord> {
    let opened = morphological_open(volume, config);
    let mut out = Vec::new();
    for plane in PlaneLabel::ALL {
        for index in ingest::lesion_slice_indices(info, plane, spread) {
            let record = SliceRecord {
                pixels: opened.slice(plane, index),
                plane,
                volume_id: volume.source_id().to_string(),
                slice_index: index,
                source_kind: SourceKind::Native3D,
                tumor_label: Some(info.label),
            };
            if quality_filter(&record, config) {
                out.push(pad_square_resize(&record, config));
            }
        }
    }
    out
}

/// Mean intensity and fraction of pixels above the foreground threshold.
pub fn slice_stats(pixels: &Array2<f32>, foreground_threshold: f32) -> (f64, f64) {
    if pixels.is_empty() {
        return (0.0, 0.0);
    }
    let n = pixels.len() as f64;
    let mean = pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let cover = pixels.iter().filter(|&&v| v > foreground_threshold).count() as f64 / n;
    (mean, cover)
}

/// Keep iff mean > mean_intensity_min and coverage > coverage_min.
pub fn quality_filter(slice: &SliceRecord, config: &CleaningConfig) -> bool {
    let (mean, cover) = slice_stats(&slice.pixels, config.foreground_threshold);
    mean > config.mean_intensity_min as f64 && cover > config.coverage_min as f64
}

/// Zero-pads the shorter side to a square (odd remainder on the trailing
/// side) and resizes bilinearly to `target_size`².
pub fn pad_square_resize(slice: &SliceRecord, config: &CleaningConfig) -> SliceRecord {
    SliceRecord {
        pixels: resize_bilinear(&pad_square(&slice.pixels), config.target_size, config.target_size),
        ..slice.clone()
    }
}

pub fn pad_square(pixels: &Array2<f32>) -> Array2<f32> {
    let (h, w) = pixels.dim();
    let side = h.max(w);
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    let mut out = Array2::zeros((side, side));
    out.slice_mut(ndarray::s![top..top + h, left..left + w]).assign(pixels);
    out
}

/// Bilinear resize with half-pixel centres and edge clamping. Same-size input
/// is returned unchanged.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |d: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|c| coord(c, sx, w)).collect();
    let mut out = Array2::zeros((out_h, out_w));
    for r in 0..out_h {
        let (y0, y1, fy) = coord(r, sy, h);
        for (c, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = src[[y0, x0]] as f64 * (1.0 - fx) + src[[y0, x1]] as f64 * fx;
            let bot = src[[y1, x0]] as f64 * (1.0 - fx) + src[[y1, x1]] as f64 * fx;
            out[[r, c]] = (top * (1.0 - fy) + bot * fy) as f32;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub source_id: String,
    pub source_kind: SourceKind,
    pub kept: usize,
    pub discarded: usize,
    /// Percentage, two decimals.
    pub discarded_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub source: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineReport {
    pub sources: Vec<SourceReport>,
    pub failures: Vec<FailureReport>,
    pub kept: usize,
    pub discarded: usize,
    pub discarded_pct: f64,
}

fn pct(discarded: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        (discarded as f64 * 10000.0 / total as f64).round() / 100.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub records: Vec<SliceRecord>,
    pub report: PipelineReport,
}

/// Cleans one 3D volume: open, then for each plane sample, filter and resize.
pub fn clean_volume(volume: &Volume, config: &CleaningConfig) -> (Vec<SliceRecord>, SourceReport) {
    let opened = morphological_open(volume, config);
    let mut kept = Vec::new();
    let mut discarded = 0;
    for plane in PlaneLabel::ALL {
        for s in sample_slices(&opened, plane, config) {
            if quality_filter(&s, config) {
                kept.push(pad_square_resize(&s, config));
            } else {
                discarded += 1;
            }
        }
    }
    let report = SourceReport {
        source_id: volume.source_id().to_string(),
        source_kind: SourceKind::Native3D,
        kept: kept.len(),
        discarded,
        discarded_pct: pct(discarded, kept.len() + discarded),
    };
    (kept, report)
}

/// Runs the cleaning pipeline over 3D volumes and 2D-native slices. 2D
/// slices skip the 3D opening and sampling. Records come back sorted by
/// (volume_id, plane, slice_index).
pub fn run_pipeline(volumes: &[Volume], images: &[SliceRecord], config: &CleaningConfig) -> PipelineOutput {
    let mut parts: Vec<(Vec<SliceRecord>, SourceReport)> =
        volumes.par_iter().map(|v| clean_volume(v, config)).collect();
    parts.extend(
        images
            .par_iter()
            .map(|img| {
                let keep = quality_filter(img, config);
                let kept = if keep {
                    vec![pad_square_resize(img, config)]
                } else {
                    vec![]
                };
                let report = SourceReport {
                    source_id: img.volume_id.clone(),
                    source_kind: SourceKind::Native2D,
                    kept: keep as usize,
                    discarded: !keep as usize,
                    discarded_pct: if keep { 0.0 } else { 100.0 },
                };
                (kept, report)
            })
            .collect::<Vec<_>>(),
    );

    let mut out = PipelineOutput::default();
    for (records, report) in parts {
        out.records.extend(records);
        out.report.kept += report.kept;
        out.report.discarded += report.discarded;
        out.report.sources.push(report);
    }
    out.records
        .sort_by(|a, b| (&a.volume_id, a.plane, a.slice_index).cmp(&(&b.volume_id, b.plane, b.slice_index)));
    out.report.sources.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    out.report.discarded_pct = pct(out.report.discarded, out.report.kept + out.report.discarded);
    out
}

/// Loads every path (NIfTI volumes by extension, raster images otherwise),
/// runs the pipeline, and lists load failures in the report instead of
/// aborting.
pub fn run_pipeline_paths(paths: &[PathBuf], config: &CleaningConfig, parse: &ParseOptions) -> PipelineOutput {
    let loaded: Vec<(PathBuf, Result<Loaded>)> = paths.par_iter().map(|p| (p.clone(), load_source(p, parse))).collect();
    let mut volumes = Vec::new();
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for (path, res) in loaded {
        match res {
            Ok(Loaded::Volume(v)) => volumes.push(v),
            Ok(Loaded::Image(s)) => images.push(s),
            Err(e) => failures.push(FailureReport {
                source: path.display().to_string(),
                error: e.to_string(),
            }),
        }
    }
    let mut out = run_pipeline(&volumes, &images, config);
    out.report.failures = failures;
    out
}

enum Loaded {
    Volume(Volume),
    Image(SliceRecord),
}

pub fn is_nifti_path(p: &Path) -> bool {
    let s = p.to_string_lossy();
    s.ends_with(".nii") || s.ends_with(".nii.gz") || s.ends_with(".hdr") || s.ends_with(".hdr.gz")
}

fn load_source(path: &Path, parse: &ParseOptions) -> Result<Loaded> {
    if is_nifti_path(path) {
        ingest::parse_nifti(path, parse).map(Loaded::Volume)
    } else {
        let labels = ImageLabels {
            ..ingest::label_from_path(path)
        };
        ingest::load_image2d(path, &labels).map(Loaded::Image)
    }
}
