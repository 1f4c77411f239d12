//! Volume and slice ingestion: NIfTI-1 volumes, plain 2D rasters, slice
//! manifests, and the synthetic phantom generator used for dataset-free runs.
//!
//! Every `Volume` handed out by this module is in the canonical axis
//! convention: array axis 0 runs left→right, axis 1 posterior→anterior and
//! axis 2 inferior→superior (RAS+). Plane labels are therefore independent of
//! whatever orientation the source header declared.

mod image2d;
mod manifest;
pub mod nifti;
mod orientation;
mod phantom;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image2d::{label_from_path, load_gray_normalized, load_image2d, load_slice_png, save_slice_png, ImageLabels};
pub use manifest::{
    load_slice_dataset, read_manifest, write_manifest, write_slice_dataset, ManifestRow, MANIFEST_HEADER, SLICE_DIR,
};
pub use nifti::{parse_nifti, serialize_nifti, NiftiDatatype, ParseOptions};
pub use orientation::{AnatomicalAxis, AxisDirection, Orientation};
pub use phantom::{generate_lesion_phantom, generate_phantom, lesion_slice_indices, LesionInfo, PhantomGeometry};

/// Anatomical viewing plane. Integer codes are fixed: Axial=0, Coronal=1, Sagittal=2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlaneLabel {
    Axial,
    Coronal,
    Sagittal,
}

impl PlaneLabel {
    pub const ALL: [PlaneLabel; 3] = [PlaneLabel::Axial, PlaneLabel::Coronal, PlaneLabel::Sagittal];

    pub fn code(self) -> usize {
        match self {
            PlaneLabel::Axial => 0,
            PlaneLabel::Coronal => 1,
            PlaneLabel::Sagittal => 2,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    /// Canonical array axis normal to this plane.
    pub fn normal_axis(self) -> usize {
        match self {
            PlaneLabel::Sagittal => 0,
            PlaneLabel::Coronal => 1,
            PlaneLabel::Axial => 2,
        }
    }

    pub fn one_hot(self) -> [f32; 3] {
        let mut v = [0.0; 3];
        v[self.code()] = 1.0;
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneLabel::Axial => "axial",
            PlaneLabel::Coronal => "coronal",
            PlaneLabel::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for PlaneLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlaneLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axial" | "a" | "0" => Ok(PlaneLabel::Axial),
            "coronal" | "c" | "1" => Ok(PlaneLabel::Coronal),
            "sagittal" | "s" | "2" => Ok(PlaneLabel::Sagittal),
            other => Err(Error::MissingLabel(format!("unknown plane label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceKind {
    Native2D,
    Native3D,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::Native2D => "native2d",
            SourceKind::Native3D => "native3d",
        })
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "native2d" | "2d" => Ok(SourceKind::Native2D),
            "native3d" | "3d" => Ok(SourceKind::Native3D),
            other => Err(Error::Manifest(format!("unknown source kind '{other}'"))),
        }
    }
}

/// Downstream tumor class. Codes: Glioma=0, Meningioma=1, Pituitary=2, NoTumor=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TumorLabel {
    Glioma,
    Meningioma,
    Pituitary,
    NoTumor,
}

impl TumorLabel {
    pub const ALL: [TumorLabel; 4] = [
        TumorLabel::Glioma,
        TumorLabel::Meningioma,
        TumorLabel::Pituitary,
        TumorLabel::NoTumor,
    ];

    pub fn code(self) -> usize {
        match self {
            TumorLabel::Glioma => 0,
            TumorLabel::Meningioma => 1,
            TumorLabel::Pituitary => 2,
            TumorLabel::NoTumor => 3,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TumorLabel::Glioma => "glioma",
            TumorLabel::Meningioma => "meningioma",
            TumorLabel::Pituitary => "pituitary",
            TumorLabel::NoTumor => "notumor",
        }
    }
}

impl fmt::Display for TumorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TumorLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "glioma" => Ok(TumorLabel::Glioma),
            "meningioma" => Ok(TumorLabel::Meningioma),
            "pituitary" => Ok(TumorLabel::Pituitary),
            "notumor" | "none" => Ok(TumorLabel::NoTumor),
            other => Err(Error::MissingLabel(format!("unknown tumor label '{other}'"))),
        }
    }
}

/// A 3D scalar volume in canonical (RAS+) axis order with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    voxels: Array3<f32>,
    spacing: [f32; 3],
    orientation: Orientation,
    source_id: String,
}

impl Volume {
    /// Builds a volume from raw intensities, min-max normalizing them.
    pub fn from_raw(
        mut voxels: Array3<f32>,
        spacing: [f32; 3],
        orientation: Orientation,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        check_shape_spacing(voxels.dim(), spacing)?;
        normalize_min_max(voxels.as_slice_mut().expect("owned arrays are contiguous"));
        Ok(Volume {
            voxels,
            spacing,
            orientation,
            source_id: source_id.into(),
        })
    }

    /// Builds a volume whose intensities are already in [0, 1]; values are
    /// clamped, not rescaled.
    pub fn from_normalized(mut voxels: Array3<f32>, spacing: [f32; 3], source_id: impl Into<String>) -> Result<Self> {
        check_shape_spacing(voxels.dim(), spacing)?;
        voxels.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Ok(Volume {
            voxels: voxels.as_standard_layout().to_owned(),
            spacing,
            orientation: Orientation::canonical(),
            source_id: source_id.into(),
        })
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn shape(&self) -> [usize; 3] {
        let (x, y, z) = self.voxels.dim();
        [x, y, z]
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    /// Number of slices along the axis normal to `plane`.
    pub fn extent(&self, plane: PlaneLabel) -> usize {
        self.shape()[plane.normal_axis()]
    }

    /// Returns a new volume with identical metadata and replaced voxels.
    pub fn map_voxels(&self, voxels: Array3<f32>) -> Volume {
        assert_eq!(voxels.dim(), self.voxels.dim());
        Volume {
            voxels,
            spacing: self.spacing,
            orientation: self.orientation,
            source_id: self.source_id.clone(),
        }
    }

    /// Reorders axes so that the array is in RAS+ order. Idempotent.
    pub fn canonicalize(&self) -> Volume {
        if self.orientation.is_canonical() {
            return self.clone();
        }
        let (voxels, spacing) = self.orientation.canonicalize(&self.voxels, self.spacing);
        Volume {
            voxels,
            spacing,
            orientation: Orientation::canonical(),
            source_id: self.source_id.clone(),
        }
    }

    /// 2D slice at `index` along the normal of `plane`, in display order:
    /// rows run top-down (anterior or superior first), columns run along the
    /// remaining in-plane axis.
    pub fn slice(&self, plane: PlaneLabel, index: usize) -> Array2<f32> {
        let sub = self.voxels.index_axis(Axis(plane.normal_axis()), index);
        // `sub` is indexed [col_axis, row_axis]: (x,y) axial, (x,z) coronal, (y,z) sagittal.
        let mut img = sub.t().to_owned();
        img.invert_axis(Axis(0));
        img
    }
}

fn check_shape_spacing(dim: (usize, usize, usize), spacing: [f32; 3]) -> Result<()> {
    if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
        return Err(Error::MalformedHeader(format!("empty volume shape {dim:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::MalformedHeader(format!("invalid spacing {spacing:?}")));
    }
    Ok(())
}

/// Min-max normalizes in place. Constant or empty input becomes all zero.
pub fn normalize_min_max(values: &mut [f32]) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values.iter() {
        if v.is_finite() {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
    }
    if hi <= lo {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = if v.is_finite() {
            (((*v as f64) - lo) / range) as f32
        } else {
            0.0
        };
    }
}

/// One 2D slice with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub pixels: Array2<f32>,
    pub plane: PlaneLabel,
    pub volume_id: String,
    pub slice_index: usize,
    pub source_kind: SourceKind,
    pub tumor_label: Option<TumorLabel>,
}

impl SliceRecord {
    /// Stable identifier used in file names and prediction dumps.
    pub fn record_id(&self) -> String {
        format!("{}__{}__{:04}", self.volume_id, self.plane, self.slice_index)
    }

    pub fn mean_intensity(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn plane_codes_are_stable() {
        assert_eq!(PlaneLabel::Axial.code(), 0);
        assert_eq!(PlaneLabel::Coronal.code(), 1);
        assert_eq!(PlaneLabel::Sagittal.code(), 2);
        assert_eq!(PlaneLabel::Axial.one_hot(), [1.0, 0.0, 0.0]);
        for p in PlaneLabel::ALL {
            assert_eq!(PlaneLabel::from_code(p.code()), Some(p));
            assert_eq!(p.to_string().parse::<PlaneLabel>().unwrap(), p);
        }
    }

    #[test]
    fn constant_values_normalize_to_zero() {
        let mut v = vec![3.0f32; 10];
        normalize_min_max(&mut v);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalization_is_idempotent_on_unit_range() {
        let mut v = vec![0.0f32, 0.25, 0.5, 1.0, 0.123_456_79];
        let before = v.clone();
        normalize_min_max(&mut v);
        assert_eq!(v, before);
    }

    #[test]
    fn slices_have_in_plane_dimensions() {
        let vol = Volume::from_normalized(Array3::zeros((4, 5, 6)), [1.0; 3], "v").unwrap();
        assert_eq!(vol.slice(PlaneLabel::Axial, 0).dim(), (5, 4));
        assert_eq!(vol.slice(PlaneLabel::Coronal, 0).dim(), (6, 4));
        assert_eq!(vol.slice(PlaneLabel::Sagittal, 0).dim(), (6, 5));
        assert_eq!(vol.extent(PlaneLabel::Axial), 6);
    }

    #[test]
    fn axial_slice_puts_anterior_on_top() {
        let mut data = Array3::zeros((2, 3, 1));
        data[[0, 2, 0]] = 1.0; // most anterior row, leftmost column
        let vol = Volume::from_normalized(data, [1.0; 3], "v").unwrap();
        let s = vol.slice(PlaneLabel::Axial, 0);
        assert_eq!(s, array![[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn rejects_bad_spacing() {
        assert!(Volume::from_normalized(Array3::zeros((2, 2, 2)), [1.0, 0.0, 1.0], "v").is_err());
    }
}
