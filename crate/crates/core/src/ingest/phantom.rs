//! Synthetic head phantoms with known geometry.
//!
//! The "head" is an anisotropic ellipsoid (narrow left-right, long
//! anterior-posterior, medium inferior-superior) with a bright shell, a
//! superior-to-inferior intensity ramp, and three spherical markers. Each
//! marker sits in the central slice of one plane and is offset from the
//! central slices of the other two. The ellipse aspect ratio and the ramp
//! direction make interior slices plane-identifiable; slices near the poles
//! shrink to small, featureless ellipses. Isolated bright specks are scattered
//! through the volume as noise for the morphological cleanup to remove.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Orientation, PlaneLabel, TumorLabel, Volume};
use crate::error::{Error, Result};

const MIN_EXTENT: usize = 16;
const SHELL_INNER: f64 = 0.88;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub intensity: f32,
}

/// An axis-aligned ellipsoid blob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub intensity: f32,
}

impl Blob {
    fn radius2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.semi_axes[i]).powi(2))
            .sum()
    }
}

/// Ground-truth geometry of a phantom, in voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub shape: [usize; 3],
    pub head: Blob,
    /// Indexed by `PlaneLabel::code()`.
    pub markers: [Sphere; 3],
    pub lesion: Option<Blob>,
    pub specks: Vec<([usize; 3], f32)>,
    noise_seed: u64,
}

impl PhantomGeometry {
    pub fn new(seed: u64, shape: [usize; 3]) -> Result<Self> {
        if shape.iter().any(|&d| d < MIN_EXTENT) {
            return Err(Error::ShapeTooSmall(shape));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext = shape.map(|d| d as f64);
        let base = [0.30, 0.42, 0.36];
        let semi: [f64; 3] = std::array::from_fn(|i| (base[i] + rng.gen_range(-0.02..0.02)) * ext[i]);
        let center: [f64; 3] = std::array::from_fn(|i| (0.5 + rng.gen_range(-0.02..0.02)) * ext[i] - 0.5);
        let m = semi.iter().copied().fold(f64::INFINITY, f64::min);
        let at = |offsets: [f64; 3]| -> [f64; 3] { std::array::from_fn(|i| center[i] + offsets[i] * semi[i]) };
        let markers = [
            // axial: in the central axial slice, right and posterior of centre
            Sphere {
                center: at([0.45, -0.35, 0.0]),
                radius: 0.25 * m,
                intensity: 1.0,
            },
            // coronal: in the central coronal slice, left and superior; dark
            Sphere {
                center: at([-0.40, 0.0, 0.40]),
                radius: 0.20 * m,
                intensity: 0.1,
            },
            // sagittal: in the central sagittal slice, anterior and inferior
            Sphere {
                center: at([0.0, 0.45, -0.35]),
                radius: 0.15 * m,
                intensity: 0.7,
            },
        ];
        let n_specks = shape.iter().product::<usize>() / 2000;
        let specks = (0..n_specks)
            .map(|_| {
                let p = std::array::from_fn(|i| rng.gen_range(1..shape[i] - 1));
                (p, rng.gen_range(0.5f32..1.0))
            })
            .collect();
        Ok(PhantomGeometry {
            shape,
            head: Blob {
                center,
                semi_axes: semi,
                intensity: 0.45,
            },
            markers,
            lesion: None,
            specks,
            noise_seed: rng.gen(),
        })
    }

    /// Raw (un-normalized) intensity at a voxel, excluding specks and noise.
    fn intensity(&self, p: [f64; 3]) -> f32 {
        let r2 = self.head.radius2(p);
        if r2 > 1.0 {
            return 0.0;
        }
        for s in &self.markers {
            let d2: f64 = (0..3).map(|i| (p[i] - s.center[i]).powi(2)).sum();
            if d2 <= s.radius * s.radius {
                return s.intensity;
            }
        }
        if let Some(l) = &self.lesion {
            if l.radius2(p) <= 1.0 {
                return l.intensity;
            }
        }
        if r2 >= SHELL_INNER * SHELL_INNER {
            return 0.85;
        }
        let zrel = ((p[2] - self.head.center[2]) / self.head.semi_axes[2]).clamp(-1.0, 1.0);
        (self.head.intensity as f64 + 0.15 * zrel) as f32
    }

    pub fn render(&self, source_id: &str) -> Result<Volume> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let [nx, ny, nz] = self.shape;
        let mut vox = Array3::<f32>::zeros((nx, ny, nz));
        for ((x, y, z), v) in vox.indexed_iter_mut() {
            let val = self.intensity([x as f64, y as f64, z as f64]);
            *v = if val > 0.0 {
                val + rng.gen_range(-0.02f32..0.02)
            } else {
                0.0
            };
        }
        for &(p, val) in &self.specks {
            vox[p] = vox[p].max(val);
        }
        // pin the normalization range so volumes with and without bright
        // markers in view share one intensity scale
        vox[[0, 0, 0]] = 0.0;
        vox.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        vox[[nx - 1, ny - 1, nz - 1]] = 1.0;
        Volume::from_raw(vox, [1.0; 3], Orientation::canonical(), source_id)
    }

    /// Head-ellipsoid membership for each pixel of a display-order slice.
    pub fn head_mask(&self, plane: PlaneLabel, index: usize) -> Array2<bool> {
        let mask = Array3::from_shape_fn((self.shape[0], self.shape[1], self.shape[2]), |(x, y, z)| {
            self.head.radius2([x as f64, y as f64, z as f64]) <= 1.0
        });
        let vol = mask.mapv(|b| b as u8 as f32);
        let sliced = Volume::from_normalized(vol, [1.0; 3], "mask").expect("valid shape");
        sliced.slice(plane, index).mapv(|v| v > 0.5)
    }
}

/// Deterministic head phantom; same seed and shape give identical voxels.
pub fn generate_phantom(seed: u64, shape: [usize; 3]) -> Result<Volume> {
    PhantomGeometry::new(seed, shape)?.render(&format!("phantom_{seed:05}"))
}

/// Tumor-proxy ground truth for a lesion phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionInfo {
    pub label: TumorLabel,
    /// Lesion centre, or a head-interior point for `NoTumor`.
    pub center: [f64; 3],
    pub geometry: PhantomGeometry,
}

/// Head phantom carrying one lesion whose shape encodes the class: an
/// inferior-superior rod (glioma), a flat axial disc (meningioma), a bright
/// inferior sphere (pituitary), or nothing.
pub fn generate_lesion_phantom(seed: u64, shape: [usize; 3], label: TumorLabel) -> Result<(Volume, LesionInfo)> {
    let mut geo = PhantomGeometry::new(seed, shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e51);
    let h = geo.head;
    let m = h.semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
    let jitter = |rng: &mut ChaCha8Rng, f: [f64; 3]| -> [f64; 3] {
        std::array::from_fn(|i| h.center[i] + rng.gen_range(-f[i]..=f[i]) * h.semi_axes[i])
    };
    let center = jitter(&mut rng, [0.12, 0.12, 0.08]);
    let lesion = match label {
        TumorLabel::Glioma => Some(Blob {
            center,
            semi_axes: [0.16 * m, 0.16 * m, 0.5 * m],
            intensity: 0.95,
        }),
        TumorLabel::Meningioma => Some(Blob {
            center,
            semi_axes: [0.45 * m, 0.45 * m, 0.13 * m],
            intensity: 0.8,
        }),
        TumorLabel::Pituitary => {
            let c = [
                h.center[0],
                h.center[1] + 0.1 * h.semi_axes[1],
                h.center[2] - 0.5 * h.semi_axes[2],
            ];
            Some(Blob {
                center: c,
                semi_axes: [0.2 * m; 3],
                intensity: 1.0,
            })
        }
        TumorLabel::NoTumor => None,
    };
    let center = lesion.map(|l| l.center).unwrap_or(center);
    geo.lesion = lesion;
    let vol = geo.render(&format!("lesion_{seed:05}"))?;
    Ok((
        vol,
        LesionInfo {
            label,
            center,
            geometry: geo,
        },
    ))
}

/// Slice indices along `plane`'s normal that cut through the lesion centre:
/// the centre slice and its neighbours at ±`spread`.
pub fn lesion_slice_indices(info: &LesionInfo, plane: PlaneLabel, spread: usize) -> Vec<usize> {
    let axis = plane.normal_axis();
    let extent = info.geometry.shape[axis];
    let c = info.center[axis].round().clamp(0.0, (extent - 1) as f64) as usize;
    let mut idx = vec![c];
    if spread > 0 {
        if c >= spread {
            idx.insert(0, c - spread);
        }
        if c + spread < extent {
            idx.push(c + spread);
        }
    }
    idx
}
