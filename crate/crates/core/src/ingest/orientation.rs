use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnatomicalAxis {
    /// left → right
    X,
    /// posterior → anterior
    Y,
    /// inferior → superior
    Z,
}

impl AnatomicalAxis {
    fn index(self) -> usize {
        match self {
            AnatomicalAxis::X => 0,
            AnatomicalAxis::Y => 1,
            AnatomicalAxis::Z => 2,
        }
    }

    fn from_index(i: usize) -> Self {
        [AnatomicalAxis::X, AnatomicalAxis::Y, AnatomicalAxis::Z][i]
    }
}

/// World direction that increasing array index moves toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisDirection {
    pub axis: AnatomicalAxis,
    pub positive: bool,
}

impl AxisDirection {
    fn letter(self) -> char {
        match (self.axis, self.positive) {
            (AnatomicalAxis::X, true) => 'R',
            (AnatomicalAxis::X, false) => 'L',
            (AnatomicalAxis::Y, true) => 'A',
            (AnatomicalAxis::Y, false) => 'P',
            (AnatomicalAxis::Z, true) => 'S',
            (AnatomicalAxis::Z, false) => 'I',
        }
    }
}

/// Signed permutation mapping each array axis to an anatomical axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Orientation {
    axes: [AxisDirection; 3],
}

impl Orientation {
    pub fn canonical() -> Self {
        Orientation {
            axes: [0, 1, 2].map(|i| AxisDirection {
                axis: AnatomicalAxis::from_index(i),
                positive: true,
            }),
        }
    }

    pub fn new(axes: [AxisDirection; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for a in axes {
            if std::mem::replace(&mut seen[a.axis.index()], true) {
                return Err(Error::CorruptAffine(format!("axes {axes:?} are not a permutation")));
            }
        }
        Ok(Orientation { axes })
    }

    pub fn axes(&self) -> [AxisDirection; 3] {
        self.axes
    }

    pub fn is_canonical(&self) -> bool {
        *self == Self::canonical()
    }

    /// Derives the orientation from the 3×3 linear part of a voxel→world
    /// affine in RAS+ world coordinates (rows are world axes, columns array
    /// axes).
    pub fn from_affine(linear: [[f64; 3]; 3]) -> Result<Self> {
        if linear.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::CorruptAffine("non-finite entries".into()));
        }
        let det = det3(&linear);
        let scale = linear.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 || det.abs() <= 1e-12 * scale.powi(3) {
            return Err(Error::CorruptAffine(format!("singular affine (det {det:e})")));
        }
        let mut axes = [AxisDirection {
            axis: AnatomicalAxis::X,
            positive: true,
        }; 3];
        for (col, slot) in axes.iter_mut().enumerate() {
            let (row, value) = (0..3)
                .map(|r| (r, linear[r][col]))
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .expect("three rows");
            *slot = AxisDirection {
                axis: AnatomicalAxis::from_index(row),
                positive: value > 0.0,
            };
        }
        Orientation::new(axes)
    }

    /// Permutes and flips `voxels` into RAS+ order; returns the new array and
    /// the correspondingly permuted spacing.
    pub fn canonicalize(&self, voxels: &Array3<f32>, spacing: [f32; 3]) -> (Array3<f32>, [f32; 3]) {
        let mut order = [0usize; 3];
        for (array_axis, dir) in self.axes.iter().enumerate() {
            order[dir.axis.index()] = array_axis;
        }
        let mut view = voxels.view().permuted_axes(order);
        for (world, &array_axis) in order.iter().enumerate() {
            if !self.axes[array_axis].positive {
                view.invert_axis(Axis(world));
            }
        }
        let out = view.as_standard_layout().to_owned();
        (out, order.map(|a| spacing[a]))
    }

    /// 4×4 voxel→world affine for this orientation and spacing, origin at zero.
    pub fn affine(&self, spacing: [f32; 3]) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for (col, dir) in self.axes.iter().enumerate() {
            let sign = if dir.positive { 1.0 } else { -1.0 };
            m[dir.axis.index()][col] = sign * spacing[col] as f64;
        }
        m[3][3] = 1.0;
        m
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in self.axes {
            write!(f, "{}", a.letter())?;
        }
        Ok(())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    /// Three-letter code such as `RAS` or `LPI`, one letter per array axis.
    fn from_str(s: &str) -> Result<Self> {
        let letters: Vec<char> = s.trim().to_ascii_uppercase().chars().collect();
        if letters.len() != 3 {
            return Err(Error::CorruptAffine(format!(
                "orientation code '{s}' must have 3 letters"
            )));
        }
        let mut axes = [AxisDirection {
            axis: AnatomicalAxis::X,
            positive: true,
        }; 3];
        for (slot, c) in axes.iter_mut().zip(letters) {
            let (axis, positive) = match c {
                'R' => (AnatomicalAxis::X, true),
                'L' => (AnatomicalAxis::X, false),
                'A' => (AnatomicalAxis::Y, true),
                'P' => (AnatomicalAxis::Y, false),
                'S' => (AnatomicalAxis::Z, true),
                'I' => (AnatomicalAxis::Z, false),
                other => return Err(Error::CorruptAffine(format!("bad orientation letter '{other}'"))),
            };
            *slot = AxisDirection { axis, positive };
        }
        Orientation::new(axes)
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(shape, |(i, j, k)| (i * 100 + j * 10 + k) as f32)
    }

    #[test]
    fn code_round_trip() {
        for code in ["RAS", "LPI", "PSR", "IAL"] {
            assert_eq!(code.parse::<Orientation>().unwrap().to_string(), code);
        }
        assert!("RRS".parse::<Orientation>().is_err());
        assert!("RA".parse::<Orientation>().is_err());
    }

    #[test]
    fn affine_detects_permutation_and_flip() {
        let o: Orientation = "PSR".parse().unwrap();
        let aff = o.affine([1.0, 2.0, 3.0]);
        let lin = [0, 1, 2].map(|r| [0, 1, 2].map(|c| aff[r][c]));
        assert_eq!(Orientation::from_affine(lin).unwrap(), o);
    }

    #[test]
    fn singular_and_nan_affines_are_rejected() {
        let singular = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            Orientation::from_affine(singular),
            Err(Error::CorruptAffine(_))
        ));
        let nan = [[f64::NAN, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(Orientation::from_affine(nan), Err(Error::CorruptAffine(_))));
    }

    #[test]
    fn canonicalize_moves_voxels_to_world_position() {
        // array axis 0 points posterior, axis 1 superior, axis 2 left
        let o: Orientation = "PSL".parse().unwrap();
        let v = ramp((2, 3, 4));
        let (c, spacing) = o.canonicalize(&v, [1.0, 2.0, 3.0]);
        assert_eq!(c.dim(), (4, 2, 3));
        assert_eq!(spacing, [3.0, 1.0, 2.0]);
        // canonical (x, y, z) = (3 - a2, 1 - a0, a1)
        for ((x, y, z), &val) in c.indexed_iter() {
            assert_eq!(val, v[[1 - y, z, 3 - x]]);
        }
    }

    #[test]
    fn canonical_is_noop() {
        let v = ramp((3, 2, 2));
        let (c, s) = Orientation::canonical().canonicalize(&v, [1.0, 2.0, 3.0]);
        assert_eq!(c, v);
        assert_eq!(s, [1.0, 2.0, 3.0]);
    }
}
