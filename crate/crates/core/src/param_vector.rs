use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{shape_err, Result};

pub const CAMERA_DIM: usize = 3;
pub const POSE_DIM: usize = 72;
pub const SHAPE_DIM: usize = 10;
pub const PARAM_DIM: usize = CAMERA_DIM + POSE_DIM + SHAPE_DIM;

const POSE_START: usize = CAMERA_DIM;
const SHAPE_START: usize = CAMERA_DIM + POSE_DIM;

/// Per-frame body parameters laid out as camera `(s, tx, ty)`, pose (24
/// axis-angle triples), shape.
#[derive(Clone, PartialEq)]
pub struct ParamVector([f64; PARAM_DIM]);

impl ParamVector {
    pub fn zeros() -> Self {
        Self([0.0; PARAM_DIM])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != PARAM_DIM {
            return shape_err(format!("parameter vector needs {PARAM_DIM} values, got {}", v.len()));
        }
        let mut a = [0.0; PARAM_DIM];
        a.copy_from_slice(v);
        Ok(Self(a))
    }

    pub fn from_parts(camera: &[f64], pose: &[f64], shape: &[f64]) -> Result<Self> {
        if camera.len() != CAMERA_DIM || pose.len() != POSE_DIM || shape.len() != SHAPE_DIM {
            return shape_err("parameter part lengths must be 3, 72 and 10");
        }
        let mut p = Self::zeros();
        p.camera_mut().copy_from_slice(camera);
        p.pose_mut().copy_from_slice(pose);
        p.shape_mut().copy_from_slice(shape);
        Ok(p)
    }

    /// Column `col` of an `85 x B` matrix.
    pub fn from_column(m: &DMatrix<f64>, col: usize) -> Self {
        debug_assert_eq!(m.nrows(), PARAM_DIM);
        let mut a = [0.0; PARAM_DIM];
        for (i, v) in a.iter_mut().enumerate() {
            *v = m[(i, col)];
        }
        Self(a)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn camera(&self) -> &[f64] {
        &self.0[..POSE_START]
    }

    pub fn camera_mut(&mut self) -> &mut [f64] {
        &mut self.0[..POSE_START]
    }

    pub fn pose(&self) -> &[f64] {
        &self.0[POSE_START..SHAPE_START]
    }

    pub fn pose_mut(&mut self) -> &mut [f64] {
        &mut self.0[POSE_START..SHAPE_START]
    }

    pub fn shape(&self) -> &[f64] {
        &self.0[SHAPE_START..]
    }

    pub fn shape_mut(&mut self) -> &mut [f64] {
        &mut self.0[SHAPE_START..]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn to_column(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(PARAM_DIM, 1, &self.0)
    }

    pub fn pose_range() -> std::ops::Range<usize> {
        POSE_START..SHAPE_START
    }

    pub fn shape_range() -> std::ops::Range<usize> {
        SHAPE_START..PARAM_DIM
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::zeros()
    }
}

impl std::fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamVector")
            .field("camera", &self.camera())
            .field("pose", &self.pose())
            .field("shape", &self.shape())
            .finish()
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Serialize for ParamVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        ParamVector::from_slice(&v).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        assert_eq!(PARAM_DIM, 85);
        let mut p = ParamVector::zeros();
        p.camera_mut()[0] = 1.0;
        p.pose_mut()[0] = 2.0;
        p.shape_mut()[9] = 3.0;
        assert_eq!(p[0], 1.0);
        assert_eq!(p[3], 2.0);
        assert_eq!(p[84], 3.0);
        assert!(ParamVector::from_slice(&[0.0; 84]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let mut p = ParamVector::zeros();
        p[7] = 0.1 + 0.2;
        let s = serde_json::to_string(&p).unwrap();
        let q: ParamVector = serde_json::from_str(&s).unwrap();
        assert_eq!(p[7].to_bits(), q[7].to_bits());
    }
}
