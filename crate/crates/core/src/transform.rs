//! Rigid transforms in world millimetres.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Vec3;

const ORTHO_TOL: f64 = 1e-9;

/// `p ↦ R p + t` with `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "rotation is not proper orthonormal (|RᵀR − I| = {err:e}, det = {})",
                rotation.determinant()
            )));
        }
        Ok(Self::from_parts_unchecked(rotation, translation))
    }

    /// Re-orthonormalises `rotation` to the nearest rotation.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let rotation = if err > ORTHO_TOL {
            Rotation3::from_matrix(&rotation).into_inner()
        } else {
            rotation
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle_rad: f64, translation: Vec3) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle_rad);
        Self {
            rotation: rot.into_inner(),
            translation,
        }
    }

    pub fn translation_only(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn rotation_angle_rad(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Row-major 4×4.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix4();
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        Self::from_matrix4(&Matrix4::from_fn(|r, c| rows[r][c]))
    }
}

impl From<&crate::kinematics::ProbePose> for RigidTransform {
    fn from(p: &crate::kinematics::ProbePose) -> Self {
        Self {
            rotation: p.rotation.to_rotation_matrix().into_inner(),
            translation: p.position_mm,
        }
    }
}

/// JSON form `{"R": [9 values, row-major], "t": [3]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    #[serde(rename = "t")]
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for TransformRecord {
    fn from(t: &RigidTransform) -> Self {
        Self {
            rotation: std::array::from_fn(|i| t.rotation[(i / 3, i % 3)]),
            translation: t.translation.into(),
        }
    }
}

impl TryFrom<&TransformRecord> for RigidTransform {
    type Error = Error;

    fn try_from(r: &TransformRecord) -> Result<Self> {
        RigidTransform::new(
            Matrix3::from_row_slice(&r.rotation),
            Vec3::from(r.translation),
        )
    }
}
