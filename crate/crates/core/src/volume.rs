//! CT volumes: sidecar + raw int16 container, trilinear world-space sampling
//! and oblique slice extraction.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// HU assigned to anything outside the scanned volume.
pub const AIR_HU: f64 = -1024.0;
pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 4096;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// On-disk description of a volume; `raw` is relative to the sidecar.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub direction: [f64; 9],
    pub raw: String,
}

/// A CT scan in Hounsfield units. Voxel `(i, j, k)` sits at world position
/// `origin + D · diag(spacing) · (i, j, k)`; columns of `D` are the index axes.
#[derive(Debug, Clone)]
pub struct CtVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Vec3,
    direction: Matrix3<f64>,
    voxels: Vec<i16>,
    clamped: usize,
}

impl CtVolume {
    /// Validates geometry and clamps voxels into `[HU_MIN, HU_MAX]`.
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: Vec3,
        direction: Matrix3<f64>,
        mut voxels: Vec<i16>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidDims(dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::NonPositiveSpacing(spacing));
        }
        let dev = (direction.transpose() * direction - Matrix3::identity()).amax();
        if !(dev <= ORTHONORMAL_TOL) {
            return Err(Error::NonOrthonormalDirection(dev));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if voxels.len() != expected {
            return Err(Error::SizeMismatch {
                expected: expected * 2,
                actual: voxels.len() * 2,
            });
        }
        let mut clamped = 0;
        for v in voxels.iter_mut() {
            if *v < HU_MIN || *v > HU_MAX {
                *v = (*v).clamp(HU_MIN, HU_MAX);
                clamped += 1;
            }
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            direction,
            voxels,
            clamped,
        })
    }

    /// Axis-aligned volume filled by evaluating `f` at every voxel center.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: Vec3,
        mut f: impl FnMut(Vec3) -> f64,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = origin
                        + Vec3::new(
                            i as f64 * spacing[0],
                            j as f64 * spacing[1],
                            k as f64 * spacing[2],
                        );
                    let hu = f(p).round().clamp(i16::MIN as f64, i16::MAX as f64);
                    voxels.push(hu as i16);
                }
            }
        }
        Self::new(dims, spacing, origin, Matrix3::identity(), voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn direction(&self) -> &Matrix3<f64> {
        &self.direction
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    /// Number of voxels that were outside `[HU_MIN, HU_MAX]` at construction.
    pub fn clamped_voxels(&self) -> usize {
        self.clamped
    }

    #[inline]
    pub fn voxel(&self, i: usize, j: usize, k: usize) -> i16 {
        self.voxels[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    pub fn index_to_world(&self, idx: Vec3) -> Vec3 {
        let scaled = Vec3::new(
            idx.x * self.spacing[0],
            idx.y * self.spacing[1],
            idx.z * self.spacing[2],
        );
        self.origin + self.direction * scaled
    }

    pub fn world_to_index(&self, p: &Vec3) -> Vec3 {
        let local = self.direction.transpose() * (p - self.origin);
        Vec3::new(
            local.x / self.spacing[0],
            local.y / self.spacing[1],
            local.z / self.spacing[2],
        )
    }

    /// World-space bounding box of the voxel centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for corner in 0..8 {
            let idx = Vec3::new(
                if corner & 1 == 0 { 0.0 } else { (self.dims[0] - 1) as f64 },
                if corner & 2 == 0 { 0.0 } else { (self.dims[1] - 1) as f64 },
                if corner & 4 == 0 { 0.0 } else { (self.dims[2] - 1) as f64 },
            );
            let p = self.index_to_world(idx);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        (lo, hi)
    }

    /// Trilinear HU at a world point; air outside the voxel-center lattice.
    pub fn hu_at(&self, p: &Vec3) -> f64 {
        let idx = self.world_to_index(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let x = idx[a];
            let n = self.dims[a];
            if !(x >= -1e-9 && x <= (n - 1) as f64 + 1e-9) {
                return AIR_HU;
            }
            let x = x.clamp(0.0, (n - 1) as f64);
            let i0 = (x.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = x - i0 as f64;
        }
        let [i, j, k] = base;
        let [fx, fy, fz] = frac;
        let v = |di: usize, dj: usize, dk: usize| self.voxel(i + di, j + dj, k + dk) as f64;
        let c00 = v(0, 0, 0) * (1.0 - fx) + v(1, 0, 0) * fx;
        let c10 = v(0, 1, 0) * (1.0 - fx) + v(1, 1, 0) * fx;
        let c01 = v(0, 0, 1) * (1.0 - fx) + v(1, 0, 1) * fx;
        let c11 = v(0, 1, 1) * (1.0 - fx) + v(1, 1, 1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingSidecar(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sidecar: VolumeSidecar =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let raw_path = resolve_relative(path, &sidecar.raw);
        let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let expected = 2 * sidecar.dims.iter().product::<usize>();
        if bytes.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: bytes.len(),
            });
        }
        let voxels = bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        let direction = Matrix3::from_row_slice(&sidecar.direction);
        Self::new(
            sidecar.dims,
            sidecar.spacing_mm,
            Vec3::from(sidecar.origin_mm),
            direction,
            voxels,
        )
    }

    /// Writes `<path>` (sidecar) and a sibling `.raw` file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let stem = path
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| n.trim_end_matches(".json").trim_end_matches(".ctvol"))
            .unwrap_or("volume");
        let raw_name = format!("{stem}.raw");
        let raw_path = resolve_relative(path, &raw_name);
        let mut bytes = Vec::with_capacity(self.voxels.len() * 2);
        for v in &self.voxels {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
        let d = &self.direction;
        let sidecar = VolumeSidecar {
            dims: self.dims,
            spacing_mm: self.spacing,
            origin_mm: self.origin.into(),
            direction: [
                d[(0, 0)],
                d[(0, 1)],
                d[(0, 2)],
                d[(1, 0)],
                d[(1, 1)],
                d[(1, 2)],
                d[(2, 0)],
                d[(2, 1)],
                d[(2, 2)],
            ],
            raw: raw_name,
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn resolve_relative(anchor_file: &Path, rel: &str) -> PathBuf {
    let rel = Path::new(rel);
    if rel.is_absolute() {
        return rel.to_path_buf();
    }
    anchor_file
        .parent()
        .map(|p| p.join(rel))
        .unwrap_or_else(|| rel.to_path_buf())
}

/// A rectangular pixel lattice embedded in world space.
/// Pixel `(r, c)` lies at `origin + c·du·u + r·dv·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGeometry {
    pub rows: usize,
    pub cols: usize,
    /// `[du, dv]`: spacing along `u` (columns) and `v` (rows).
    pub pixel_spacing_mm: [f64; 2],
    pub plane_origin_mm: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub normal: Vec3,
}

impl SliceGeometry {
    pub fn new(
        rows: usize,
        cols: usize,
        pixel_spacing_mm: [f64; 2],
        plane_origin_mm: Vec3,
        u: Vec3,
        v: Vec3,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("slice must have at least one pixel".into()));
        }
        if pixel_spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "slice pixel spacing must be positive: {pixel_spacing_mm:?}"
            )));
        }
        if (u.norm() - 1.0).abs() > 1e-9 || (v.norm() - 1.0).abs() > 1e-9 || u.dot(&v).abs() > 1e-9
        {
            return Err(Error::Config("slice axes must be orthonormal".into()));
        }
        Ok(Self {
            rows,
            cols,
            pixel_spacing_mm,
            plane_origin_mm,
            u,
            v,
            normal: u.cross(&v),
        })
    }

    #[inline]
    pub fn pixel_to_world(&self, r: f64, c: f64) -> Vec3 {
        self.plane_origin_mm
            + self.u * (c * self.pixel_spacing_mm[0])
            + self.v * (r * self.pixel_spacing_mm[1])
    }

    /// Same lattice shifted along the plane normal.
    pub fn offset(&self, distance_mm: f64) -> Self {
        Self {
            plane_origin_mm: self.plane_origin_mm + self.normal * distance_mm,
            ..self.clone()
        }
    }
}

/// Samples the volume on every pixel of `geom`.
pub fn sample_slice(vol: &CtVolume, geom: &SliceGeometry) -> Array2<f64> {
    Array2::from_shape_fn((geom.rows, geom.cols), |(r, c)| {
        vol.hu_at(&geom.pixel_to_world(r as f64, c as f64))
    })
}
