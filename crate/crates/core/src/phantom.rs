//! Synthetic lumbar-spine phantom: CT volume, skin mesh, CT bone surface with
//! per-vertebra labels and a pedicle screw plan.
//!
//! World frame: `x` lateral, `y` cranio-caudal, `z` depth below the skin
//! (posterior → anterior). The probe looks along `+z`.

use crate::error::Result;
use crate::registration::{ct_surface_points, PointCloud, ScrewPlan};
use crate::volume::{CtVolume, Vec3};

pub const FAT_HU: f64 = -100.0;
pub const MUSCLE_HU: f64 = 50.0;
pub const BONE_HU: f64 = 800.0;
pub const AIR_HU: f64 = -1000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub vertebrae: usize,
    /// Cranio-caudal distance between vertebra centres.
    pub pitch_mm: f64,
    pub voxel_mm: f64,
    pub fat_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            vertebrae: 3,
            pitch_mm: 34.0,
            voxel_mm: 1.0,
            fat_mm: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    c: Vec3,
    r: Vec3,
}

impl Ellipsoid {
    fn inside(&self, p: &Vec3) -> bool {
        let d = (p - self.c).component_div(&self.r);
        d.norm_squared() <= 1.0
    }
}

impl PhantomSpec {
    pub fn centre_y(&self, i: usize) -> f64 {
        (i as f64 - 0.5 * (self.vertebrae - 1) as f64) * self.pitch_mm
    }

    fn half_length(&self) -> f64 {
        0.5 * self.vertebrae as f64 * self.pitch_mm + 8.0
    }

    /// Skin depth: a gently curved back.
    pub fn skin_z(&self, x: f64, y: f64) -> f64 {
        0.002 * x * x + 0.0008 * y * y
    }

    /// Parts of vertebra `i`. Slight per-level lateral shift and rotation
    /// break left/right and cranial/caudal symmetry.
    fn parts(&self, i: usize) -> Vec<Ellipsoid> {
        let y = self.centre_y(i);
        let shift = 1.5 * i as f64 - 0.02 * y;
        let e = |x: f64, dy: f64, z: f64, rx: f64, ry: f64, rz: f64| Ellipsoid {
            c: Vec3::new(x + shift, y + dy, z),
            r: Vec3::new(rx, ry, rz),
        };
        vec![
            // spinous process, sloping caudally
            e(0.0, 4.0, 22.0, 3.5, 11.0, 10.0),
            e(0.0, 9.0, 15.0, 3.0, 6.0, 4.0),
            // laminae
            e(-11.0, 0.0, 29.0, 9.0, 10.0, 4.0),
            e(11.5, 1.0, 29.5, 9.5, 10.0, 4.0),
            // articular processes
            e(-17.0, -7.0, 27.0, 4.0, 5.0, 5.0),
            e(18.0, -6.0, 27.5, 4.5, 5.0, 5.0),
            // transverse processes (the right one longer)
            e(-27.0, -2.0, 36.0, 11.0, 5.0, 3.5),
            e(30.0, -2.0, 36.0, 14.0, 5.0, 3.5),
            // pedicles
            e(-13.0, 0.0, 41.0, 4.5, 6.0, 10.0),
            e(13.0, 0.0, 41.0, 4.5, 6.0, 10.0),
            // body
            e(0.0, 0.0, 64.0, 21.0, 13.0, 15.0),
        ]
    }

    /// Index of the vertebra whose centre is closest in `y`.
    pub fn segment_of(&self, p: &Vec3) -> u32 {
        (0..self.vertebrae)
            .min_by(|&a, &b| {
                (p.y - self.centre_y(a)).abs().total_cmp(&(p.y - self.centre_y(b)).abs())
            })
            .unwrap_or(0) as u32
            + 1
    }

    pub fn hu(&self, p: &Vec3) -> f64 {
        let skin = self.skin_z(p.x, p.y);
        if p.z < skin {
            return AIR_HU;
        }
        let i = (self.segment_of(p) - 1) as usize;
        let near = [i.saturating_sub(1), i, (i + 1).min(self.vertebrae - 1)];
        if near.iter().any(|&j| self.parts(j).iter().any(|e| e.inside(p))) {
            return BONE_HU;
        }
        if p.z < skin + self.fat_mm {
            FAT_HU
        } else {
            MUSCLE_HU
        }
    }

    pub fn volume(&self) -> Result<CtVolume> {
        let h = self.half_length();
        let v = self.voxel_mm;
        let (x0, y0, z0) = (-62.0, -h, -8.0);
        let n = |len: f64| (len / v).round() as usize + 1;
        CtVolume::from_fn([n(124.0), n(2.0 * h), n(96.0)], [v; 3], Vec3::new(x0, y0, z0), |p| self.hu(&p))
    }

    /// Left pedicle screw of the middle vertebra, from the lamina-pedicle
    /// junction into the body.
    pub fn screw_plan(&self) -> ScrewPlan {
        let i = self.vertebrae / 2;
        let y = self.centre_y(i);
        let shift = 1.5 * i as f64 - 0.02 * y;
        ScrewPlan::from_entry_tip(
            Vec3::new(-15.0 + shift, y, 31.0),
            Vec3::new(-4.0 + shift, y, 68.0),
            5.5,
        )
        .expect("entry and tip differ")
    }

    /// Dorsal bone surface seen along `+z`, labelled by vertebra.
    pub fn ct_cloud(&self, vol: &CtVolume, spacing_mm: f64) -> Result<PointCloud> {
        let pts = ct_surface_points(vol, &Vec3::z(), 250.0, spacing_mm)?;
        Ok(PointCloud {
            segments: Some(pts.iter().map(|p| self.segment_of(p)).collect()),
            ..PointCloud::from_points(&pts)
        })
    }

    /// `n` points on the analytic dorsal bone surface (first bone hit along
    /// `+z`), sampled uniformly over the spine's footprint.
    pub fn surface_samples(&self, n: usize, seed: u64) -> Vec<Vec3> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let h = self.half_length() - 8.0;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let x: f64 = rng.random_range(-45.0..45.0);
            let y: f64 = rng.random_range(-h..h);
            let mut lo = self.skin_z(x, y);
            let bottom = 85.0;
            let step = 0.5;
            let mut z = lo;
            let mut hit = None;
            while z < bottom {
                if self.hu(&Vec3::new(x, y, z)) >= BONE_HU {
                    hit = Some(z);
                    break;
                }
                lo = z;
                z += step;
            }
            let Some(mut hi) = hit else { continue };
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                if self.hu(&Vec3::new(x, y, mid)) >= BONE_HU {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            out.push(Vec3::new(x, y, hi));
        }
        out
    }
}
