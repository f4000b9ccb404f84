//! HU → acoustic impedance / attenuation lookup.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-linear HU lookup tables. Impedance is in 10⁶ kg m⁻² s⁻¹ (MRayl),
/// attenuation in dB cm⁻¹ MHz⁻¹. Outside the anchor range the end values hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticLut {
    /// `[hu, Z]` pairs, strictly increasing in HU.
    pub impedance: Vec<[f64; 2]>,
    /// `[hu, a]` pairs, strictly increasing in HU.
    pub attenuation: Vec<[f64; 2]>,
}

/// Tissue anchors used by [`AcousticLut::default`].
pub mod anchors {
    pub const AIR_HU: f64 = -1000.0;
    pub const FAT_HU: f64 = -100.0;
    pub const WATER_HU: f64 = 0.0;
    pub const SKIN_HU: f64 = 40.0;
    pub const MUSCLE_HU: f64 = 60.0;
    pub const BONE_HU: f64 = 700.0;

    pub const FAT_Z: f64 = 1.352;
    pub const FAT_ATTEN: f64 = 0.975;
    pub const SKIN_Z: f64 = 1.794;
    pub const SKIN_ATTEN: f64 = 0.22;
    pub const MUSCLE_Z: f64 = 1.647;
    pub const MUSCLE_ATTEN: f64 = 1.47;
    pub const WATER_Z: f64 = 1.48;
    pub const WATER_ATTEN: f64 = 0.002;
    pub const AIR_Z: f64 = 0.0004;
    pub const AIR_ATTEN: f64 = 40.0;
    pub const BONE_Z: f64 = 7.8;
    pub const BONE_ATTEN: f64 = 6.9;
}

impl Default for AcousticLut {
    fn default() -> Self {
        use anchors::*;
        Self {
            impedance: vec![
                [AIR_HU, AIR_Z],
                [FAT_HU, FAT_Z],
                [WATER_HU, WATER_Z],
                [SKIN_HU, SKIN_Z],
                [MUSCLE_HU, MUSCLE_Z],
                [BONE_HU, BONE_Z],
            ],
            attenuation: vec![
                [AIR_HU, AIR_ATTEN],
                [FAT_HU, FAT_ATTEN],
                [WATER_HU, WATER_ATTEN],
                [SKIN_HU, SKIN_ATTEN],
                [MUSCLE_HU, MUSCLE_ATTEN],
                [BONE_HU, BONE_ATTEN],
            ],
        }
    }
}

impl AcousticLut {
    pub fn validate(&self) -> Result<()> {
        check_anchors("impedance", &self.impedance, |z| z > 0.0)?;
        check_anchors("attenuation", &self.attenuation, |a| a >= 0.0)
    }

    pub fn impedance(&self, hu: f64) -> f64 {
        interpolate(&self.impedance, hu)
    }

    pub fn attenuation(&self, hu: f64) -> f64 {
        interpolate(&self.attenuation, hu)
    }
}

fn check_anchors(name: &str, anchors: &[[f64; 2]], valid: impl Fn(f64) -> bool) -> Result<()> {
    if anchors.is_empty() {
        return Err(Error::InvalidLut(format!("{name} table is empty")));
    }
    for w in anchors.windows(2) {
        if !(w[1][0] > w[0][0]) {
            return Err(Error::InvalidLut(format!(
                "{name} anchors must be strictly increasing in HU ({} then {})",
                w[0][0], w[1][0]
            )));
        }
    }
    if let Some(bad) = anchors.iter().find(|a| !a[0].is_finite() || !valid(a[1])) {
        return Err(Error::InvalidLut(format!("{name} anchor {bad:?} out of range")));
    }
    Ok(())
}

fn interpolate(anchors: &[[f64; 2]], hu: f64) -> f64 {
    let first = anchors[0];
    let last = anchors[anchors.len() - 1];
    if hu <= first[0] {
        return first[1];
    }
    if hu >= last[0] {
        return last[1];
    }
    // first anchor with hu_i > hu; guaranteed in 1..len
    let hi = anchors.partition_point(|a| a[0] <= hu);
    let [h0, v0] = anchors[hi - 1];
    let [h1, v1] = anchors[hi];
    let t = (hu - h0) / (h1 - h0);
    v0 + t * (v1 - v0)
}

pub fn hu_to_impedance(lut: &AcousticLut, hu: f64) -> f64 {
    lut.impedance(hu)
}

pub fn hu_to_attenuation(lut: &AcousticLut, hu: f64) -> f64 {
    lut.attenuation(hu)
}

/// Co-registered acoustic fields on the fan grid (rows = depth samples,
/// cols = scanlines).
#[derive(Debug, Clone)]
pub struct AcousticSlice {
    pub hu: Array2<f64>,
    pub impedance: Array2<f64>,
    pub attenuation: Array2<f64>,
    pub squeeze_mask: Array2<bool>,
}

impl AcousticSlice {
    pub fn dim(&self) -> (usize, usize) {
        self.hu.dim()
    }
}

pub fn build_acoustic_slice(
    hu: Array2<f64>,
    lut: &AcousticLut,
    squeeze_mask: Array2<bool>,
) -> Result<AcousticSlice> {
    if hu.dim() != squeeze_mask.dim() {
        return Err(Error::ShapeMismatch {
            expected: hu.dim(),
            actual: squeeze_mask.dim(),
        });
    }
    let impedance = hu.mapv(|h| lut.impedance(h));
    let attenuation = hu.mapv(|h| lut.attenuation(h));
    Ok(AcousticSlice {
        hu,
        impedance,
        attenuation,
        squeeze_mask,
    })
}
