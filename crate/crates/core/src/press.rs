//! Probe-pressure tissue deformation by local translation warping.
//!
//! Pixel coordinates are `[x, y]` = `[column, row]`, rows increasing with
//! depth. The displacement at `x` is
//!
//! ```text
//! u(x) = ((r² − |x−c|²) / (r² − |x−c|² + D))² · (m − c),   D = (100/f)·α(hu)·|m−c|²
//! ```
//!
//! and zero for `|x−c| ≥ r`. This is the local-translation-warp reading of
//! the press formula: the printed form multiplies the ratio by `x` as well,
//! which cannot be a displacement, so the ratio is squared and applied to the
//! push vector only.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::propagation::FanGeometry;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeContact {
    pub probe_radius_mm: f64,
    /// Where the probe centre-line crosses the top image row.
    pub contact_center_px: [f64; 2],
    /// Apex of the probe face; tissue at `contact_center_px` is pushed here.
    pub push_target_px: [f64; 2],
    pub r_max_px: f64,
    pub strength_f: f64,
    pub hu_weight_enabled: bool,
}

impl ProbeContact {
    pub fn push_vector(&self) -> [f64; 2] {
        [
            self.push_target_px[0] - self.contact_center_px[0],
            self.push_target_px[1] - self.contact_center_px[1],
        ]
    }

    pub fn push_depth_px(&self) -> f64 {
        let [dx, dy] = self.push_vector();
        dx.hypot(dy)
    }

    pub fn is_valid(&self) -> bool {
        self.strength_f > 0.0 && self.r_max_px > self.push_depth_px() && self.probe_radius_mm > 0.0
    }
}

/// Tissue stiffness weight; 1 at water, 0.1 for air, capped at 4 for bone.
pub fn stiffness(hu: f64) -> f64 {
    ((hu + 1000.0) / 1000.0).clamp(0.1, 4.0)
}

pub fn warp_displacement(x: [f64; 2], contact: &ProbeContact, hu: f64) -> [f64; 2] {
    let [mx, my] = contact.push_vector();
    let push2 = mx * mx + my * my;
    if push2 == 0.0 {
        return [0.0, 0.0];
    }
    let dx = x[0] - contact.contact_center_px[0];
    let dy = x[1] - contact.contact_center_px[1];
    let r2 = contact.r_max_px * contact.r_max_px;
    let slack = r2 - (dx * dx + dy * dy);
    if slack <= 0.0 {
        return [0.0, 0.0];
    }
    let alpha = if contact.hu_weight_enabled {
        stiffness(hu)
    } else {
        1.0
    };
    let d = 100.0 / contact.strength_f * alpha * push2;
    let ratio = (slack / (slack + d)).powi(2);
    [ratio * mx, ratio * my]
}

/// Backward-warp lookup: output pixel `(r, c)` reads the input at `src[(r, c)]`
/// (`[x, y]`, sub-pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct UvMap {
    pub src: Array2<[f64; 2]>,
}

impl UvMap {
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self {
            src: Array2::from_shape_fn((rows, cols), |(r, c)| [c as f64, r as f64]),
        }
    }

    /// UV map for a given contact; `hu` is only read when HU weighting is on.
    pub fn build(contact: &ProbeContact, hu: &Array2<f64>) -> Self {
        Self {
            src: Array2::from_shape_fn(hu.dim(), |(r, c)| {
                let x = [c as f64, r as f64];
                let u = warp_displacement(x, contact, hu[(r, c)]);
                [x[0] - u[0], x[1] - u[1]]
            }),
        }
    }

    pub fn apply(&self, field: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.src.dim(), field.dim(), "uv map / field shape mismatch");
        self.src.map(|&[x, y]| bilinear_clamped(field, x, y))
    }
}

/// Bilinear sample with edge replication. Integer coordinates return the
/// stored value exactly.
pub fn bilinear_clamped(field: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (rows, cols) = field.dim();
    let x = x.clamp(0.0, (cols - 1) as f64);
    let y = y.clamp(0.0, (rows - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    if fx == 0.0 && fy == 0.0 {
        return field[(y0, x0)];
    }
    let (x1, y1) = ((x0 + 1).min(cols - 1), (y0 + 1).min(rows - 1));
    let top = field[(y0, x0)] * (1.0 - fx) + field[(y0, x1)] * fx;
    let bottom = field[(y1, x0)] * (1.0 - fx) + field[(y1, x1)] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps `hu` so tissue conforms to the probe face. Returns the warped field
/// and its UV map; the map can be reused across slices when HU weighting is
/// disabled.
pub fn apply_press(hu: &Array2<f64>, contact: &ProbeContact) -> (Array2<f64>, UvMap) {
    let uv = UvMap::build(contact, hu);
    (uv.apply(hu), uv)
}

/// Pixels between the probe-face arc and the concentric arc pushed `|m−c|`
/// deeper, restricted to the fan's angular span. Both arcs are inclusive.
pub fn squeeze_band_mask(
    rows: usize,
    cols: usize,
    pixel_mm: f64,
    contact: &ProbeContact,
    half_angle: f64,
) -> Array2<bool> {
    let depth = contact.push_depth_px();
    if depth == 0.0 {
        return Array2::from_elem((rows, cols), false);
    }
    let radius = contact.probe_radius_mm / pixel_mm;
    let [ax, ay] = contact.push_vector();
    let (ax, ay) = (ax / depth, ay / depth);
    let pivot = [
        contact.push_target_px[0] - radius * ax,
        contact.push_target_px[1] - radius * ay,
    ];
    const EPS: f64 = 1e-9;
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let dx = c as f64 - pivot[0];
        let dy = r as f64 - pivot[1];
        let dist = dx.hypot(dy);
        if dist < radius - EPS || dist > radius + depth + EPS {
            return false;
        }
        let along = (dx * ax + dy * ay) / dist.max(EPS);
        along.clamp(-1.0, 1.0).acos() <= half_angle + EPS
    })
}

/// The squeeze band expressed on the fan grid: samples whose radial offset
/// from the probe face is within the push depth.
pub fn squeeze_band_fan(fan: &FanGeometry, push_depth_mm: f64) -> Array2<bool> {
    Array2::from_shape_fn(fan.dim(), |(k, _)| {
        push_depth_mm > 0.0 && k as f64 * fan.radial_step_mm <= push_depth_mm + 1e-9
    })
}

/// Config surface for the press model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PressParams {
    pub enabled: bool,
    pub strength_f: f64,
    /// Influence radius in slice pixels; `None` = four times the push depth.
    pub r_max_px: Option<f64>,
    pub hu_weight_enabled: bool,
    /// Push depth in mm; `None` = sagitta of the probe face across the fan.
    pub push_depth_mm: Option<f64>,
}

impl Default for PressParams {
    fn default() -> Self {
        Self {
            enabled: true,
            strength_f: 1000.0,
            r_max_px: None,
            hu_weight_enabled: false,
            push_depth_mm: None,
        }
    }
}

impl PressParams {
    pub fn push_depth_mm(&self, fan: &FanGeometry) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        self.push_depth_mm
            .unwrap_or_else(|| fan.probe_radius_mm * (1.0 - fan.half_angle().cos()))
    }
}
