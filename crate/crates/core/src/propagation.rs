//! Depth-marched acoustic propagation on the curvilinear fan grid.
//!
//! The grid is indexed `(k, s)`: `k` is the radial sample (depth row), `s` the
//! scanline. Energy enters at row 0 with unit intensity on every scanline and
//! is pushed row by row into the three forward neighbours of each pixel.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticSlice;
use crate::error::{Error, Result};

/// Curvilinear probe sampling lattice. Distances are measured from the probe's
/// centre of curvature (the pivot); sample 0 lies on the probe face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanGeometry {
    pub num_scanlines: usize,
    pub samples_per_line: usize,
    pub radial_step_mm: f64,
    pub fov_angle_deg: f64,
    pub probe_radius_mm: f64,
    pub frequency_mhz: f64,
}

impl Default for FanGeometry {
    fn default() -> Self {
        Self {
            num_scanlines: 128,
            samples_per_line: 320,
            radial_step_mm: 0.2,
            fov_angle_deg: 60.0,
            probe_radius_mm: 40.0,
            frequency_mhz: 5.0,
        }
    }
}

impl FanGeometry {
    pub fn validate(&self) -> Result<()> {
        let ok = self.num_scanlines > 0
            && self.samples_per_line > 0
            && self.radial_step_mm > 0.0
            && self.fov_angle_deg > 0.0
            && self.fov_angle_deg < 180.0
            && self.probe_radius_mm > 0.0
            && self.frequency_mhz > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid fan geometry: {self:?}")))
        }
    }

    /// `(rows, cols)` = `(samples_per_line, num_scanlines)`.
    pub fn dim(&self) -> (usize, usize) {
        (self.samples_per_line, self.num_scanlines)
    }

    pub fn half_angle(&self) -> f64 {
        0.5 * self.fov_angle_deg.to_radians()
    }

    /// Angular pitch between neighbouring scanlines (0 for a single line).
    pub fn angle_step(&self) -> f64 {
        if self.num_scanlines < 2 {
            0.0
        } else {
            self.fov_angle_deg.to_radians() / (self.num_scanlines - 1) as f64
        }
    }

    pub fn angle(&self, s: f64) -> f64 {
        if self.num_scanlines < 2 {
            0.0
        } else {
            -self.half_angle() + s * self.angle_step()
        }
    }

    pub fn radius(&self, k: f64) -> f64 {
        self.probe_radius_mm + k * self.radial_step_mm
    }

    pub fn max_radius(&self) -> f64 {
        self.radius((self.samples_per_line - 1) as f64)
    }

    /// Pivot-relative position `(lateral, axial)` in mm of fan sample `(k, s)`.
    pub fn to_local(&self, k: f64, s: f64) -> (f64, f64) {
        let rho = self.radius(k);
        let phi = self.angle(s);
        (rho * phi.sin(), rho * phi.cos())
    }

    /// Continuous fan coordinates `(k, s)` of a pivot-relative point, or `None`
    /// outside the wedge.
    pub fn from_local(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let rho = x.hypot(y);
        let k = (rho - self.probe_radius_mm) / self.radial_step_mm;
        let last_k = (self.samples_per_line - 1) as f64;
        if !(-1e-9..=last_k + 1e-9).contains(&k) {
            return None;
        }
        let phi = x.atan2(y);
        let s = if self.num_scanlines < 2 {
            if phi.abs() > 1e-9 {
                return None;
            }
            0.0
        } else {
            (phi + self.half_angle()) / self.angle_step()
        };
        let last_s = (self.num_scanlines.max(1) - 1) as f64;
        if !(-1e-9..=last_s + 1e-9).contains(&s) {
            return None;
        }
        Some((k.clamp(0.0, last_k), s.clamp(0.0, last_s)))
    }
}

/// Interface response at a single boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fresnel {
    /// Reflected energy fraction in `[0, 1]`.
    pub reflection: f64,
    /// Refraction angle; `None` under total internal reflection.
    pub theta_t: Option<f64>,
}

/// Energy reflection at an interface between impedances `z1` (incident side)
/// and `z2`, averaging the perpendicular and parallel components. The
/// transmitted angle follows `sin θi / sin θt = z2 / z1`.
pub fn fresnel_reflection(z1: f64, z2: f64, theta_i: f64) -> Result<Fresnel> {
    if !(z1 > 0.0 && z2 > 0.0) {
        return Err(Error::NonPositiveImpedance { z1, z2 });
    }
    if z1 == z2 {
        return Ok(Fresnel {
            reflection: 0.0,
            theta_t: Some(theta_i),
        });
    }
    let sin_t = theta_i.sin() * z1 / z2;
    if sin_t.abs() > 1.0 {
        return Ok(Fresnel {
            reflection: 1.0,
            theta_t: None,
        });
    }
    let theta_t = sin_t.asin();
    let (ci, ct) = (theta_i.cos(), theta_t.cos());
    let perp = ((z1 * ci - z2 * ct) / (z1 * ci + z2 * ct)).powi(2);
    let par = ((z2 * ci - z1 * ct) / (z2 * ci + z1 * ct)).powi(2);
    Ok(Fresnel {
        reflection: (0.5 * (perp + par)).clamp(0.0, 1.0),
        theta_t: Some(theta_t),
    })
}

/// Lambert–Beer decay with the tissue gain `alpha`:
/// `I = I0 · 10^(−alpha·a·d·f / 10)` (a in dB/cm/MHz, d in cm, f in MHz).
pub fn beer_absorption(i0: f64, a: f64, d_cm: f64, f_mhz: f64, alpha: f64) -> f64 {
    i0 * 10f64.powf(-alpha * a * d_cm * f_mhz / 10.0)
}

/// `|cos θ|` between two unit vectors.
pub fn lambert_factor(direction: [f64; 2], normal: [f64; 2]) -> f64 {
    (direction[0] * normal[0] + direction[1] * normal[1])
        .abs()
        .min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsParams {
    /// Fraction of energy routed into the echo on oblique (cos < threshold)
    /// connections, scaled by the local impedance contrast.
    pub scatter_gain: f64,
    /// Attenuation multiplier inside the probe squeeze band, in `(0, 1]`.
    pub squeeze_relief: f64,
    /// Tissue gain on the Beer attenuation exponent.
    pub beer_alpha: f64,
    /// Connection cosine below which energy counts as refraction/scatter.
    pub scatter_cos_threshold: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            scatter_gain: 0.1,
            squeeze_relief: 0.2,
            beer_alpha: 0.15,
            scatter_cos_threshold: 0.8,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.scatter_gain)
            || !(self.squeeze_relief > 0.0 && self.squeeze_relief <= 1.0)
            || !(self.beer_alpha >= 0.0)
            || !(-1.0..=1.0).contains(&self.scatter_cos_threshold)
        {
            return Err(Error::Config(format!("invalid physics parameters: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PropagationResult {
    /// Intensity arriving at each pixel, in `[0, 1]`.
    pub transmission: Array2<f64>,
    /// Energy returned towards the probe from each pixel.
    pub echo: Array2<f64>,
    /// Fraction absorbed over the radial step leaving each pixel.
    pub absorption: Array2<f64>,
}

/// Forward-neighbour stencil for row `k → k+1`: connection cosines and the
/// normalised weights `[left, centre, right]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub cos: [f64; 3],
    pub weight: [f64; 3],
}

pub(crate) fn forward_stencil(geom: &FanGeometry, k: usize) -> Stencil {
    let r0 = geom.radius(k as f64);
    let r1 = geom.radius(k as f64 + 1.0);
    let dphi = geom.angle_step();
    let side_cos = if geom.num_scanlines < 2 {
        -1.0
    } else {
        let dist = (r0 * r0 + r1 * r1 - 2.0 * r0 * r1 * dphi.cos()).sqrt();
        (r1 * dphi.cos() - r0) / dist
    };
    let cos = [side_cos, 1.0, side_cos];
    let raw = cos.map(|c| c.max(0.0));
    let total: f64 = raw.iter().sum();
    Stencil {
        cos,
        weight: raw.map(|w| w / total),
    }
}

/// Lambert factor and incidence angle at `(k, s)` from the central-difference
/// impedance gradient; both zero where the gradient vanishes.
fn interface_incidence(z: &Array2<f64>, geom: &FanGeometry, k: usize, s: usize) -> (f64, f64) {
    let (rows, cols) = z.dim();
    let g_axial = {
        let (lo, hi) = (k.saturating_sub(1), (k + 1).min(rows - 1));
        if hi > lo {
            (z[(hi, s)] - z[(lo, s)]) / ((hi - lo) as f64 * geom.radial_step_mm)
        } else {
            0.0
        }
    };
    let dphi = geom.angle_step();
    let g_lateral = {
        let (lo, hi) = (s.saturating_sub(1), (s + 1).min(cols - 1));
        if hi > lo && dphi > 0.0 {
            (z[(k, hi)] - z[(k, lo)]) / ((hi - lo) as f64 * geom.radius(k as f64) * dphi)
        } else {
            0.0
        }
    };
    let g_norm = g_axial.hypot(g_lateral);
    if g_norm > 0.0 {
        let lambert = lambert_factor([1.0, 0.0], [g_axial / g_norm, g_lateral / g_norm]);
        (lambert, lambert.acos())
    } else {
        (0.0, 0.0)
    }
}

/// Local reflection response `R · lambert` of every interface, without
/// attenuation or shadowing. The last depth row has no partner and stays 0.
pub fn reflectivity(z: &Array2<f64>, geom: &FanGeometry) -> Result<Array2<f64>> {
    let (rows, cols) = z.dim();
    let mut out = Array2::zeros((rows, cols));
    for k in 0..rows.saturating_sub(1) {
        for s in 0..cols {
            let (lambert, theta_i) = interface_incidence(z, geom, k, s);
            if lambert > 0.0 {
                out[(k, s)] = fresnel_reflection(z[(k, s)], z[(k + 1, s)], theta_i)?.reflection * lambert;
            }
        }
    }
    Ok(out)
}

/// Marches intensity through the fan. See the module docs for the grid layout.
pub fn propagate(
    slice: &AcousticSlice,
    geom: &FanGeometry,
    params: &PhysicsParams,
) -> Result<PropagationResult> {
    let (rows, cols) = geom.dim();
    for field_dim in [
        slice.hu.dim(),
        slice.impedance.dim(),
        slice.attenuation.dim(),
        slice.squeeze_mask.dim(),
    ] {
        if field_dim != (rows, cols) {
            return Err(Error::ShapeMismatch {
                expected: (rows, cols),
                actual: field_dim,
            });
        }
    }
    let z = &slice.impedance;
    if let Some(bad) = z.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::NonPositiveImpedance { z1: *bad, z2: *bad });
    }

    let mut incident = Array2::<f64>::zeros((rows, cols));
    let mut echo = Array2::<f64>::zeros((rows, cols));
    let mut absorption = Array2::<f64>::zeros((rows, cols));
    if rows == 0 || cols == 0 {
        return Ok(PropagationResult {
            transmission: incident,
            echo,
            absorption,
        });
    }
    incident.row_mut(0).fill(1.0);

    let step_cm = geom.radial_step_mm / 10.0;

    for k in 0..rows {
        let stencil = (k + 1 < rows).then(|| forward_stencil(geom, k));
        for s in 0..cols {
            let inc = incident[(k, s)];
            let z1 = z[(k, s)];

            let (lambert, theta_i) = interface_incidence(z, geom, k, s);

            let Some(stencil) = stencil else {
                continue;
            };
            let reflection = fresnel_reflection(z1, z[(k + 1, s)], theta_i)?.reflection;
            echo[(k, s)] += inc * reflection * lambert;

            let mut a = slice.attenuation[(k, s)];
            if slice.squeeze_mask[(k, s)] {
                a *= params.squeeze_relief;
            }
            let kept = beer_absorption(1.0, a, step_cm, geom.frequency_mhz, params.beer_alpha);
            absorption[(k, s)] = 1.0 - kept;
            let transmitted = inc * (1.0 - reflection) * kept;
            if transmitted == 0.0 {
                continue;
            }

            // Weight that would leave the fan is mirrored back into the
            // centre connection.
            let mut weights = stencil.weight;
            if s == 0 {
                weights[1] += weights[0];
                weights[0] = 0.0;
            }
            if s + 1 == cols {
                weights[1] += weights[2];
                weights[2] = 0.0;
            }
            for (slot, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let target = s + slot - 1;
                let mut share = transmitted * w;
                if stencil.cos[slot] < params.scatter_cos_threshold {
                    let contrast = fresnel_reflection(z1, z[(k + 1, target)], 0.0)?.reflection;
                    let scattered = share * params.scatter_gain * contrast;
                    echo[(k, s)] += scattered;
                    share -= scattered;
                }
                incident[(k + 1, target)] += share;
            }
        }
    }

    Ok(PropagationResult {
        transmission: incident,
        echo,
        absorption,
    })
}
