//! Declarative simulation config. Paths are relative to the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::AcousticLut;
use crate::error::{Error, Result};
use crate::kinematics::{
    clip_region, move_free, move_on_curve, pose_at_state, slice_curves, Aabb, PoseRecord, ProbePose,
    SurfaceMesh,
};
use crate::press::PressParams;
use crate::propagation::{FanGeometry, PhysicsParams};
use crate::synthesis::{Imager, SynthesisParams};
use crate::volume::{CtVolume, Vec3};

pub const CONFIG_VERSION: u32 = 1;

/// Skin threshold used when the mesh is extracted from the volume.
pub const DEFAULT_SKIN_HU: f64 = -300.0;

/// Fan geometry plus probe roll.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub num_scanlines: usize,
    pub samples_per_line: usize,
    pub radial_step_mm: f64,
    pub fov_angle_deg: f64,
    pub probe_radius_mm: f64,
    pub frequency_mhz: f64,
    /// Rotation about the probe axis applied to every pose.
    pub roll_deg: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let f = FanGeometry::default();
        Self {
            num_scanlines: f.num_scanlines,
            samples_per_line: f.samples_per_line,
            radial_step_mm: f.radial_step_mm,
            fov_angle_deg: f.fov_angle_deg,
            probe_radius_mm: f.probe_radius_mm,
            frequency_mhz: f.frequency_mhz,
            roll_deg: 0.0,
        }
    }
}

impl ProbeConfig {
    pub fn fan(&self) -> FanGeometry {
        FanGeometry {
            num_scanlines: self.num_scanlines,
            samples_per_line: self.samples_per_line,
            radial_step_mm: self.radial_step_mm,
            fov_angle_deg: self.fov_angle_deg,
            probe_radius_mm: self.probe_radius_mm,
            frequency_mhz: self.frequency_mhz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub min_mm: [f64; 3],
    pub max_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScanPath {
    /// Explicit probe poses.
    Poses { poses: Vec<PoseRecord> },
    /// Straight walk on the skin: frame 0 at `start_mm`, then `count - 1`
    /// steps of `step_mm` in the tangent frame.
    Free {
        #[serde(default)]
        mesh: Option<String>,
        start_mm: [f64; 3],
        #[serde(default = "default_heading")]
        heading: [f64; 2],
        step_mm: [f64; 2],
        count: usize,
        #[serde(default)]
        region: Option<RegionConfig>,
    },
    /// Planar cross-sections of the skin, `spacing_mm` apart along
    /// `forward`; `per_curve` poses evenly spaced on the longest component
    /// of each section.
    Curves {
        #[serde(default)]
        mesh: Option<String>,
        forward: [f64; 3],
        spacing_mm: f64,
        #[serde(default = "one")]
        per_curve: usize,
        /// Spacing of the poses along each curve; `None` spreads them
        /// evenly over the whole curve.
        #[serde(default)]
        arc_step_mm: Option<f64>,
        #[serde(default)]
        max_frames: Option<usize>,
        #[serde(default)]
        region: Option<RegionConfig>,
    },
}

fn default_heading() -> [f64; 2] {
    [1.0, 0.0]
}

fn one() -> usize {
    1
}

fn default_output() -> String {
    "out".into()
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub config_version: u32,
    /// `.ctvol.json` sidecar.
    pub volume: String,
    pub scan_path: ScanPath,
    #[serde(default = "default_output")]
    pub output_dir: String,
    #[serde(default)]
    pub global_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub physics: PhysicsParams,
    #[serde(default)]
    pub press: PressParams,
    #[serde(default)]
    pub synthesis: SynthesisParams,
    #[serde(default)]
    pub acoustic_lut: AcousticLut,
}

/// A parsed config with its location on disk.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: SimConfig,
    pub base_dir: PathBuf,
}

impl SimConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// SHA-256 of the canonical JSON form, without the output location and
    /// worker count.
    pub fn hash(&self) -> String {
        let canonical = Self {
            output_dir: String::new(),
            workers: 1,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn imager(&self) -> Result<Imager> {
        Imager::new(
            self.probe.fan(),
            &self.press,
            self.physics,
            self.synthesis,
            self.acoustic_lut.clone(),
        )
    }

    /// Checks that don't touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config_version {} (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if !self.probe.roll_deg.is_finite() {
            return Err(Error::Config("roll_deg must be finite".into()));
        }
        match &self.scan_path {
            ScanPath::Poses { poses } => {
                if poses.is_empty() {
                    return Err(Error::Config("scan_path.poses is empty".into()));
                }
                for p in poses {
                    ProbePose::try_from(p)?;
                }
            }
            ScanPath::Free {
                heading,
                step_mm,
                count,
                ..
            } => {
                if *count == 0 {
                    return Err(Error::Config("scan_path.count must be positive".into()));
                }
                if !(heading[0].hypot(heading[1]) > 0.0) || !step_mm.iter().all(|s| s.is_finite()) {
                    return Err(Error::Config("scan_path heading/step invalid".into()));
                }
            }
            ScanPath::Curves {
                forward,
                spacing_mm,
                per_curve,
                arc_step_mm,
                max_frames,
                ..
            } => {
                if !(Vec3::from(*forward).norm() > 0.0) || !(*spacing_mm > 0.0) || *per_curve == 0 {
                    return Err(Error::Config(
                        "scan_path needs a non-zero forward, positive spacing and per_curve".into(),
                    ));
                }
                if arc_step_mm.is_some_and(|s| !(s > 0.0)) || *max_frames == Some(0) {
                    return Err(Error::Config("scan_path arc_step_mm/max_frames must be positive".into()));
                }
            }
        }
        self.imager().map(|_| ())
    }

    fn mesh_path(&self) -> Option<&str> {
        match &self.scan_path {
            ScanPath::Free { mesh, .. } | ScanPath::Curves { mesh, .. } => mesh.as_deref(),
            ScanPath::Poses { .. } => None,
        }
    }
}

impl LoadedConfig {
    /// Reads, parses and validates, including existence of referenced files.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config = SimConfig::parse(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { config, base_dir };
        loaded.config.validate()?;
        let volume = loaded.volume_path();
        if !volume.is_file() {
            return Err(Error::Config(format!("volume not found: {}", volume.display())));
        }
        if let Some(mesh) = loaded.mesh_path() {
            if !mesh.is_file() {
                return Err(Error::Config(format!("mesh not found: {}", mesh.display())));
            }
        }
        Ok(loaded)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn volume_path(&self) -> PathBuf {
        self.resolve(&self.config.volume)
    }

    pub fn mesh_path(&self) -> Option<PathBuf> {
        self.config.mesh_path().map(|m| self.resolve(m))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    /// Loads the volume; format problems are reported as config errors.
    pub fn load_volume(&self) -> Result<CtVolume> {
        CtVolume::load(self.volume_path()).map_err(|e| match e {
            Error::Io { .. } | Error::Image { .. } => e,
            other => Error::Config(format!("volume: {other}")),
        })
    }

    pub fn load_mesh(&self, vol: &CtVolume) -> Result<SurfaceMesh> {
        match self.mesh_path() {
            Some(p) => SurfaceMesh::load_obj(p),
            None => SurfaceMesh::skin_from_volume(vol, DEFAULT_SKIN_HU, 2),
        }
    }

    /// Expands the scan path into probe poses.
    pub fn poses(&self, vol: &CtVolume) -> Result<Vec<ProbePose>> {
        let roll = self.config.probe.roll_deg.to_radians();
        let clip = |mesh: SurfaceMesh, region: &Option<RegionConfig>| match region {
            Some(r) => clip_region(
                &mesh,
                &Aabb {
                    min: Vec3::from(r.min_mm),
                    max: Vec3::from(r.max_mm),
                },
            ),
            None => Ok(mesh),
        };
        let poses = match &self.config.scan_path {
            ScanPath::Poses { poses } => poses.iter().map(ProbePose::try_from).collect::<Result<Vec<_>>>()?,
            ScanPath::Free {
                start_mm,
                heading,
                step_mm,
                count,
                region,
                ..
            } => {
                let mesh = clip(self.load_mesh(vol)?, region)?;
                let mut state = mesh.locate(&Vec3::from(*start_mm), *heading)?;
                let mut out = vec![pose_at_state(&mesh, &state)];
                while out.len() < *count {
                    let (next, pose) = move_free(&mesh, &state, step_mm[0], step_mm[1])?;
                    state = next;
                    out.push(pose);
                }
                out
            }
            ScanPath::Curves {
                forward,
                spacing_mm,
                per_curve,
                arc_step_mm,
                max_frames,
                region,
                ..
            } => {
                let mesh = clip(self.load_mesh(vol)?, region)?;
                let curves = slice_curves(&mesh, &Vec3::from(*forward), *spacing_mm)?;
                let mut out = Vec::new();
                let mut last_plane = None;
                for c in &curves {
                    // components come longest first within a plane
                    if last_plane == Some(c.plane_index) {
                        continue;
                    }
                    last_plane = Some(c.plane_index);
                    let len = c.length();
                    let n = *per_curve;
                    for j in 0..n {
                        let t = match arc_step_mm {
                            Some(step) => 0.5 * len + (j as f64 - 0.5 * (n - 1) as f64) * step,
                            None => (j as f64 + 0.5) * len / n as f64,
                        };
                        out.push(move_on_curve(c, t, 0.0).1);
                    }
                }
                if let Some(m) = max_frames {
                    out.truncate(*m);
                }
                if out.is_empty() {
                    return Err(Error::EmptyRegion);
                }
                out
            }
        };
        Ok(poses.into_iter().map(|p| p.with_roll(roll)).collect())
    }
}
