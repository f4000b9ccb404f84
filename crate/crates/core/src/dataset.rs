//! Dataset generation and the file-level registration/evaluation workflows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{LoadedConfig, SimConfig};
use crate::error::{Error, Result};
use crate::kinematics::{PoseRecord, ProbePose};
use crate::metrics::{report, seg_metrics, Report, SegMetrics, Summary};
use crate::phantom::PhantomSpec;
use crate::propagation::FanGeometry;
use crate::registration::{
    frames_to_pointcloud, register_segments, screw_error, IcpParams, IcpResult, PointCloud, ScrewError, ScrewPlan,
};
use crate::synthesis::{encode_gray_png, frame_seed, mask_to_gray, read_mask_png, write_gray_png};
use crate::transform::{RigidTransform, TransformRecord};

pub const MANIFEST: &str = "manifest.json";
pub const THREADS_ENV: &str = "CTUS_THREADS";

/// Per-frame sidecar `frame_%06d.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub index: usize,
    pub pose: PoseRecord,
    pub seed: u64,
    pub geom: FanGeometry,
    pub config_hash: String,
}

/// Image → probe calibration plus the pixel spacing it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    /// Row-major 4×4.
    pub matrix: [[f64; 4]; 4],
    /// `[sx, sy]`: column and row spacing.
    pub pixel_spacing_mm: [f64; 2],
    /// `[rows, cols]`.
    pub image_size: [usize; 2],
}

impl CalibrationRecord {
    pub fn transform(&self) -> Result<RigidTransform> {
        RigidTransform::from_rows(&self.matrix)
    }

    /// Reads a calibration record or the `calibration` entry of a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Either {
            Manifest { calibration: CalibrationRecord },
            Record(CalibrationRecord),
        }
        Ok(match read_json::<Either>(path)? {
            Either::Manifest { calibration } | Either::Record(calibration) => calibration,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub image: String,
    pub label: String,
    pub meta: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_version: u32,
    pub config_hash: String,
    pub global_seed: u64,
    pub frame_count: usize,
    pub calibration: CalibrationRecord,
    pub frames: Vec<FrameEntry>,
    /// Every file of the dataset except the manifest, sorted by path.
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST))
    }

    /// Re-hashes every listed file and checks nothing else is present.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let p = dir.join(&f.path);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if hex::encode(Sha256::digest(&bytes)) != f.sha256 {
                return Err(Error::Config(format!("checksum mismatch: {}", f.path)));
            }
        }
        let mut present: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST)
            .collect();
        present.sort();
        let listed: Vec<&String> = self.files.iter().map(|f| &f.path).collect();
        if present.iter().collect::<Vec<_>>() != listed {
            return Err(Error::Config("manifest does not match directory contents".into()));
        }
        Ok(())
    }
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

pub fn label_name(i: usize) -> String {
    format!("label_{i:06}.png")
}

pub fn meta_name(i: usize) -> String {
    format!("frame_{i:06}.json")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn to_json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serialisable");
    out.push(b'\n');
    out
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, to_json_bytes(v)).map_err(|e| Error::io(path, e))
}

fn write_entry(dir: &Path, name: String, bytes: &[u8]) -> Result<FileEntry> {
    let path = dir.join(&name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileEntry {
        path: name,
        sha256: hex::encode(Sha256::digest(bytes)),
        bytes: bytes.len() as u64,
    })
}

/// `CTUS_THREADS` wins over the flag, the flag over the config.
pub fn resolve_workers(flag: Option<usize>, config: &SimConfig) -> Result<usize> {
    let env = match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().is_empty() => None,
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let n = env.or(flag).unwrap_or(config.workers);
    if n == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    Ok(n)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Renders every pose of the scan path and writes the dataset. The manifest
/// is written last, atomically; a directory without one is an aborted run.
pub fn simulate(cfg: &LoadedConfig, workers: usize) -> Result<Manifest> {
    let config = &cfg.config;
    let vol = cfg.load_volume()?;
    let imager = config.imager()?;
    let poses = cfg.poses(&vol)?;
    let hash = config.hash();
    let out = cfg.output_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest_path = out.join(MANIFEST);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }

    let calibration = CalibrationRecord {
        matrix: imager.calibration().to_rows(),
        pixel_spacing_mm: imager.image_pixel_mm(),
        image_size: config.synthesis.image_size,
    };
    let rendered: Vec<Result<[FileEntry; 3]>> = pool(workers)?.install(|| {
        poses
            .par_iter()
            .enumerate()
            .map(|(i, pose)| {
                let seed = frame_seed(config.global_seed, i as u64);
                let frame = imager.synthesize(&vol, pose, seed)?;
                let meta = FrameMeta {
                    index: i,
                    pose: PoseRecord::from(pose),
                    seed,
                    geom: *imager.fan(),
                    config_hash: hash.clone(),
                };
                Ok([
                    write_entry(&out, frame_name(i), &encode_gray_png(&frame.image))?,
                    write_entry(&out, label_name(i), &encode_gray_png(&mask_to_gray(&frame.label)))?,
                    write_entry(&out, meta_name(i), &to_json_bytes(&meta))?,
                ])
            })
            .collect()
    });
    let mut files = Vec::new();
    for r in rendered {
        files.extend(r?);
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));

    let manifest = Manifest {
        config_version: config.config_version,
        config_hash: hash,
        global_seed: config.global_seed,
        frame_count: poses.len(),
        calibration,
        frames: (0..poses.len())
            .map(|i| FrameEntry {
                index: i,
                image: frame_name(i),
                label: label_name(i),
                meta: meta_name(i),
            })
            .collect(),
        files,
    };
    let tmp = out.join(format!("{MANIFEST}.tmp"));
    write_json(&tmp, &manifest)?;
    fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// HU → 8 bit over `[-1000, 1000]`.
pub fn hu_to_gray(hu: &Array2<f64>) -> Array2<u8> {
    hu.mapv(|h| (((h + 1000.0) / 2000.0).clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Unwarped and warped HU slice for pose `index`, left and right.
pub fn press_preview(cfg: &LoadedConfig, index: usize) -> Result<Array2<u8>> {
    let vol = cfg.load_volume()?;
    let imager = cfg.config.imager()?;
    let poses = cfg.poses(&vol)?;
    let pose = poses.get(index).ok_or_else(|| {
        Error::Config(format!("pose index {index} out of range (scan path has {})", poses.len()))
    })?;
    let (raw, pressed) = imager.press_preview(&vol, pose);
    Ok(concatenate![Axis(1), hu_to_gray(&raw), hu_to_gray(&pressed)])
}

pub fn write_press_preview(cfg: &LoadedConfig, index: usize, out: &Path) -> Result<()> {
    let img = press_preview(cfg, index)?;
    write_gray_png(out, &img)
}

/// `prefix_%06d.png` files in `dir`, keyed by index.
pub fn indexed_pngs(dir: &Path, prefix: &str) -> Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(idx) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix('_'))
            .and_then(|r| r.strip_suffix(".png"))
        else {
            continue;
        };
        if idx.len() == 6 {
            if let Ok(i) = idx.parse() {
                out.insert(i, e.path());
            }
        }
    }
    Ok(out)
}

/// Masks (`pred_*` if any, else `label_*`) paired with their frame poses.
pub fn load_tracked_masks(masks: &Path, meta: &Path) -> Result<Vec<(usize, Array2<bool>, ProbePose)>> {
    let mut files = indexed_pngs(masks, "pred")?;
    if files.is_empty() {
        files = indexed_pngs(masks, "label")?;
    }
    if files.is_empty() {
        return Err(Error::Config(format!("no pred_/label_ masks in {}", masks.display())));
    }
    files
        .into_iter()
        .map(|(i, p)| {
            let mp = meta.join(meta_name(i));
            if !mp.is_file() {
                return Err(Error::Config(format!("missing metadata {}", mp.display())));
            }
            let m: FrameMeta = read_json(&mp)?;
            Ok((i, read_mask_png(&p)?, ProbePose::try_from(&m.pose)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    #[serde(flatten)]
    pub transform: TransformRecord,
    pub rms_mm: f64,
    pub mse_xyz: [f64; 3],
    pub iterations: usize,
    pub converged: bool,
}

impl From<&IcpResult> for RegistrationRecord {
    fn from(r: &IcpResult) -> Self {
        Self {
            transform: TransformRecord::from(&r.transform),
            rms_mm: r.rms_mm,
            mse_xyz: r.mse_xyz,
            iterations: r.iterations,
            converged: r.converged,
        }
    }
}

/// Output of the `register` command: the global transform at top level,
/// per-vertebra refinements under `segments`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationOutput {
    #[serde(flatten)]
    pub global: RegistrationRecord,
    pub segments: BTreeMap<String, RegistrationRecord>,
    pub source_points: usize,
    pub warning: Option<String>,
}

pub struct RegisterJob<'a> {
    pub masks: &'a Path,
    pub meta: &'a Path,
    pub calibration: &'a Path,
    pub ct_cloud: &'a Path,
    pub params: IcpParams,
    pub min_segment_points: usize,
}

/// Tracked masks → world cloud → registration against the CT cloud. Returns
/// the output record and the source cloud mapped by the global transform.
fn require_inputs(paths: &[&Path]) -> Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(Error::Config(format!("input not found: {}", p.display()))),
        None => Ok(()),
    }
}

pub fn run_register(job: &RegisterJob) -> Result<(RegistrationOutput, PointCloud)> {
    job.params.validate()?;
    require_inputs(&[job.masks, job.calibration, job.ct_cloud])?;
    let calib = CalibrationRecord::load(job.calibration)?;
    let frames: Vec<(Array2<bool>, ProbePose)> = load_tracked_masks(job.masks, job.meta)?
        .into_iter()
        .map(|(_, m, p)| (m, p))
        .collect();
    let src = frames_to_pointcloud(&frames, &calib.transform()?, calib.pixel_spacing_mm)?;
    let dst = PointCloud::load(job.ct_cloud)?;
    let result = register_segments(&src.vectors(), &dst, &job.params, job.min_segment_points)?;
    let warning = result
        .global
        .no_convergence(&job.params)
        .then(|| format!("no convergence: rms {:.3} mm", result.global.rms_mm));
    let out = RegistrationOutput {
        global: RegistrationRecord::from(&result.global),
        segments: result
            .segments
            .iter()
            .map(|(id, r)| (id.to_string(), RegistrationRecord::from(r)))
            .collect(),
        source_points: src.len(),
        warning,
    };
    Ok((out, src.transformed(&result.global.transform)))
}

/// Reads `R`/`t` from any JSON object carrying them.
pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    #[derive(Deserialize)]
    struct Rt {
        #[serde(rename = "R")]
        r: [f64; 9],
        t: [f64; 3],
    }
    let rt: Rt = read_json(path)?;
    RigidTransform::try_from(&TransformRecord {
        rotation: rt.r,
        translation: rt.t,
    })
}

pub fn write_transform(path: &Path, t: &RigidTransform) -> Result<()> {
    write_json(path, &TransformRecord::from(t))
}

pub fn run_screw_eval(plan: &Path, est: &Path, gt: &Path) -> Result<ScrewError> {
    require_inputs(&[plan, est, gt])?;
    let plan: ScrewPlan = read_json(plan)?;
    plan.validate()?;
    Ok(screw_error(&plan, &read_transform(est)?, &read_transform(gt)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: String,
    #[serde(flatten)]
    pub metrics: SegMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub spacing_mm: f64,
    pub summary: Summary,
    pub frames: Vec<FrameReport>,
}

/// Pairs `pred_%06d.png` with `label_%06d.png` by index.
pub fn run_evaluate(pred: &Path, gt: &Path, spacing_mm: f64) -> Result<(EvaluationOutput, Report)> {
    require_inputs(&[pred, gt])?;
    let p = indexed_pngs(pred, "pred")?;
    let g = indexed_pngs(gt, "label")?;
    if p.keys().ne(g.keys()) {
        return Err(Error::Config(format!(
            "prediction and label sets differ ({} vs {} files)",
            p.len(),
            g.len()
        )));
    }
    let frames = p
        .par_iter()
        .map(|(i, pp)| {
            let m = seg_metrics(&read_mask_png(pp)?, &read_mask_png(&g[i])?, spacing_mm)?;
            Ok((format!("{i:06}"), m))
        })
        .collect::<Result<Vec<_>>>()?;
    let rep = report(frames)?;
    let out = EvaluationOutput {
        spacing_mm,
        summary: rep.summary.clone(),
        frames: rep
            .frames
            .iter()
            .map(|(f, m)| FrameReport {
                frame: f.clone(),
                metrics: m.clone(),
            })
            .collect(),
    };
    Ok((out, rep))
}

pub fn write_evaluation(out: &Path, eval: &EvaluationOutput, rep: &Report) -> Result<()> {
    write_json(out, eval)?;
    let csv = out.with_extension("csv");
    fs::write(&csv, rep.to_csv()).map_err(|e| Error::io(&csv, e))
}

pub fn write_output_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_json(path, v)
}

/// Files written by [`write_phantom`].
pub mod phantom_files {
    pub const VOLUME: &str = "ct.ctvol.json";
    pub const MESH: &str = "skin.obj";
    pub const CT_CLOUD: &str = "ct_surface.ply";
    pub const SCREW: &str = "screw_plan.json";
    pub const CONFIG: &str = "config.json";
}

/// Synthetic spine volume, skin mesh, labelled CT surface, screw plan and a
/// ready-to-run curve-sweep config.
pub fn write_phantom(dir: &Path, spec: &PhantomSpec, frames: usize) -> Result<()> {
    use crate::kinematics::SurfaceMesh;
    use phantom_files::*;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vol = spec.volume()?;
    vol.save(dir.join(VOLUME))?;
    let mesh = SurfaceMesh::skin_from_volume(&vol, crate::config::DEFAULT_SKIN_HU, 2)?;
    let obj = dir.join(MESH);
    fs::write(&obj, mesh.to_obj()).map_err(|e| Error::io(&obj, e))?;
    spec.ct_cloud(&vol, 1.0)?.save(&dir.join(CT_CLOUD))?;
    write_json(&dir.join(SCREW), &spec.screw_plan())?;
    let half = 0.5 * spec.vertebrae as f64 * spec.pitch_mm;
    let config = serde_json::json!({
        "config_version": crate::config::CONFIG_VERSION,
        "volume": VOLUME,
        "output_dir": "dataset",
        "global_seed": 1,
        "scan_path": {
            "mode": "curves",
            "mesh": MESH,
            "forward": [0.0, 1.0, 0.0],
            "spacing_mm": (2.0 * half / (frames.max(1) + 1) as f64).max(0.25),
            "max_frames": frames.max(1),
            "region": {"min_mm": [-40.0, -half, -20.0], "max_mm": [40.0, half, 40.0]}
        },
        "probe": {"samples_per_line": 450}
    });
    write_json(&dir.join(CONFIG), &config)
}
