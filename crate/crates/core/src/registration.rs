//! Point clouds from labelled frames, coarse + trimmed ICP registration and
//! pedicle-screw plan transfer error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::ProbePose;
use crate::transform::RigidTransform;
use crate::volume::{CtVolume, Vec3};

/// Exact nearest-neighbour index: a balanced kd-tree stored implicitly in a
/// permutation of the input points.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            axes: vec![0; points.len()],
        };
        tree.build(0, points.len());
        tree
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            min = min.inf(&self.points[i]);
            max = max.sup(&self.points[i]);
        }
        let axis = (max - min).imax();
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis])
        });
        self.axes[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the closest point and its squared distance.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.points.len(), &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

/// World-space points with optional per-point frame ids and segment labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointCloud {
    pub points: Vec<Vec3Record>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<u32>>,
}

pub type Vec3Record = [f64; 3];

impl PointCloud {
    pub fn from_points(points: &[Vec3]) -> Self {
        Self {
            points: points.iter().map(|p| (*p).into()).collect(),
            ..Self::default()
        }
    }

    pub fn vectors(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| Vec3::from(*p)).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateCloud("non-finite coordinate".into()));
        }
        for (name, extra) in [("frame_ids", &self.frame_ids), ("segments", &self.segments)] {
            if extra.as_ref().is_some_and(|v| v.len() != self.points.len()) {
                return Err(Error::DegenerateCloud(format!("{name} length differs from points")));
            }
        }
        Ok(())
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(&Vec3::from(*p)).into()).collect(),
            ..self.clone()
        }
    }

    /// Sub-cloud of the points carrying segment label `id`.
    pub fn segment(&self, id: u32) -> Vec<Vec3> {
        match &self.segments {
            Some(s) => self
                .points
                .iter()
                .zip(s)
                .filter(|(_, &l)| l == id)
                .map(|(p, _)| Vec3::from(*p))
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn segment_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.segments.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn to_ply(&self) -> String {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(out, "element vertex {}", self.points.len());
        out.push_str("property double x\nproperty double y\nproperty double z\n");
        if self.segments.is_some() {
            out.push_str("property int segment\n");
        }
        out.push_str("end_header\n");
        for (i, p) in self.points.iter().enumerate() {
            let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
            if let Some(s) = &self.segments {
                let _ = write!(out, " {}", s[i]);
            }
            out.push('\n');
        }
        out
    }

    /// ASCII PLY with `x y z` and an optional integer `segment` property.
    pub fn parse_ply(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::DegenerateCloud(format!("ply: {m}"));
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(bad("missing magic"));
        }
        let mut count = None;
        let mut props = Vec::new();
        let mut in_vertex = false;
        loop {
            let line = lines.next().ok_or_else(|| bad("missing end_header"))?.trim();
            let mut it = line.split_whitespace();
            match it.next() {
                Some("format") => {
                    if it.next() != Some("ascii") {
                        return Err(bad("only ascii format is supported"));
                    }
                }
                Some("element") => {
                    in_vertex = it.next() == Some("vertex");
                    if in_vertex {
                        count = it.next().and_then(|n| n.parse::<usize>().ok());
                    }
                }
                Some("property") if in_vertex => {
                    props.push(it.last().unwrap_or_default().to_string());
                }
                Some("end_header") => break,
                _ => {}
            }
        }
        let count = count.ok_or_else(|| bad("no vertex element"))?;
        let col = |name: &str| props.iter().position(|p| p == name);
        let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(bad("x/y/z properties required")),
        };
        let iseg = col("segment");
        let mut cloud = PointCloud {
            segments: iseg.map(|_| Vec::with_capacity(count)),
            ..Self::default()
        };
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("non-numeric vertex value"))?;
            if vals.len() < props.len() {
                return Err(bad("short vertex line"));
            }
            cloud.points.push([vals[ix], vals[iy], vals[iz]]);
            if let (Some(i), Some(s)) = (iseg, cloud.segments.as_mut()) {
                s.push(vals[i] as u32);
            }
        }
        cloud.validate()?;
        Ok(cloud)
    }

    /// Reads `.ply` (ASCII) or the JSON form, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cloud = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
            Self::parse_ply(&text)?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
            self.to_ply()
        } else {
            serde_json::to_string(self).map_err(|e| Error::json(path, e))?
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScrewPlan {
    pub entry_mm: [f64; 3],
    pub tip_mm: [f64; 3],
    pub axis: [f64; 3],
    pub length_mm: f64,
    pub diameter_mm: f64,
}

impl ScrewPlan {
    pub fn from_entry_tip(entry: Vec3, tip: Vec3, diameter_mm: f64) -> Result<Self> {
        let d = tip - entry;
        let length = d.norm();
        if !(length > 0.0) {
            return Err(Error::Config("screw entry and tip coincide".into()));
        }
        Ok(Self {
            entry_mm: entry.into(),
            tip_mm: tip.into(),
            axis: (d / length).into(),
            length_mm: length,
            diameter_mm,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = Vec3::from(self.axis).norm();
        if (n - 1.0).abs() > 1e-6 || !(self.length_mm > 0.0) || !(self.diameter_mm > 0.0) {
            return Err(Error::Config(format!("invalid screw plan: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScrewError {
    pub tip_err_mm: [f64; 3],
    pub tip_err_norm_mm: f64,
    pub angle_deg: f64,
}

pub fn screw_error(plan: &ScrewPlan, t_est: &RigidTransform, t_gt: &RigidTransform) -> ScrewError {
    let tip = Vec3::from(plan.tip_mm);
    let axis = Vec3::from(plan.axis);
    let d = t_est.apply(&tip) - t_gt.apply(&tip);
    let c = t_est.apply_vector(&axis).dot(&t_gt.apply_vector(&axis)).clamp(-1.0, 1.0);
    ScrewError {
        tip_err_mm: d.into(),
        tip_err_norm_mm: d.norm(),
        angle_deg: c.acos().to_degrees(),
    }
}

/// Upper contour of the largest 8-connected component: per column, the
/// shallowest pixel. Returned as `(row, col)` sorted by column.
pub fn mask_to_contour(mask: &Array2<bool>) -> Result<Vec<(usize, usize)>> {
    let (rows, cols) = mask.dim();
    let mut comp = Array2::<u32>::zeros((rows, cols));
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for ((r, c), &on) in mask.indexed_iter() {
        if !on || comp[(r, c)] != 0 {
            continue;
        }
        next += 1;
        comp[(r, c)] = next;
        stack.push((r, c));
        let mut size = 0;
        while let Some((y, x)) = stack.pop() {
            size += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= rows as i64 || nx >= cols as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[(ny, nx)] && comp[(ny, nx)] == 0 {
                        comp[(ny, nx)] = next;
                        stack.push((ny, nx));
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    if best.0 == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((0..cols)
        .filter_map(|c| (0..rows).find(|&r| comp[(r, c)] == best.0).map(|r| (r, c)))
        .collect())
}

/// Lifts each frame's contour to world space: `pose ∘ calib` applied to
/// `(col·sx, row·sy, 0)`. Frames with empty masks are skipped.
pub fn frames_to_pointcloud(
    frames: &[(Array2<bool>, ProbePose)],
    calib: &RigidTransform,
    pixel_spacing: [f64; 2],
) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for (i, (mask, pose)) in frames.iter().enumerate() {
        let Ok(contour) = mask_to_contour(mask) else {
            continue;
        };
        let to_world = RigidTransform::from(pose).compose(calib);
        for (r, c) in contour {
            let p = Vec3::new(c as f64 * pixel_spacing[0], r as f64 * pixel_spacing[1], 0.0);
            points.push(to_world.apply(&p).into());
            ids.push(i as u32);
        }
    }
    if points.is_empty() {
        return Err(Error::NoPoints);
    }
    Ok(PointCloud {
        points,
        frame_ids: Some(ids),
        segments: None,
    })
}

/// Bone surface seen from `view_dir`: rays on a `spacing_mm` lattice
/// perpendicular to the view, first crossing of `threshold_hu` refined
/// linearly between samples.
pub fn ct_surface_points(
    vol: &CtVolume,
    view_dir: &Vec3,
    threshold_hu: f64,
    spacing_mm: f64,
) -> Result<Vec<Vec3>> {
    if !(spacing_mm > 0.0) || view_dir.norm() == 0.0 {
        return Err(Error::Config("surface extraction needs a positive spacing and a view direction".into()));
    }
    let d = view_dir.normalize();
    let a = if d.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = (a - d * a.dot(&d)).normalize();
    let e2 = d.cross(&e1);
    let (lo, hi) = vol.bounds();
    let corners: Vec<Vec3> = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            )
        })
        .collect();
    let range = |axis: &Vec3| {
        corners.iter().map(|c| c.dot(axis)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let (u0, u1) = range(&e1);
    let (v0, v1) = range(&e2);
    let (w0, w1) = range(&d);
    let step = 0.25 * vol.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let nu = ((u1 - u0) / spacing_mm).floor() as usize + 1;
    let nv = ((v1 - v0) / spacing_mm).floor() as usize + 1;
    let nw = ((w1 - w0) / step).ceil() as usize + 1;

    let rays: Vec<(usize, usize)> = (0..nv).flat_map(|j| (0..nu).map(move |i| (i, j))).collect();
    let hits: Vec<Option<Vec3>> = rays
        .par_iter()
        .map(|&(i, j)| {
            let base = e1 * (u0 + i as f64 * spacing_mm) + e2 * (v0 + j as f64 * spacing_mm) + d * w0;
            let mut prev = vol.hu_at(&base);
            if prev >= threshold_hu {
                return None;
            }
            for k in 1..nw {
                let p = base + d * (k as f64 * step);
                let cur = vol.hu_at(&p);
                if cur >= threshold_hu {
                    let f = (threshold_hu - prev) / (cur - prev);
                    return Some(base + d * ((k as f64 - 1.0 + f) * step));
                }
                prev = cur;
            }
            None
        })
        .collect();
    let pts: Vec<Vec3> = hits.into_iter().flatten().collect();
    if pts.is_empty() {
        return Err(Error::NoPoints);
    }
    Ok(pts)
}

fn centroid(pts: &[Vec3]) -> Vec3 {
    pts.iter().sum::<Vec3>() / pts.len() as f64
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]` (SVD closed
/// form with reflection guard).
pub fn procrustes(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * fix * u.transpose();
    RigidTransform::from_parts_unchecked(r, cd - r * cs)
}

/// Principal axes as columns of a proper rotation, largest variance first.
fn principal_axes(pts: &[Vec3]) -> Result<Matrix3<f64>> {
    if pts.len() < 3 {
        return Err(Error::DegenerateCloud(format!("{} points, need at least 3", pts.len())));
    }
    let c = centroid(pts);
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= pts.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l0 = eig.eigenvalues[order[0]];
    let l1 = eig.eigenvalues[order[1]];
    if !(l0 > 0.0) || l1 <= 1e-10 * l0 {
        return Err(Error::DegenerateCloud("points are collinear".into()));
    }
    let mut axes = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    if axes.determinant() < 0.0 {
        axes.set_column(2, &(-axes.column(2)));
    }
    Ok(axes)
}

/// Candidate alignments from centroids and principal axes: one per proper
/// sign flip of the axes.
pub fn coarse_candidates(src: &[Vec3], dst: &[Vec3]) -> Result<Vec<RigidTransform>> {
    let es = principal_axes(src)?;
    let ed = principal_axes(dst)?;
    let (cs, cd) = (centroid(src), centroid(dst));
    Ok([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
        .iter()
        .map(|f| {
            let r = ed * Matrix3::from_diagonal(&Vec3::from(*f)) * es.transpose();
            RigidTransform::from_parts_unchecked(r, cd - r * cs)
        })
        .collect())
}

fn nn_rms(tree: &KdTree, src: &[Vec3], t: &RigidTransform) -> f64 {
    let sum: f64 = src
        .iter()
        .map(|p| tree.nearest(&t.apply(p)).map_or(f64::INFINITY, |(_, d2)| d2))
        .sum();
    (sum / src.len() as f64).sqrt()
}

/// Centroid + principal-axes alignment of `src` onto `dst`, choosing the flip
/// with the lowest nearest-neighbour RMS.
pub fn coarse_align(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    let candidates = coarse_candidates(src, dst)?;
    let tree = KdTree::new(dst);
    let scored: Vec<(f64, RigidTransform)> = candidates.into_iter().map(|t| (nn_rms(&tree, src, &t), t)).collect();
    Ok(scored
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, t)| t)
        .expect("four candidates"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpParams {
    pub max_iter: usize,
    pub trim_fraction: f64,
    pub tol: f64,
    /// RMS above which an unconverged run is flagged.
    pub warn_rms_mm: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            trim_fraction: 0.2,
            tol: 1e-6,
            warn_rms_mm: 5.0,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.trim_fraction) || self.max_iter == 0 || !(self.tol >= 0.0) {
            return Err(Error::Config(format!("invalid ICP parameters: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Trimmed RMS of the final matching.
    pub rms_mm: f64,
    /// Per-axis mean squared residual of the kept pairs.
    pub mse_xyz: [f64; 3],
    pub iterations: usize,
    pub converged: bool,
    /// Trimmed RMS at each matching step; non-increasing.
    pub rms_history: Vec<f64>,
}

impl IcpResult {
    /// Ran out of iterations with a residual above the warning threshold.
    pub fn no_convergence(&self, params: &IcpParams) -> bool {
        !self.converged && self.rms_mm > params.warn_rms_mm
    }
}

struct Matching {
    rms: f64,
    mse: [f64; 3],
    src: Vec<Vec3>,
    dst: Vec<Vec3>,
}

fn trimmed_match(tree: &KdTree, dst: &[Vec3], src: &[Vec3], t: &RigidTransform, trim: f64) -> Matching {
    let mut pairs: Vec<(f64, Vec3, Vec3)> = src
        .iter()
        .map(|p| {
            let q = t.apply(p);
            let (j, d2) = tree.nearest(&q).expect("non-empty target");
            (d2, q, dst[j])
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let keep = (((1.0 - trim) * src.len() as f64).ceil() as usize).clamp(3.min(src.len()), src.len());
    pairs.truncate(keep);
    let n = keep as f64;
    let mut mse = [0.0; 3];
    for (_, q, d) in &pairs {
        for a in 0..3 {
            mse[a] += (q[a] - d[a]).powi(2) / n;
        }
    }
    Matching {
        rms: (pairs.iter().map(|p| p.0).sum::<f64>() / n).sqrt(),
        mse,
        src: pairs.iter().map(|p| p.1).collect(),
        dst: pairs.iter().map(|p| p.2).collect(),
    }
}

/// Trimmed ICP of `src` onto `dst` starting from `init`. Each iteration
/// matches every source point to its exact nearest target, keeps the best
/// `1 − trim_fraction` pairs and applies their Procrustes solution. Stops when
/// the trimmed RMS changes by less than `tol`.
pub fn trimmed_icp(
    src: &[Vec3],
    dst: &[Vec3],
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpResult> {
    params.validate()?;
    if src.len() < 3 || dst.len() < 3 {
        return Err(Error::DegenerateCloud("ICP needs at least 3 points per cloud".into()));
    }
    let tree = KdTree::new(dst);
    let mut t = *init;
    let mut history = Vec::new();
    let mut current = trimmed_match(&tree, dst, src, &t, params.trim_fraction);
    history.push(current.rms);
    let mut converged = current.rms == 0.0;
    let mut iterations = 0;
    while !converged && iterations < params.max_iter {
        iterations += 1;
        let step = procrustes(&current.src, &current.dst);
        let candidate = step.compose(&t);
        let next = trimmed_match(&tree, dst, src, &candidate, params.trim_fraction);
        if next.rms > current.rms {
            // round-off only; the true objective cannot increase
            converged = true;
            break;
        }
        let delta = current.rms - next.rms;
        t = candidate;
        current = next;
        history.push(current.rms);
        converged = delta < params.tol || current.rms == 0.0;
    }
    Ok(IcpResult {
        transform: t,
        rms_mm: current.rms,
        mse_xyz: current.mse,
        iterations,
        converged,
        rms_history: history,
    })
}

/// Global registration: trimmed ICP started from the identity and from each
/// coarse-alignment candidate; the lowest final RMS wins.
pub fn register(src: &[Vec3], dst: &[Vec3], params: &IcpParams) -> Result<IcpResult> {
    let mut inits = vec![RigidTransform::identity()];
    inits.extend(coarse_candidates(src, dst)?);
    let results: Vec<IcpResult> = inits
        .par_iter()
        .map(|init| trimmed_icp(src, dst, init, params))
        .collect::<Result<_>>()?;
    Ok(results
        .into_iter()
        .min_by(|a, b| a.rms_mm.total_cmp(&b.rms_mm))
        .expect("at least one start"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedRegistration {
    pub global: IcpResult,
    pub segments: BTreeMap<u32, IcpResult>,
}

/// Global registration followed by one refinement per CT segment. Source
/// points take the segment of their nearest target point after the global
/// step; segments with fewer than `min_points` source points keep the global
/// result.
pub fn register_segments(
    src: &[Vec3],
    dst: &PointCloud,
    params: &IcpParams,
    min_points: usize,
) -> Result<SegmentedRegistration> {
    let dst_pts = dst.vectors();
    let global = register(src, &dst_pts, params)?;
    let mut segments = BTreeMap::new();
    if let Some(labels) = &dst.segments {
        let tree = KdTree::new(&dst_pts);
        let assigned: Vec<u32> = src
            .iter()
            .map(|p| labels[tree.nearest(&global.transform.apply(p)).expect("non-empty").0])
            .collect();
        let ids = dst.segment_ids();
        let results: Vec<(u32, Option<IcpResult>)> = ids
            .par_iter()
            .map(|&id| {
                let sub: Vec<Vec3> = src.iter().zip(&assigned).filter(|(_, &l)| l == id).map(|(p, _)| *p).collect();
                let target = dst.segment(id);
                if sub.len() < min_points.max(3) || target.len() < 3 {
                    return Ok((id, None));
                }
                Ok((id, Some(trimmed_icp(&sub, &target, &global.transform, params)?)))
            })
            .collect::<Result<_>>()?;
        for (id, r) in results {
            segments.insert(id, r.unwrap_or_else(|| global.clone()));
        }
    }
    Ok(SegmentedRegistration { global, segments })
}
