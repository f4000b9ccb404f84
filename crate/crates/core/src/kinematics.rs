//! Probe placement constrained to the skin surface.
//!
//! Two movement modes: a free 2-DOF geodesic walk over a triangle mesh, and
//! 1-DOF motion along polylines obtained by slicing the mesh with a family of
//! parallel planes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::FanGeometry;
use crate::volume::{CtVolume, SliceGeometry, Vec3};

/// Triangle mesh with per-vertex unit normals (pointing out of the body).
#[derive(Debug, Clone)]
pub struct SurfaceMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    normals: Vec<Vec3>,
    tangent_reference: Vec3,
    neighbors: OnceLock<Vec<[Option<usize>; 3]>>,
}

impl SurfaceMesh {
    /// Builds a mesh; when `normals` is `None` they are area-weighted face
    /// normals following the triangle winding.
    pub fn new(
        vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        normals: Option<Vec<Vec3>>,
    ) -> Result<Self> {
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::Mesh(format!("triangle {t:?} references a missing vertex")));
        }
        let normals = match normals {
            Some(n) => {
                if n.len() != vertices.len() {
                    return Err(Error::Mesh(format!(
                        "{} normals for {} vertices",
                        n.len(),
                        vertices.len()
                    )));
                }
                n.into_iter()
                    .map(|v| {
                        let len = v.norm();
                        if len > 0.0 && len.is_finite() {
                            Ok(v / len)
                        } else {
                            Err(Error::Mesh("zero-length vertex normal".into()))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => winding_normals(&vertices, &triangles),
        };
        Ok(Self {
            vertices,
            triangles,
            normals,
            tangent_reference: Vec3::x(),
            neighbors: OnceLock::new(),
        })
    }

    /// World direction whose projection defines the first axis of the local
    /// tangent frame used by [`move_free`].
    pub fn with_tangent_reference(mut self, reference: Vec3) -> Self {
        if reference.norm() > 0.0 {
            self.tangent_reference = reference.normalize();
        }
        self
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    /// Unit face normal, oriented to agree with the vertex normals.
    fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        let n = (b - a).cross(&(c - a));
        let avg: Vec3 = self.triangles[t].iter().map(|&i| self.normals[i]).sum();
        let n = n.normalize();
        if n.dot(&avg) < 0.0 {
            -n
        } else {
            n
        }
    }

    fn tangent_frame(&self, t: usize) -> (Vec3, Vec3, Vec3) {
        let n = self.face_normal(t);
        let mut e1 = self.tangent_reference - n * self.tangent_reference.dot(&n);
        if e1.norm() < 1e-9 {
            let alt = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            e1 = alt - n * alt.dot(&n);
        }
        let e1 = e1.normalize();
        (e1, n.cross(&e1), n)
    }

    fn neighbors(&self) -> &[[Option<usize>; 3]] {
        self.neighbors.get_or_init(|| {
            let mut edges: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
            for (t, tri) in self.triangles.iter().enumerate() {
                for i in 0..3 {
                    let (a, b) = (tri[(i + 1) % 3], tri[(i + 2) % 3]);
                    edges.entry((a.min(b), a.max(b))).or_default().push((t, i));
                }
            }
            let mut out = vec![[None; 3]; self.triangles.len()];
            for users in edges.values() {
                if let [(t0, i0), (t1, i1)] = users[..] {
                    out[t0][i0] = Some(t1);
                    out[t1][i1] = Some(t0);
                }
            }
            out
        })
    }

    pub fn point(&self, state: &SurfaceState) -> Vec3 {
        let [a, b, c] = self.corners(state.triangle);
        let [l0, l1, l2] = state.barycentric;
        a * l0 + b * l1 + c * l2
    }

    pub fn interpolated_normal(&self, state: &SurfaceState) -> Vec3 {
        let tri = self.triangles[state.triangle];
        let n: Vec3 = (0..3).map(|i| self.normals[tri[i]] * state.barycentric[i]).sum();
        if n.norm() > 1e-12 {
            n.normalize()
        } else {
            self.face_normal(state.triangle)
        }
    }

    /// Closest surface point to `p` (brute force over triangles).
    pub fn locate(&self, p: &Vec3, heading: [f64; 2]) -> Result<SurfaceState> {
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.corners(t);
            let (q, bary) = closest_point_on_triangle(p, &a, &b, &c);
            let d = (q - p).norm_squared();
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, t, bary));
            }
        }
        let (_, triangle, barycentric) = best.ok_or(Error::EmptyRegion)?;
        Ok(SurfaceState {
            triangle,
            barycentric,
            heading: normalize2(heading),
        })
    }

    /// Distance from `p` to the closest surface point.
    pub fn distance(&self, p: &Vec3) -> f64 {
        self.triangles
            .iter()
            .map(|tri| {
                let [a, b, c] = tri.map(|i| self.vertices[i]);
                (closest_point_on_triangle(p, &a, &b, &c).0 - p).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut vn = Vec::new();
        let mut triangles = Vec::new();
        let mut vertex_normal: HashMap<usize, usize> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let bad = |what: &str| Error::Mesh(format!("line {}: {what}", lineno + 1));
            match it.next() {
                Some("v") => vertices.push(parse_vec3(&mut it).ok_or_else(|| bad("bad vertex"))?),
                Some("vn") => vn.push(parse_vec3(&mut it).ok_or_else(|| bad("bad normal"))?),
                Some("f") => {
                    let mut corners = Vec::new();
                    for tok in it {
                        let mut parts = tok.split('/');
                        let v = parse_obj_index(parts.next(), vertices.len())
                            .ok_or_else(|| bad("bad face index"))?;
                        let n = parts.nth(1).and_then(|s| parse_obj_index(Some(s), vn.len()));
                        if let Some(n) = n {
                            vertex_normal.insert(v, n);
                        }
                        corners.push(v);
                    }
                    if corners.len() < 3 {
                        return Err(bad("face with fewer than 3 vertices"));
                    }
                    for i in 1..corners.len() - 1 {
                        triangles.push([corners[0], corners[i], corners[i + 1]]);
                    }
                }
                _ => {}
            }
        }
        let normals = if !vn.is_empty() && vertex_normal.len() == vertices.len() {
            Some((0..vertices.len()).map(|i| vn[vertex_normal[&i]]).collect())
        } else if !vn.is_empty() && vn.len() == vertices.len() {
            Some(vn)
        } else {
            None
        };
        Self::new(vertices, triangles, normals)
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(&text)
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for n in &self.normals {
            out.push_str(&format!("vn {} {} {}\n", n.x, n.y, n.z));
        }
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            out.push_str(&format!("f {a}//{a} {b}//{b} {c}//{c}\n"));
        }
        out
    }

    /// Skin surface from a CT volume: for each `(i, j)` column (every
    /// `stride` voxels) the first crossing of `threshold_hu` along the index
    /// `k` axis, linearly refined, then grid-triangulated. Normals point
    /// against the casting direction.
    pub fn skin_from_volume(vol: &CtVolume, threshold_hu: f64, stride: usize) -> Result<Self> {
        let stride = stride.max(1);
        let [nx, ny, nz] = vol.dims();
        let is: Vec<usize> = (0..nx).step_by(stride).collect();
        let js: Vec<usize> = (0..ny).step_by(stride).collect();
        let mut grid = vec![None; is.len() * js.len()];
        let mut vertices = Vec::new();
        for (gj, &j) in js.iter().enumerate() {
            for (gi, &i) in is.iter().enumerate() {
                let mut prev = vol.voxel(i, j, 0) as f64;
                if prev >= threshold_hu {
                    continue;
                }
                for k in 1..nz {
                    let cur = vol.voxel(i, j, k) as f64;
                    if cur >= threshold_hu {
                        let frac = (threshold_hu - prev) / (cur - prev);
                        let idx = Vec3::new(i as f64, j as f64, k as f64 - 1.0 + frac);
                        grid[gj * is.len() + gi] = Some(vertices.len());
                        vertices.push(vol.index_to_world(idx));
                        break;
                    }
                    prev = cur;
                }
            }
        }
        let cast = vol.direction().column(2).into_owned();
        let mut triangles = Vec::new();
        for gj in 0..js.len().saturating_sub(1) {
            for gi in 0..is.len().saturating_sub(1) {
                let at = |a: usize, b: usize| grid[b * is.len() + a];
                if let (Some(a), Some(b), Some(c), Some(d)) =
                    (at(gi, gj), at(gi + 1, gj), at(gi + 1, gj + 1), at(gi, gj + 1))
                {
                    for mut tri in [[a, b, c], [a, c, d]] {
                        let [p, q, r] = tri.map(|v| vertices[v]);
                        if (q - p).cross(&(r - p)).dot(&cast) > 0.0 {
                            tri.swap(1, 2);
                        }
                        triangles.push(tri);
                    }
                }
            }
        }
        if triangles.is_empty() {
            return Err(Error::EmptyRegion);
        }
        // drop unreferenced vertices
        let mesh = Self::new(vertices, triangles, None)?;
        let everything = Aabb {
            min: Vec3::repeat(f64::NEG_INFINITY),
            max: Vec3::repeat(f64::INFINITY),
        };
        clip_region(&mesh, &everything)
    }
}

fn parse_vec3<'a>(it: &mut impl Iterator<Item = &'a str>) -> Option<Vec3> {
    let x = it.next()?.parse().ok()?;
    let y = it.next()?.parse().ok()?;
    let z = it.next()?.parse().ok()?;
    Some(Vec3::new(x, y, z))
}

fn parse_obj_index(tok: Option<&str>, count: usize) -> Option<usize> {
    let i: i64 = tok?.parse().ok()?;
    let idx = if i < 0 { count as i64 + i } else { i - 1 };
    (0..count as i64).contains(&idx).then_some(idx as usize)
}

fn winding_normals(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let [a, b, c] = t.map(|i| vertices[i]);
        let n = (b - a).cross(&(c - a));
        for &i in t {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .map(|n| if n.norm() > 0.0 { n.normalize() } else { Vec3::z() })
        .collect()
}

fn normalize2(h: [f64; 2]) -> [f64; 2] {
    let n = h[0].hypot(h[1]);
    if n > 0.0 {
        [h[0] / n, h[1] / n]
    } else {
        [1.0, 0.0]
    }
}

fn barycentric(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> [f64; 3] {
    let n = (b - a).cross(&(c - a));
    let n2 = n.norm_squared();
    let l0 = n.dot(&(c - b).cross(&(p - b))) / n2;
    let l1 = n.dot(&(a - c).cross(&(p - c))) / n2;
    [l0, l1, 1.0 - l0 - l1]
}

/// Closest point on a triangle and its barycentric coordinates.
fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let n = (b - a).cross(&(c - a)).normalize();
    let proj = p - n * (p - a).dot(&n);
    let bary = barycentric(&proj, a, b, c);
    if bary.iter().all(|&l| l >= 0.0) {
        return (proj, bary);
    }
    let mut best = (f64::INFINITY, *a, [1.0, 0.0, 0.0]);
    for (i, (s, e)) in [(a, b), (b, c), (c, a)].into_iter().enumerate() {
        let d = e - s;
        let t = ((p - s).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        let q = s + d * t;
        let dist = (q - p).norm_squared();
        if dist < best.0 {
            let mut bc = [0.0; 3];
            bc[i] = 1.0 - t;
            bc[(i + 1) % 3] = t;
            best = (dist, q, bc);
        }
    }
    (best.1, best.2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Sub-mesh of triangles lying entirely inside `aabb`, re-indexed compactly.
pub fn clip_region(mesh: &SurfaceMesh, aabb: &Aabb) -> Result<SurfaceMesh> {
    let kept: Vec<[usize; 3]> = mesh
        .triangles
        .iter()
        .filter(|t| t.iter().all(|&i| aabb.contains(&mesh.vertices[i])))
        .copied()
        .collect();
    let mut used = vec![false; mesh.vertices.len()];
    kept.iter().flatten().for_each(|&i| used[i] = true);
    let mut remap = vec![usize::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    for (i, _) in used.iter().enumerate().filter(|(_, u)| **u) {
        remap[i] = vertices.len();
        vertices.push(mesh.vertices[i]);
        normals.push(mesh.normals[i]);
    }
    let triangles: Vec<[usize; 3]> = kept.iter().map(|t| t.map(|i| remap[i])).collect();
    if triangles.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(SurfaceMesh::new(vertices, triangles, Some(normals))?
        .with_tangent_reference(mesh.tangent_reference))
}

/// Rigid probe placement. Probe axes: `x` lateral (in the imaging plane), `z`
/// into the body, `y = z × x` elevational.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePose {
    pub position_mm: Vec3,
    pub rotation: UnitQuaternion<f64>,
}

impl ProbePose {
    pub fn identity() -> Self {
        Self {
            position_mm: Vec3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    /// Pose from a lateral direction and the inward axis; `lateral` is
    /// orthogonalised against `inward`.
    pub fn from_axes(position_mm: Vec3, lateral: Vec3, inward: Vec3) -> Self {
        let z = inward.normalize();
        let mut x = lateral - z * lateral.dot(&z);
        if x.norm() < 1e-12 {
            let alt = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            x = alt - z * alt.dot(&z);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let m = Matrix3::from_columns(&[x, y, z]);
        Self {
            position_mm,
            rotation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)),
        }
    }

    pub fn axes(&self) -> (Vec3, Vec3, Vec3) {
        let m = self.rotation.to_rotation_matrix();
        let m = m.matrix();
        (
            m.column(0).into_owned(),
            m.column(1).into_owned(),
            m.column(2).into_owned(),
        )
    }

    /// Rotates the probe about its own inward axis.
    pub fn with_roll(self, roll_rad: f64) -> Self {
        if roll_rad == 0.0 {
            return self;
        }
        let (_, _, z) = self.axes();
        let spin = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(z), roll_rad);
        Self {
            rotation: spin * self.rotation,
            ..self
        }
    }

    /// Maps a probe-frame point to world coordinates.
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.position_mm
    }
}

/// JSON form: `{"position_mm": [x,y,z], "quaternion": [w,x,y,z]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub position_mm: [f64; 3],
    pub quaternion: [f64; 4],
}

impl From<&ProbePose> for PoseRecord {
    fn from(p: &ProbePose) -> Self {
        let q = p.rotation.quaternion();
        Self {
            position_mm: p.position_mm.into(),
            quaternion: [q.w, q.i, q.j, q.k],
        }
    }
}

impl TryFrom<&PoseRecord> for ProbePose {
    type Error = Error;

    fn try_from(r: &PoseRecord) -> Result<Self> {
        let [w, i, j, k] = r.quaternion;
        let q = nalgebra::Quaternion::new(w, i, j, k);
        let norm = q.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Config("pose quaternion must be non-zero".into()));
        }
        Ok(ProbePose {
            position_mm: Vec3::from(r.position_mm),
            rotation: UnitQuaternion::from_quaternion(q),
        })
    }
}

/// Position on a mesh plus the probe heading in the triangle's tangent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceState {
    pub triangle: usize,
    pub barycentric: [f64; 3],
    pub heading: [f64; 2],
}

/// Pose for a mesh state: `z` = −interpolated normal, `x` = heading.
pub fn pose_at_state(mesh: &SurfaceMesh, state: &SurfaceState) -> ProbePose {
    let (e1, e2, _) = mesh.tangent_frame(state.triangle);
    let lateral = e1 * state.heading[0] + e2 * state.heading[1];
    let inward = -mesh.interpolated_normal(state);
    ProbePose::from_axes(mesh.point(state), lateral, inward)
}

/// Walks `(du, dv)` mm in the current triangle's tangent frame, unfolding the
/// direction across edges so the path is a straight line on the developed
/// surface.
pub fn move_free(
    mesh: &SurfaceMesh,
    state: &SurfaceState,
    du: f64,
    dv: f64,
) -> Result<(SurfaceState, ProbePose)> {
    let length = du.hypot(dv);
    if length == 0.0 {
        return Ok((*state, pose_at_state(mesh, state)));
    }
    let neighbors = mesh.neighbors();
    let mut tri = state.triangle;
    let (e1, e2, _) = mesh.tangent_frame(tri);
    let mut dir = (e1 * du + e2 * dv) / length;
    let mut p = mesh.point(state);
    let mut remaining = length;

    for _ in 0..100_000 {
        let [a, b, c] = mesh.corners(tri);
        let lam = barycentric(&p, &a, &b, &c);
        let probe = barycentric(&(p + dir), &a, &b, &c);
        let mut exit: Option<(f64, usize)> = None;
        for i in 0..3 {
            let rate = probe[i] - lam[i];
            if rate < -1e-12 {
                let t = (-lam[i] / rate).max(0.0);
                if exit.is_none_or(|(bt, _)| t < bt) {
                    exit = Some((t, i));
                }
            }
        }
        match exit {
            Some((t, edge)) if t < remaining => {
                p += dir * t;
                remaining -= t;
                let next = neighbors[tri][edge].ok_or(Error::LeftRegion)?;
                let va = mesh.vertices[mesh.triangles[tri][(edge + 1) % 3]];
                let vb = mesh.vertices[mesh.triangles[tri][(edge + 2) % 3]];
                let axis = (vb - va).normalize();
                let along = dir.dot(&axis);
                let across = (dir - axis * along).norm();
                let opp = mesh.triangles[next]
                    .iter()
                    .map(|&i| mesh.vertices[i])
                    .find(|v| *v != va && *v != vb)
                    .ok_or_else(|| Error::Mesh("degenerate neighbour triangle".into()))?;
                let inward = (opp - va) - axis * (opp - va).dot(&axis);
                dir = (axis * along + inward.normalize() * across).normalize();
                tri = next;
            }
            _ => {
                p += dir * remaining;
                break;
            }
        }
    }

    let [a, b, c] = mesh.corners(tri);
    let mut bary = barycentric(&p, &a, &b, &c).map(|l| l.max(0.0));
    let sum: f64 = bary.iter().sum();
    bary.iter_mut().for_each(|l| *l /= sum);
    let next = SurfaceState {
        triangle: tri,
        barycentric: bary,
        heading: state.heading,
    };
    Ok((next, pose_at_state(mesh, &next)))
}

/// Plane/mesh intersection curve, ordered by arc length.
#[derive(Debug, Clone)]
pub struct Polyline3 {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub closed: bool,
    /// Index of the slicing plane that produced this curve.
    pub plane_index: usize,
    cumulative: Vec<f64>,
}

impl Polyline3 {
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>, closed: bool, plane_index: usize) -> Self {
        let mut cumulative = Vec::with_capacity(points.len() + 1);
        cumulative.push(0.0);
        let n = points.len();
        let segs = if closed { n } else { n.saturating_sub(1) };
        for i in 0..segs {
            let d = (points[(i + 1) % n] - points[i]).norm();
            cumulative.push(cumulative[i] + d);
        }
        Self {
            points,
            normals,
            closed,
            plane_index,
            cumulative,
        }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    /// Position, surface normal and unit tangent at arc length `t`.
    pub fn sample(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let n = self.points.len();
        if n == 1 {
            return (self.points[0], self.normals[0], Vec3::x());
        }
        let t = t.clamp(0.0, self.length());
        let seg = (self.cumulative.partition_point(|&c| c <= t).max(1) - 1)
            .min(self.cumulative.len() - 2);
        let (i, j) = (seg, (seg + 1) % n);
        let span = self.cumulative[seg + 1] - self.cumulative[seg];
        let f = if span > 0.0 {
            (t - self.cumulative[seg]) / span
        } else {
            0.0
        };
        let p = self.points[i] * (1.0 - f) + self.points[j] * f;
        let nrm = (self.normals[i] * (1.0 - f) + self.normals[j] * f).normalize();
        let tangent = (self.points[j] - self.points[i]).normalize();
        (p, nrm, tangent)
    }

    pub fn pose_at(&self, t: f64) -> ProbePose {
        let (p, n, tangent) = self.sample(t);
        ProbePose::from_axes(p, tangent, -n)
    }
}

/// Cuts the mesh with planes perpendicular to `forward_dir`, `spacing_mm`
/// apart and centred on the mesh extent. Returns every intersection
/// component, ordered by plane then by decreasing length.
pub fn slice_curves(
    mesh: &SurfaceMesh,
    forward_dir: &Vec3,
    spacing_mm: f64,
) -> Result<Vec<Polyline3>> {
    if !(spacing_mm > 0.0) {
        return Err(Error::Config("curve spacing must be positive".into()));
    }
    let f = forward_dir.normalize();
    let proj: Vec<f64> = mesh.vertices.iter().map(|v| v.dot(&f)).collect();
    let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::EmptyRegion);
    }
    let center = 0.5 * (lo + hi);
    let half_count = ((hi - center) / spacing_mm).floor() as i64;
    let up: Vec3 = mesh.normals.iter().sum::<Vec3>();
    let lateral = f.cross(&up);

    let mut curves = Vec::new();
    for (plane_index, j) in (-half_count..=half_count).enumerate() {
        let level = center + j as f64 * spacing_mm;
        if level <= lo || level >= hi {
            continue;
        }
        let mut comps = plane_components(mesh, &proj, level);
        for c in comps.iter_mut() {
            orient_curve(c, &f, &lateral, &up);
        }
        comps.sort_by(|a, b| b.length().total_cmp(&a.length()));
        for mut c in comps {
            c.plane_index = plane_index;
            curves.push(c);
        }
    }
    if curves.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(curves)
}

fn plane_components(mesh: &SurfaceMesh, proj: &[f64], level: f64) -> Vec<Polyline3> {
    let above = |v: usize| proj[v] >= level;
    let mut point_of: HashMap<(usize, usize), (Vec3, Vec3)> = HashMap::new();
    let mut links: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
    for tri in &mesh.triangles {
        let mut crossing = Vec::with_capacity(2);
        for i in 0..3 {
            let (a, b) = (tri[i], tri[(i + 1) % 3]);
            if above(a) != above(b) {
                let key = (a.min(b), a.max(b));
                point_of.entry(key).or_insert_with(|| {
                    let t = (level - proj[key.0]) / (proj[key.1] - proj[key.0]);
                    let p = mesh.vertices[key.0] * (1.0 - t) + mesh.vertices[key.1] * t;
                    let n = mesh.normals[key.0] * (1.0 - t) + mesh.normals[key.1] * t;
                    (p, n.normalize())
                });
                crossing.push(key);
            }
        }
        if let [k0, k1] = crossing[..] {
            links.entry(k0).or_default().push(k1);
            links.entry(k1).or_default().push(k0);
        }
    }

    let mut keys: Vec<_> = links.keys().copied().collect();
    keys.sort();
    let mut visited = std::collections::HashSet::new();
    let mut out = Vec::new();
    // open chains first start at degree-1 nodes
    let starts: Vec<_> = keys
        .iter()
        .copied()
        .filter(|k| links[k].len() == 1)
        .chain(keys.iter().copied())
        .collect();
    for start in starts {
        if visited.contains(&start) {
            continue;
        }
        let mut chain = vec![start];
        visited.insert(start);
        let mut cur = start;
        let closed;
        loop {
            let next = links[&cur].iter().copied().find(|k| !visited.contains(k));
            match next {
                Some(n) => {
                    visited.insert(n);
                    chain.push(n);
                    cur = n;
                }
                None => {
                    closed = chain.len() > 2 && links[&cur].contains(&start);
                    break;
                }
            }
        }
        let (points, normals) = chain.iter().map(|k| point_of[k]).unzip();
        out.push(Polyline3::new(points, normals, closed, 0));
    }
    out
}

fn orient_curve(c: &mut Polyline3, forward: &Vec3, lateral: &Vec3, up: &Vec3) {
    let n = c.points.len();
    if n < 2 {
        return;
    }
    let reverse = if c.closed {
        // positive winding about the forward axis
        let centroid: Vec3 = c.points.iter().sum::<Vec3>() / n as f64;
        let mut w = 0.0;
        for i in 0..n {
            let a = c.points[i] - centroid;
            let b = c.points[(i + 1) % n] - centroid;
            w += a.cross(&b).dot(forward);
        }
        w < 0.0
    } else {
        (c.points[n - 1] - c.points[0]).dot(lateral) < 0.0
    };
    let (mut pts, mut nrm) = (c.points.clone(), c.normals.clone());
    if reverse {
        pts.reverse();
        nrm.reverse();
    }
    if c.closed {
        // start at the point furthest along the outward direction
        let start = (0..n)
            .max_by(|&a, &b| pts[a].dot(up).total_cmp(&pts[b].dot(up)))
            .unwrap_or(0);
        pts.rotate_left(start);
        nrm.rotate_left(start);
    }
    *c = Polyline3::new(pts, nrm, c.closed, c.plane_index);
}

/// Moves along a curve by `dt` mm: clamped at the ends of open curves,
/// wrapped on closed ones.
pub fn move_on_curve(curve: &Polyline3, t: f64, dt: f64) -> (f64, ProbePose) {
    let len = curve.length();
    let next = if curve.closed && len > 0.0 {
        (t + dt).rem_euclid(len)
    } else {
        (t + dt).clamp(0.0, len)
    };
    (next, curve.pose_at(next))
}

/// Pixel lattice of the in-plane HU slice that the press model and fan
/// sampling work on. Row 0 is the skin line through the probe contact point,
/// which sits at column `center_col`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceLayout {
    pub rows: usize,
    pub cols: usize,
    pub pixel_mm: f64,
    pub center_col: f64,
    /// Depth of the probe's centre of curvature below the skin line (mm;
    /// negative when above it).
    pub pivot_depth_mm: f64,
}

impl SliceLayout {
    /// Smallest layout covering the whole fan for a given push depth.
    pub fn for_fan(fan: &FanGeometry, push_depth_mm: f64, pixel_mm: f64) -> Self {
        let pivot_depth_mm = push_depth_mm - fan.probe_radius_mm;
        let max_depth = pivot_depth_mm + fan.max_radius();
        let half_width = fan.max_radius() * fan.half_angle().sin();
        let half_cols = (half_width / pixel_mm).ceil() as usize + 1;
        Self {
            rows: (max_depth / pixel_mm).ceil() as usize + 2,
            cols: 2 * half_cols + 1,
            pixel_mm,
            center_col: half_cols as f64,
            pivot_depth_mm,
        }
    }

    /// Slice pixel coordinates `(row, col)` of a pivot-relative point.
    pub fn local_to_pixel(&self, lateral_mm: f64, axial_mm: f64) -> (f64, f64) {
        (
            (self.pivot_depth_mm + axial_mm) / self.pixel_mm,
            self.center_col + lateral_mm / self.pixel_mm,
        )
    }
}

/// Imaging plane of a pose: columns run along the probe's lateral axis, rows
/// into the body, and the contact point maps to pixel `(0, center_col)`.
/// The plane normal is `x × z`, i.e. the probe's negative elevational axis.
pub fn pose_to_slice_geometry(pose: &ProbePose, layout: &SliceLayout) -> SliceGeometry {
    let (x, _, z) = pose.axes();
    let origin = pose.position_mm - x * (layout.center_col * layout.pixel_mm);
    SliceGeometry::new(
        layout.rows,
        layout.cols,
        [layout.pixel_mm, layout.pixel_mm],
        origin,
        x,
        z,
    )
    .expect("pose axes are orthonormal and layout is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    pub(crate) fn plane_mesh(n: usize, step: f64) -> SurfaceMesh {
        let mut v = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                v.push(Vec3::new(i as f64 * step, j as f64 * step, 0.0));
            }
        }
        let mut t = Vec::new();
        let id = |i: usize, j: usize| j * (n + 1) + i;
        for j in 0..n {
            for i in 0..n {
                t.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                t.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        SurfaceMesh::new(v, t, None).unwrap()
    }

    /// Cylinder of radius `r` around the x axis, outward normals.
    pub(crate) fn cylinder_mesh(r: f64, len: f64, around: usize, along: usize) -> SurfaceMesh {
        let mut v = Vec::new();
        let mut n = Vec::new();
        for j in 0..=along {
            for i in 0..around {
                let a = 2.0 * PI * i as f64 / around as f64;
                let x = -0.5 * len + len * j as f64 / along as f64;
                v.push(Vec3::new(x, r * a.cos(), r * a.sin()));
                n.push(Vec3::new(0.0, a.cos(), a.sin()));
            }
        }
        let id = |i: usize, j: usize| j * around + i % around;
        let mut t = Vec::new();
        for j in 0..along {
            for i in 0..around {
                t.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                t.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        SurfaceMesh::new(v, t, Some(n)).unwrap()
    }

    #[test]
    fn clip_whole_and_empty() {
        let m = plane_mesh(4, 1.0);
        let all = Aabb {
            min: Vec3::repeat(-1.0),
            max: Vec3::repeat(10.0),
        };
        let c = clip_region(&m, &all).unwrap();
        assert_eq!(c.triangles(), m.triangles());
        assert_eq!(c.vertices(), m.vertices());
        let none = Aabb {
            min: Vec3::repeat(50.0),
            max: Vec3::repeat(60.0),
        };
        assert!(matches!(clip_region(&m, &none), Err(Error::EmptyRegion)));
    }

    #[test]
    fn clip_matches_brute_force_filter() {
        let m = cylinder_mesh(1.0, 2.0, 24, 6);
        let b = Aabb {
            min: Vec3::new(-5.0, -5.0, 0.0),
            max: Vec3::repeat(5.0),
        };
        let expected = m
            .triangles()
            .iter()
            .filter(|t| t.iter().all(|&i| m.vertices()[i].z >= 0.0))
            .count();
        assert_eq!(clip_region(&m, &b).unwrap().triangles().len(), expected);
    }

    #[test]
    fn zero_walk_is_identity() {
        let m = plane_mesh(4, 10.0);
        let s = m.locate(&Vec3::new(12.0, 17.0, 0.0), [1.0, 0.0]).unwrap();
        let before = pose_at_state(&m, &s);
        let (s2, after) = move_free(&m, &s, 0.0, 0.0).unwrap();
        assert_eq!(s, s2);
        assert_eq!(before, after);
    }

    #[test]
    fn planar_walk_is_exact() {
        let m = plane_mesh(6, 10.0);
        let start = Vec3::new(11.0, 13.0, 0.0);
        let s = m.locate(&start, [1.0, 0.0]).unwrap();
        let (_, pose) = move_free(&m, &s, 23.5, 17.25).unwrap();
        let d = pose.position_mm - start;
        assert!((d - Vec3::new(23.5, 17.25, 0.0)).norm() < 1e-9, "{d:?}");
        let (_, _, z) = pose.axes();
        assert!((z - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
    }

    #[test]
    fn walking_off_the_mesh_fails() {
        let m = plane_mesh(2, 1.0);
        let s = m.locate(&Vec3::new(1.0, 1.0, 0.0), [1.0, 0.0]).unwrap();
        assert!(matches!(move_free(&m, &s, 5.0, 0.0), Err(Error::LeftRegion)));
    }

    #[test]
    fn cylinder_geodesic_length() {
        let r = 50.0;
        let m = cylinder_mesh(r, 100.0, 720, 10);
        let start = Vec3::new(0.0, 0.0, r);
        let mut s = m.locate(&start, [1.0, 0.0]).unwrap();
        let mut positions = vec![m.point(&s)];
        for _ in 0..10 {
            let (ns, pose) = move_free(&m, &s, 0.0, 1.0).unwrap();
            positions.push(pose.position_mm);
            s = ns;
        }
        let chord_sum: f64 = positions.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        assert!((chord_sum - 10.0).abs() < 0.1, "{chord_sum}");
        let a0 = positions[0].z.atan2(positions[0].y);
        let a1 = positions[10].z.atan2(positions[10].y);
        assert!(((a1 - a0).abs() * r - 10.0).abs() < 0.1);
        // stays on the axis-parallel line
        assert!(positions.iter().all(|p| p.x.abs() < 1e-9));
    }

    #[test]
    fn walk_is_reversible() {
        let m = cylinder_mesh(50.0, 100.0, 360, 20);
        let s = m.locate(&Vec3::new(3.0, 10.0, 49.0), [1.0, 0.0]).unwrap();
        let p0 = m.point(&s);
        let (s1, _) = move_free(&m, &s, 7.3, -4.1).unwrap();
        let (_, back) = move_free(&m, &s1, -7.3, 4.1).unwrap();
        assert!((back.position_mm - p0).norm() < 1e-3);
    }

    #[test]
    fn slicing_cylinder_gives_circumference() {
        let r = 20.0;
        let m = cylinder_mesh(r, 40.0, 256, 8);
        let curves = slice_curves(&m, &Vec3::x(), 100.0).unwrap();
        assert_eq!(curves.len(), 1);
        assert!(curves[0].closed);
        let rel = (curves[0].length() - 2.0 * PI * r).abs() / (2.0 * PI * r);
        assert!(rel < 0.01, "{rel}");
    }

    #[test]
    fn slicing_plane_gives_straight_lines() {
        let m = plane_mesh(8, 1.0);
        let curves = slice_curves(&m, &Vec3::x(), 2.0).unwrap();
        assert!(curves.len() >= 3);
        for c in &curves {
            assert!(!c.closed);
            let (a, b) = (c.points[0], *c.points.last().unwrap());
            assert!((c.length() - (b - a).norm()).abs() < 1e-9);
        }
        // parallel planes never share points
        for w in curves.windows(2) {
            assert!((w[0].points[0].x - w[1].points[0].x).abs() > 1.0);
        }
    }

    #[test]
    fn curve_motion_clamps_and_wraps() {
        let m = plane_mesh(8, 1.0);
        let c = &slice_curves(&m, &Vec3::x(), 100.0).unwrap()[0];
        let (t0, p0) = move_on_curve(c, 2.0, 0.0);
        assert_eq!(t0, 2.0);
        assert_eq!(p0, c.pose_at(2.0));
        let (t1, _) = move_on_curve(c, 2.0, 100.0);
        assert_eq!(t1, c.length());

        let cyl = cylinder_mesh(15.0, 20.0, 128, 4);
        let ring = &slice_curves(&cyl, &Vec3::x(), 100.0).unwrap()[0];
        let start = ring.pose_at(0.0);
        let mut t = 0.0;
        for _ in 0..37 {
            t = move_on_curve(ring, t, ring.length() / 37.0).0;
        }
        let end = ring.pose_at(t);
        assert!((end.position_mm - start.position_mm).norm() < 1e-3);
    }

    #[test]
    fn poses_stay_on_mesh() {
        let m = cylinder_mesh(30.0, 60.0, 90, 12);
        let mut s = m.locate(&Vec3::new(0.0, 0.0, 30.0), [0.6, 0.8]).unwrap();
        for step in 0..6 {
            let (ns, pose) = move_free(&m, &s, 2.5, 1.5 * step as f64).unwrap();
            assert!(m.distance(&pose.position_mm) < 1e-6);
            s = ns;
        }
        for c in slice_curves(&m, &Vec3::x(), 11.0).unwrap() {
            let pose = move_on_curve(&c, 0.0, 13.0).1;
            assert!(m.distance(&pose.position_mm) < 1e-6);
        }
    }

    #[test]
    fn identity_pose_plane_axes() {
        let layout = SliceLayout {
            rows: 10,
            cols: 11,
            pixel_mm: 0.5,
            center_col: 5.0,
            pivot_depth_mm: -30.0,
        };
        let g = pose_to_slice_geometry(&ProbePose::identity(), &layout);
        assert_eq!(g.u, Vec3::x());
        assert_eq!(g.v, Vec3::z());
        assert_eq!(g.pixel_to_world(0.0, 5.0), Vec3::zeros());

        let rot = ProbePose {
            position_mm: Vec3::zeros(),
            rotation: UnitQuaternion::from_axis_angle(&Vec3::z_axis(), PI / 2.0),
        };
        let g = pose_to_slice_geometry(&rot, &layout);
        assert!((g.u - Vec3::y()).norm() < 1e-12);
        assert!((g.v - Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn obj_round_trip() {
        let m = cylinder_mesh(5.0, 4.0, 12, 2);
        let back = SurfaceMesh::parse_obj(&m.to_obj()).unwrap();
        assert_eq!(back.triangles(), m.triangles());
        for (a, b) in back.normals().iter().zip(m.normals()) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(SurfaceMesh::parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn pose_record_round_trip() {
        let p = ProbePose::from_axes(
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        );
        let back = ProbePose::try_from(&PoseRecord::from(&p)).unwrap();
        assert!((back.rotation.angle_to(&p.rotation)) < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn slice_normal_is_minus_elevational(w in -1.0f64..1.0, i in -1.0f64..1.0, j in -1.0f64..1.0, k in -1.0f64..1.0) {
                let q = nalgebra::Quaternion::new(w, i, j, k);
                prop_assume!(q.norm() > 1e-3);
                let pose = ProbePose { position_mm: Vec3::new(3.0, -2.0, 7.0), rotation: UnitQuaternion::from_quaternion(q) };
                let layout = SliceLayout { rows: 4, cols: 5, pixel_mm: 0.3, center_col: 2.0, pivot_depth_mm: -10.0 };
                let g = pose_to_slice_geometry(&pose, &layout);
                let (_, y, _) = pose.axes();
                prop_assert!((g.normal + y).norm() < 1e-9);
            }
        }
    }
}
