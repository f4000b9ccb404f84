//! Segmentation and registration metrics.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::KdTree;
use crate::transform::RigidTransform;
use crate::volume::Vec3;

fn same_shape(a: &Array2<bool>, b: &Array2<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty.
pub fn dice(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// True pixels with a false 4-neighbour or on the image border, as
/// `(row, col)`.
pub fn surface_pixels(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (rows, cols) = mask.dim();
    mask.indexed_iter()
        .filter(|&((r, c), &on)| {
            on && (r == 0
                || c == 0
                || r + 1 == rows
                || c + 1 == cols
                || !mask[(r - 1, c)]
                || !mask[(r + 1, c)]
                || !mask[(r, c - 1)]
                || !mask[(r, c + 1)])
        })
        .map(|(idx, _)| idx)
        .collect()
}

fn directed_mean(from: &[(usize, usize)], to: &[(usize, usize)], spacing_mm: f64) -> Option<f64> {
    if from.is_empty() || to.is_empty() {
        return None;
    }
    let lift = |&(r, c): &(usize, usize)| Vec3::new(c as f64, r as f64, 0.0);
    let tree = KdTree::new(&to.iter().map(lift).collect::<Vec<_>>());
    let sum: f64 = from
        .iter()
        .map(|p| tree.nearest(&lift(p)).expect("non-empty").1.sqrt())
        .sum();
    Some(sum / from.len() as f64 * spacing_mm)
}

/// Directed mean surface distances in mm: prediction → ground truth and
/// ground truth → prediction. `None` when either side has no surface.
pub fn chamfer(pred: &Array2<bool>, gt: &Array2<bool>, spacing_mm: f64) -> Result<(Option<f64>, Option<f64>)> {
    same_shape(pred, gt)?;
    if !(spacing_mm > 0.0) {
        return Err(Error::Config(format!("pixel spacing must be positive, got {spacing_mm}")));
    }
    let sp = surface_pixels(pred);
    let sg = surface_pixels(gt);
    Ok((directed_mean(&sp, &sg, spacing_mm), directed_mean(&sg, &sp, spacing_mm)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub cd_tp_mm: Option<f64>,
    pub cd_fn_mm: Option<f64>,
    pub n_pred: usize,
    pub n_gt: usize,
}

pub fn seg_metrics(pred: &Array2<bool>, gt: &Array2<bool>, spacing_mm: f64) -> Result<SegMetrics> {
    let (cd_tp_mm, cd_fn_mm) = chamfer(pred, gt, spacing_mm)?;
    Ok(SegMetrics {
        dice: dice(pred, gt)?,
        cd_tp_mm,
        cd_fn_mm,
        n_pred: pred.iter().filter(|&&b| b).count(),
        n_gt: gt.iter().filter(|&&b| b).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            max: v[n - 1],
            count: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub dice: Stats,
    /// Over frames where the distance is defined.
    pub cd_tp_mm: Option<Stats>,
    pub cd_fn_mm: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Sorted by frame id.
    pub frames: Vec<(String, SegMetrics)>,
    pub summary: Summary,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut out = String::from("frame,dice,cd_tp_mm,cd_fn_mm,n_pred,n_gt\n");
        for (id, m) in &self.frames {
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{}",
                m.dice,
                fmt(m.cd_tp_mm),
                fmt(m.cd_fn_mm),
                m.n_pred,
                m.n_gt
            );
        }
        out
    }
}

pub fn report(frames: Vec<(String, SegMetrics)>) -> Result<Report> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut frames = frames;
    frames.sort_by(|a, b| a.0.cmp(&b.0));
    let dice: Vec<f64> = frames.iter().map(|(_, m)| m.dice).collect();
    let tp: Vec<f64> = frames.iter().filter_map(|(_, m)| m.cd_tp_mm).collect();
    let fnd: Vec<f64> = frames.iter().filter_map(|(_, m)| m.cd_fn_mm).collect();
    let summary = Summary {
        frames: frames.len(),
        dice: Stats::of(&dice).expect("non-empty"),
        cd_tp_mm: Stats::of(&tp),
        cd_fn_mm: Stats::of(&fnd),
    };
    Ok(Report { frames, summary })
}

/// Per-axis RMS of `t_est(p) − t_gt(p)` over `points`.
pub fn per_axis_error(t_est: &RigidTransform, t_gt: &RigidTransform, points: &[Vec3]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for p in points {
        let d = t_est.apply(p) - t_gt.apply(p);
        for a in 0..3 {
            acc[a] += d[a] * d[a];
        }
    }
    acc.map(|s| (s / points.len().max(1) as f64).sqrt())
}
