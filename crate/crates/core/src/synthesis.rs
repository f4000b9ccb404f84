//! B-mode frame assembly: elevational enhancement, radial speckle, map
//! blending, scan conversion and bone-surface labels.

use std::path::Path;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{build_acoustic_slice, AcousticLut};
use crate::error::{Error, Result};
use crate::kinematics::{pose_to_slice_geometry, ProbePose, SliceLayout};
use crate::press::{bilinear_clamped, squeeze_band_fan, PressParams, ProbeContact, UvMap};
use crate::propagation::{propagate, reflectivity, FanGeometry, PhysicsParams, PropagationResult};
use crate::transform::RigidTransform;
use crate::volume::{sample_slice, CtVolume, SliceGeometry, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisParams {
    pub n_planes: usize,
    pub thickness_mm: f64,
    pub echo_gain: f64,
    pub enhancement_gain: f64,
    /// Time-gain compensation slope; 0 disables it.
    pub tgc_db_per_cm: f64,
    pub noise_enabled: bool,
    pub bone_threshold_hu: f64,
    pub label_thickness: usize,
    /// Resolution of the in-plane HU slice the press warp runs on.
    pub slice_pixel_mm: f64,
    /// Output image `[rows, cols]`.
    pub image_size: [usize; 2],
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            n_planes: 5,
            thickness_mm: 3.0,
            echo_gain: 4.0,
            enhancement_gain: 4.0,
            tgc_db_per_cm: 0.0,
            noise_enabled: true,
            bone_threshold_hu: 250.0,
            label_thickness: 2,
            slice_pixel_mm: 0.25,
            image_size: [256, 256],
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_planes >= 1
            && self.thickness_mm > 0.0
            && self.echo_gain >= 0.0
            && self.enhancement_gain >= 0.0
            && self.tgc_db_per_cm.is_finite()
            && self.bone_threshold_hu.is_finite()
            && self.label_thickness >= 1
            && self.slice_pixel_mm > 0.0
            && self.image_size.iter().all(|&n| n >= 2);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthesis parameters: {self:?}")))
        }
    }
}

/// Cartesian display lattice fitted around the fan's bounding box with
/// isotropic pixels. Local coordinates are pivot-relative `(lateral, axial)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub rows: usize,
    pub cols: usize,
    pub pixel_mm: f64,
    /// Axial distance of row 0 from the pivot.
    pub top_mm: f64,
}

impl ScanGrid {
    pub fn fit(fan: &FanGeometry, size: [usize; 2]) -> Self {
        let [rows, cols] = size;
        let h = fan.half_angle();
        let r_max = fan.max_radius();
        let half_w = if fan.num_scanlines < 2 {
            0.0
        } else {
            r_max * h.sin()
        };
        let top = fan.probe_radius_mm * h.cos();
        let by_height = (r_max - top) / (rows.max(2) - 1) as f64;
        let by_width = 2.0 * half_w / (cols.max(2) - 1) as f64;
        Self {
            rows,
            cols,
            pixel_mm: by_height.max(by_width),
            top_mm: top,
        }
    }

    pub fn pixel_to_local(&self, r: f64, c: f64) -> (f64, f64) {
        (
            (c - 0.5 * (self.cols - 1) as f64) * self.pixel_mm,
            self.top_mm + r * self.pixel_mm,
        )
    }

    /// `(row, col)` of a pivot-relative point.
    pub fn local_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.top_mm) / self.pixel_mm,
            x / self.pixel_mm + 0.5 * (self.cols - 1) as f64,
        )
    }
}

/// Bilinear fan → Cartesian resampling; pixels outside the wedge are 0.
pub fn scan_convert(field: &Array2<f64>, fan: &FanGeometry, grid: &ScanGrid) -> Array2<f64> {
    Array2::from_shape_fn((grid.rows, grid.cols), |(r, c)| {
        let (x, y) = grid.pixel_to_local(r as f64, c as f64);
        match fan.from_local(x, y) {
            Some((k, s)) => bilinear_clamped(field, s, k),
            None => 0.0,
        }
    })
}

/// Nearest-neighbour scan conversion for binary fields.
pub fn scan_convert_nearest(mask: &Array2<bool>, fan: &FanGeometry, grid: &ScanGrid) -> Array2<bool> {
    Array2::from_shape_fn((grid.rows, grid.cols), |(r, c)| {
        let (x, y) = grid.pixel_to_local(r as f64, c as f64);
        fan.from_local(x, y)
            .is_some_and(|(k, s)| mask[(k.round() as usize, s.round() as usize)])
    })
}

/// Per scanline, the first sample at or above the threshold and the
/// `thickness − 1` samples below it.
pub fn make_label(hu: &Array2<f64>, bone_threshold_hu: f64, thickness: usize) -> Array2<bool> {
    let (rows, cols) = hu.dim();
    let mut label = Array2::from_elem((rows, cols), false);
    for s in 0..cols {
        if let Some(k0) = (0..rows).find(|&k| hu[(k, s)] >= bone_threshold_hu) {
            for k in k0..(k0 + thickness).min(rows) {
                label[(k, s)] = true;
            }
        }
    }
    label
}

/// Mixes a frame index into the global seed (splitmix64 finaliser), so each
/// frame owns an independent stream regardless of scheduling.
pub fn frame_seed(global_seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(global_seed ^ mix(index))
}

/// Multiplicative speckle on the fan grid: Rayleigh amplitudes scaled to
/// mean 1, smoothed along each scanline with a `[1, 2, 1] / 4` kernel.
pub fn radial_noise(dim: (usize, usize), seed: u64) -> Array2<f64> {
    let sigma = 1.0 / (std::f64::consts::PI / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Array2::from_shape_simple_fn(dim, || {
        let u: f64 = rng.random();
        sigma * (-2.0 * (1.0 - u).ln()).sqrt()
    });
    let rows = dim.0;
    Array2::from_shape_fn(dim, |(k, s)| {
        let up = raw[(k.saturating_sub(1), s)];
        let down = raw[((k + 1).min(rows - 1), s)];
        0.25 * up + 0.5 * raw[(k, s)] + 0.25 * down
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendGains {
    pub echo: f64,
    pub enhancement: f64,
    pub tgc_db_per_cm: f64,
}

/// `clamp01((g_echo·echo + g_enh·enhancement) · noise · tgc(depth))`.
pub fn blend(
    prop: &PropagationResult,
    enhancement: &Array2<f64>,
    noise: &Array2<f64>,
    gains: &BlendGains,
    fan: &FanGeometry,
) -> Result<Array2<f64>> {
    let dim = prop.echo.dim();
    for other in [enhancement.dim(), noise.dim()] {
        if other != dim {
            return Err(Error::ShapeMismatch {
                expected: dim,
                actual: other,
            });
        }
    }
    let mut out = Array2::zeros(dim);
    Zip::indexed(&mut out)
        .and(&prop.echo)
        .and(enhancement)
        .and(noise)
        .for_each(|(k, _), o, &e, &h, &n| {
            let depth_cm = k as f64 * fan.radial_step_mm / 10.0;
            let tgc = 10f64.powf(gains.tgc_db_per_cm * depth_cm / 20.0);
            *o = ((gains.echo * e + gains.enhancement * h) * n * tgc).clamp(0.0, 1.0);
        });
    Ok(out)
}

/// Round-half-up quantisation of `[0, 1]` intensities to 8 bits.
pub fn quantize(field: &Array2<f64>) -> Array2<u8> {
    field.mapv(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
}

#[derive(Debug, Clone)]
pub struct UsFrame {
    pub image: Array2<u8>,
    pub label: Array2<bool>,
    /// Label on the fan grid before scan conversion.
    pub fan_label: Array2<bool>,
    pub pose: ProbePose,
    pub geometry: FanGeometry,
    pub maps: PropagationResult,
    pub seed: u64,
}

/// Everything needed to turn a pose into a frame. Built once per dataset;
/// immutable and shareable across worker threads.
#[derive(Debug, Clone)]
pub struct Imager {
    fan: FanGeometry,
    layout: SliceLayout,
    contact: Option<ProbeContact>,
    uv: Option<UvMap>,
    grid: ScanGrid,
    lut: AcousticLut,
    physics: PhysicsParams,
    params: SynthesisParams,
    push_depth_mm: f64,
}

impl Imager {
    pub fn new(
        fan: FanGeometry,
        press: &PressParams,
        physics: PhysicsParams,
        params: SynthesisParams,
        lut: AcousticLut,
    ) -> Result<Self> {
        fan.validate()?;
        physics.validate()?;
        params.validate()?;
        lut.validate()?;
        let push_depth_mm = press.push_depth_mm(&fan);
        if !(push_depth_mm >= 0.0) || push_depth_mm >= fan.probe_radius_mm {
            return Err(Error::Config(format!(
                "push depth {push_depth_mm} mm must be in [0, probe radius)"
            )));
        }
        let px = params.slice_pixel_mm;
        let layout = SliceLayout::for_fan(&fan, push_depth_mm, px);
        let contact = (press.enabled && push_depth_mm > 0.0).then(|| {
            let push_px = push_depth_mm / px;
            ProbeContact {
                probe_radius_mm: fan.probe_radius_mm,
                contact_center_px: [layout.center_col, 0.0],
                push_target_px: [layout.center_col, push_px],
                r_max_px: press.r_max_px.unwrap_or(4.0 * push_px),
                strength_f: press.strength_f,
                hu_weight_enabled: press.hu_weight_enabled,
            }
        });
        if let Some(c) = &contact {
            if !c.is_valid() {
                return Err(Error::Config(format!("invalid press contact: {c:?}")));
            }
        }
        let uv = contact
            .filter(|c| !c.hu_weight_enabled)
            .map(|c| UvMap::build(&c, &Array2::zeros((layout.rows, layout.cols))));
        Ok(Self {
            fan,
            layout,
            contact,
            uv,
            grid: ScanGrid::fit(&fan, params.image_size),
            lut,
            physics,
            params,
            push_depth_mm,
        })
    }

    pub fn fan(&self) -> &FanGeometry {
        &self.fan
    }

    pub fn layout(&self) -> &SliceLayout {
        &self.layout
    }

    pub fn grid(&self) -> &ScanGrid {
        &self.grid
    }

    pub fn params(&self) -> &SynthesisParams {
        &self.params
    }

    pub fn push_depth_mm(&self) -> f64 {
        self.push_depth_mm
    }

    /// Isotropic output pixel size `[sx, sy]` in mm.
    pub fn image_pixel_mm(&self) -> [f64; 2] {
        [self.grid.pixel_mm; 2]
    }

    /// Image → probe frame: image point `(c·sx, r·sy, 0)` maps to the probe
    /// frame whose origin is the skin contact point, `x` lateral, `z` depth.
    pub fn calibration(&self) -> RigidTransform {
        let m = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let t = Vec3::new(
            -0.5 * (self.grid.cols - 1) as f64 * self.grid.pixel_mm,
            0.0,
            self.grid.top_mm + self.layout.pivot_depth_mm,
        );
        RigidTransform::new(m, t).expect("fixed axis permutation is a rotation")
    }

    pub fn slice_geometry(&self, pose: &ProbePose) -> SliceGeometry {
        pose_to_slice_geometry(pose, &self.layout)
    }

    fn press(&self, hu: &Array2<f64>) -> Array2<f64> {
        match (&self.uv, &self.contact) {
            (Some(uv), _) => uv.apply(hu),
            (None, Some(c)) => UvMap::build(c, hu).apply(hu),
            (None, None) => hu.clone(),
        }
    }

    /// In-plane HU slice before and after the press warp.
    pub fn press_preview(&self, vol: &CtVolume, pose: &ProbePose) -> (Array2<f64>, Array2<f64>) {
        let raw = sample_slice(vol, &self.slice_geometry(pose));
        let pressed = self.press(&raw);
        (raw, pressed)
    }

    /// Pressed HU on the fan grid for an arbitrary slice plane.
    pub fn fan_hu(&self, vol: &CtVolume, geom: &SliceGeometry) -> Array2<f64> {
        let pressed = self.press(&sample_slice(vol, geom));
        Array2::from_shape_fn(self.fan.dim(), |(k, s)| {
            let (x, y) = self.fan.to_local(k as f64, s as f64);
            let (r, c) = self.layout.local_to_pixel(x, y);
            bilinear_clamped(&pressed, c, r)
        })
    }

    /// Weighted sum of the local reflection response on `n_planes` planes
    /// spread over `thickness_mm` along the elevational axis. Plane offsets
    /// are `(j − (n−1)/2)·Δ` with `Δ = thickness/n`, weights `1/(1 + |offset|/Δ)`
    /// normalised to sum 1.
    pub fn elevational_enhancement(
        &self,
        vol: &CtVolume,
        pose: &ProbePose,
        thickness_mm: f64,
        n_planes: usize,
    ) -> Result<Array2<f64>> {
        let base = self.slice_geometry(pose);
        let n = n_planes.max(1);
        let step = thickness_mm / n as f64;
        let offsets: Vec<f64> = (0..n)
            .map(|j| (j as f64 - 0.5 * (n - 1) as f64) * step)
            .collect();
        let weights: Vec<f64> = offsets.iter().map(|o| 1.0 / (1.0 + o.abs() / step)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = Array2::zeros(self.fan.dim());
        for (o, w) in offsets.iter().zip(&weights) {
            let hu = self.fan_hu(vol, &base.offset(*o));
            let z = hu.mapv(|h| self.lut.impedance(h));
            acc.scaled_add(w / total, &reflectivity(&z, &self.fan)?);
        }
        Ok(acc)
    }

    pub fn synthesize(&self, vol: &CtVolume, pose: &ProbePose, seed: u64) -> Result<UsFrame> {
        let geom = self.slice_geometry(pose);
        let hu = self.fan_hu(vol, &geom);
        let squeeze = squeeze_band_fan(&self.fan, self.push_depth_mm);
        let fan_label = make_label(&hu, self.params.bone_threshold_hu, self.params.label_thickness);
        let slice = build_acoustic_slice(hu, &self.lut, squeeze)?;
        let maps = propagate(&slice, &self.fan, &self.physics)?;
        let enhancement = self.elevational_enhancement(
            vol,
            pose,
            self.params.thickness_mm,
            self.params.n_planes,
        )? * &maps.transmission;
        let noise = if self.params.noise_enabled {
            radial_noise(self.fan.dim(), seed)
        } else {
            Array2::ones(self.fan.dim())
        };
        let gains = BlendGains {
            echo: self.params.echo_gain,
            enhancement: self.params.enhancement_gain,
            tgc_db_per_cm: self.params.tgc_db_per_cm,
        };
        let fan_image = blend(&maps, &enhancement, &noise, &gains, &self.fan)?;
        Ok(UsFrame {
            image: quantize(&scan_convert(&fan_image, &self.fan, &self.grid)),
            label: scan_convert_nearest(&fan_label, &self.fan, &self.grid),
            fan_label,
            pose: *pose,
            geometry: self.fan,
            maps,
            seed,
        })
    }
}

/// 8-bit grayscale PNG bytes.
pub fn encode_gray_png(img: &Array2<u8>) -> Vec<u8> {
    use image::ImageEncoder;
    let (rows, cols) = img.dim();
    let data: Vec<u8> = img.iter().copied().collect();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&data, cols as u32, rows as u32, image::ExtendedColorType::L8)
        .expect("in-memory png encoding");
    out
}

pub fn mask_to_gray(mask: &Array2<bool>) -> Array2<u8> {
    mask.mapv(|b| if b { 255 } else { 0 })
}

pub fn write_gray_png(path: &Path, img: &Array2<u8>) -> Result<()> {
    std::fs::write(path, encode_gray_png(img)).map_err(|e| Error::io(path, e))
}

/// Writes a mask as 0/255 grayscale.
pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    write_gray_png(path, &mask_to_gray(mask))
}

pub fn read_gray_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .expect("buffer length matches dimensions"))
}

/// Pixels brighter than mid-grey are foreground.
pub fn read_mask_png(path: &Path) -> Result<Array2<bool>> {
    Ok(read_gray_png(path)?.mapv(|v| v > 127))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::anchors::*;

    fn small_fan() -> FanGeometry {
        FanGeometry {
            num_scanlines: 48,
            samples_per_line: 120,
            radial_step_mm: 0.25,
            fov_angle_deg: 50.0,
            probe_radius_mm: 30.0,
            frequency_mhz: 5.0,
        }
    }

    fn imager(params: SynthesisParams) -> Imager {
        Imager::new(
            small_fan(),
            &PressParams::default(),
            PhysicsParams::default(),
            params,
            AcousticLut::default(),
        )
        .unwrap()
    }

    fn cube(f: impl Fn(Vec3) -> f64) -> CtVolume {
        CtVolume::from_fn([81, 41, 61], [1.0; 3], Vec3::new(-40.0, -20.0, -5.0), f).unwrap()
    }

    #[test]
    fn single_plane_is_in_plane_reflectivity() {
        let vol = cube(|p| if p.z > 15.0 { BONE_HU } else { MUSCLE_HU });
        let im = imager(SynthesisParams::default());
        let pose = ProbePose::identity();
        let enh = im.elevational_enhancement(&vol, &pose, 3.0, 1).unwrap();
        let hu = im.fan_hu(&vol, &im.slice_geometry(&pose));
        let z = hu.mapv(|h| AcousticLut::default().impedance(h));
        assert_eq!(enh, reflectivity(&z, im.fan()).unwrap());
        assert!(enh.iter().any(|&v| v > 0.02));
    }

    #[test]
    fn homogeneous_volume_has_no_enhancement() {
        let vol = cube(|_| MUSCLE_HU);
        let im = imager(SynthesisParams::default());
        let enh = im.elevational_enhancement(&vol, &ProbePose::identity(), 3.0, 5).unwrap();
        assert!(enh.iter().all(|&v| v == 0.0));
    }

    fn half_max_width(profile: &[f64]) -> usize {
        let peak = profile.iter().cloned().fold(0.0, f64::max);
        let above: Vec<usize> = (0..profile.len()).filter(|&i| profile[i] >= 0.5 * peak).collect();
        above.last().unwrap() - above.first().unwrap() + 1
    }

    #[test]
    fn enhancement_band_widens_with_thickness() {
        // smooth bone plate whose depth varies with the elevational coordinate
        let vol = CtVolume::from_fn([49, 33, 189], [0.25; 3], Vec3::new(-6.0, -4.0, -3.0), |p| {
            let t = (-((p.z - 15.0 - p.y) / 1.5).powi(2)).exp();
            MUSCLE_HU + t * (BONE_HU - MUSCLE_HU)
        })
        .unwrap();
        let im = imager(SynthesisParams::default());
        let centre = small_fan().num_scanlines / 2;
        let widths: Vec<usize> = [2.0, 4.0]
            .iter()
            .map(|&t| {
                let enh = im.elevational_enhancement(&vol, &ProbePose::identity(), t, 5).unwrap();
                half_max_width(&enh.column(centre).to_vec())
            })
            .collect();
        assert!(widths[1] > widths[0], "{widths:?}");
    }

    #[test]
    fn noise_is_seeded_and_unit_mean() {
        let a = radial_noise((512, 512), 7);
        assert_eq!(a, radial_noise((512, 512), 7));
        let b = radial_noise((512, 512), 8);
        assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
        let mean = a.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(a.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn frame_seeds_differ() {
        assert_ne!(frame_seed(1, 0), frame_seed(1, 1));
        assert_ne!(frame_seed(1, 0), frame_seed(2, 0));
        assert_eq!(frame_seed(5, 9), frame_seed(5, 9));
    }

    fn prop_with_echo(echo: Array2<f64>) -> PropagationResult {
        let dim = echo.dim();
        PropagationResult {
            transmission: Array2::ones(dim),
            echo,
            absorption: Array2::zeros(dim),
        }
    }

    const PLAIN: BlendGains = BlendGains {
        echo: 1.0,
        enhancement: 0.0,
        tgc_db_per_cm: 0.0,
    };

    #[test]
    fn blend_zero_and_identity() {
        let fan = small_fan();
        let dim = (4, 5);
        let zero = prop_with_echo(Array2::zeros(dim));
        let out = blend(&zero, &Array2::zeros(dim), &Array2::ones(dim), &PLAIN, &fan).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let echo = Array2::from_shape_fn(dim, |(r, c)| (r * 5 + c) as f64 * 0.07);
        let out = blend(&prop_with_echo(echo.clone()), &Array2::zeros(dim), &Array2::ones(dim), &PLAIN, &fan)
            .unwrap();
        assert_eq!(out, echo.mapv(|v| v.clamp(0.0, 1.0)));
    }

    #[test]
    fn blend_is_linear_when_unsaturated() {
        let fan = small_fan();
        let dim = (6, 7);
        let echo = Array2::from_shape_fn(dim, |(r, c)| ((r * 7 + c) as f64 * 0.37).sin().abs() * 0.2);
        let enh = Array2::from_shape_fn(dim, |(r, c)| ((r + 3 * c) as f64).cos().abs() * 0.1);
        let noise = radial_noise(dim, 3).mapv(|v| v.min(1.5));
        let g1 = BlendGains {
            echo: 1.0,
            enhancement: 0.5,
            tgc_db_per_cm: 0.0,
        };
        let g2 = BlendGains { echo: 2.0, ..g1 };
        let prop = prop_with_echo(echo.clone());
        let a = blend(&prop, &enh, &noise, &g1, &fan).unwrap();
        let b = blend(&prop, &enh, &noise, &g2, &fan).unwrap();
        for idx in ndarray::indices(dim) {
            if b[idx] < 1.0 {
                let expected = a[idx] + echo[idx] * noise[idx];
                assert!((b[idx] - expected).abs() < 1e-12);
            }
        }
        assert!(matches!(
            blend(&prop, &Array2::zeros((2, 2)), &noise, &g1, &fan),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn quantize_rounds_half_up() {
        let f = Array2::from_shape_vec((1, 4), vec![0.5 / 255.0, 0.4999 / 255.0, 1.0, 2.0]).unwrap();
        assert_eq!(quantize(&f).into_raw_vec_and_offset().0, vec![1, 0, 255, 255]);
    }

    #[test]
    fn constant_fan_converts_to_constant_wedge() {
        let fan = small_fan();
        let grid = ScanGrid::fit(&fan, [200, 220]);
        let img = scan_convert(&Array2::from_elem(fan.dim(), 0.6), &fan, &grid);
        let mut inside = 0;
        for ((r, c), &v) in img.indexed_iter() {
            let (x, y) = grid.pixel_to_local(r as f64, c as f64);
            if fan.from_local(x, y).is_some() {
                assert!((v - 0.6).abs() < 1e-12);
                inside += 1;
            } else {
                assert_eq!(v, 0.0);
            }
        }
        assert!(inside > 200 * 220 / 4);
    }

    #[test]
    fn bright_scanline_is_a_ray_through_the_apex() {
        let fan = small_fan();
        let grid = ScanGrid::fit(&fan, [300, 300]);
        let line = 9;
        let field = Array2::from_shape_fn(fan.dim(), |(_, s)| if s == line { 1.0 } else { 0.0 });
        let img = scan_convert(&field, &fan, &grid);
        let phi = fan.angle(line as f64);
        let mut hits = 0;
        for ((r, c), &v) in img.indexed_iter() {
            if v > 0.5 {
                let (x, y) = grid.pixel_to_local(r as f64, c as f64);
                // within half a scanline pitch of the ray through the pivot
                let dist = (x * phi.cos() - y * phi.sin()).abs();
                let half_pitch = 0.5 * x.hypot(y) * fan.angle_step();
                assert!(dist <= half_pitch + 1e-9, "{dist} > {half_pitch}");
                hits += 1;
            }
        }
        assert!(hits > 50);
    }

    #[test]
    fn round_trip_is_within_two_levels() {
        let fan = small_fan();
        let grid = ScanGrid::fit(&fan, [512, 512]);
        let (rows, cols) = fan.dim();
        let field = Array2::from_shape_fn(fan.dim(), |(k, s)| {
            0.5 + 0.4 * (k as f64 / 25.0).sin() * (s as f64 / 12.0).cos()
        });
        let img = scan_convert(&field, &fan, &grid);
        let mut worst = 0.0f64;
        for k in 2..rows - 2 {
            for s in 2..cols - 2 {
                let (x, y) = fan.to_local(k as f64, s as f64);
                let (r, c) = grid.local_to_pixel(x, y);
                let back = bilinear_clamped(&img, c, r);
                worst = worst.max((back - field[(k, s)]).abs() * 255.0);
            }
        }
        assert!(worst < 2.0, "{worst}");
    }

    #[test]
    fn labels_first_crossing() {
        let empty = make_label(&Array2::from_elem((10, 4), 40.0), 250.0, 2);
        assert!(empty.iter().all(|&b| !b));

        let slab = Array2::from_shape_fn((20, 5), |(k, _)| if k >= 7 { 700.0 } else { 40.0 });
        let lab = make_label(&slab, 250.0, 2);
        for ((k, _), &b) in lab.indexed_iter() {
            assert_eq!(b, k == 7 || k == 8);
        }

        let stacked = Array2::from_shape_fn((30, 3), |(k, s)| {
            if (5 + s..9 + s).contains(&k) || (15..20).contains(&k) {
                900.0
            } else {
                0.0
            }
        });
        let lab = make_label(&stacked, 250.0, 2);
        for s in 0..3 {
            let oracle = (0..30).find(|&k| stacked[(k, s)] >= 250.0).unwrap();
            let rows: Vec<usize> = (0..30).filter(|&k| lab[(k, s)]).collect();
            assert_eq!(rows, vec![oracle, oracle + 1]);
        }
    }

    #[test]
    fn frame_is_deterministic_and_consistent() {
        let vol = cube(|p| if p.z > 18.0 - 0.1 * p.x { BONE_HU } else { MUSCLE_HU });
        let im = imager(SynthesisParams {
            image_size: [96, 96],
            ..SynthesisParams::default()
        });
        let pose = ProbePose::identity();
        let a = im.synthesize(&vol, &pose, 42).unwrap();
        let b = im.synthesize(&vol, &pose, 42).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, b.label);
        assert_eq!(a.image.dim(), a.label.dim());
        assert!(a.label.iter().any(|&v| v));
        let grid = im.grid();
        for ((r, c), &l) in a.label.indexed_iter() {
            if l {
                let (x, y) = grid.pixel_to_local(r as f64, c as f64);
                assert!(fan_contains(im.fan(), x, y));
            }
        }
        let c = im.synthesize(&vol, &pose, 43).unwrap();
        assert_ne!(a.image, c.image);
    }

    fn fan_contains(fan: &FanGeometry, x: f64, y: f64) -> bool {
        fan.from_local(x, y).is_some()
    }

    #[test]
    fn calibration_maps_label_pixels_onto_the_bone_plane() {
        let depth = 18.0;
        let vol = cube(|p| if p.z > depth { BONE_HU } else { MUSCLE_HU });
        let im = imager(SynthesisParams {
            image_size: [200, 200],
            ..SynthesisParams::default()
        });
        let pose = ProbePose::identity();
        let calib = im.calibration();
        let [sx, sy] = im.image_pixel_mm();
        let frame = im.synthesize(&vol, &pose, 1).unwrap();
        // upper edge of the label in the centre column
        let c = frame.label.ncols() / 2;
        let r = (0..frame.label.nrows()).find(|&r| frame.label[(r, c)]).unwrap();
        let p = pose.transform_point(&calib.apply(&Vec3::new(c as f64 * sx, r as f64 * sy, 0.0)));
        assert!(p.x.abs() < sx);
        assert!((p.z - depth).abs() < 1.0, "{p:?}");
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Array2::from_shape_fn((7, 9), |(r, c)| (r + c) % 3 == 0);
        let path = dir.path().join("m.png");
        write_mask_png(&path, &mask).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), mask);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn label_not_below_max_hu(vals in proptest::collection::vec(-1000.0f64..1500.0, 60)) {
                let hu = Array2::from_shape_vec((20, 3), vals).unwrap();
                let lab = make_label(&hu, 250.0, 2);
                for s in 0..3 {
                    let col = hu.column(s);
                    let max_k = (0..20).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
                    if let Some(first) = (0..20).find(|&k| lab[(k, s)]) {
                        prop_assert!(first <= max_k);
                    }
                }
            }

            #[test]
            fn blend_is_monotone_in_echo(e in 0.0f64..2.0, bump in 0.0f64..1.0, n in 0.0f64..2.0) {
                let fan = small_fan();
                let one = |v: f64| Array2::from_elem((1, 1), v);
                let a = blend(&prop_with_echo(one(e)), &one(0.1), &one(n), &PLAIN, &fan).unwrap();
                let b = blend(&prop_with_echo(one(e + bump)), &one(0.1), &one(n), &PLAIN, &fan).unwrap();
                prop_assert!(b[(0, 0)] >= a[(0, 0)]);
                prop_assert!((0.0..=1.0).contains(&b[(0, 0)]));
            }
        }
    }
}
