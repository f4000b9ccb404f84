//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Each criterion's runtime budget is part of it.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use ctus_core::acoustic::{build_acoustic_slice, AcousticLut};
use ctus_core::dataset::{phantom_files, write_phantom, Manifest};
use ctus_core::kinematics::{clip_region, slice_curves, Aabb, ProbePose, SurfaceMesh};
use ctus_core::metrics::{chamfer, dice, per_axis_error};
use ctus_core::phantom::{PhantomSpec, BONE_HU, MUSCLE_HU};
use ctus_core::press::{apply_press, ProbeContact, PressParams, UvMap};
use ctus_core::propagation::{beer_absorption, fresnel_reflection, propagate, FanGeometry, PhysicsParams};
use ctus_core::registration::{
    frames_to_pointcloud, register, register_segments, screw_error, IcpParams, ScrewPlan,
};
use ctus_core::synthesis::{Imager, SynthesisParams};
use ctus_core::transform::RigidTransform;
use ctus_core::volume::{CtVolume, Vec3};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// ---------------------------------------------------------------- physics

/// Fresnel's sine and tangent laws, with the impedance ratio in place of the
/// refractive index ratio.
fn fresnel_oracle(z1: f64, z2: f64, ti: f64) -> f64 {
    let s = z1 / z2 * ti.sin();
    if s.abs() > 1.0 {
        return 1.0;
    }
    let tt = s.asin();
    if ti == 0.0 {
        return ((z2 - z1) / (z2 + z1)).powi(2);
    }
    let rs = -(ti - tt).sin() / (ti + tt).sin();
    let rp = (ti - tt).tan() / (ti + tt).tan();
    0.5 * (rs * rs + rp * rp)
}

fn physics_closed_forms() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_r: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    for _ in 0..1000 {
        let z1 = rng.random_range(0.1..8.0);
        let z2 = rng.random_range(0.1..8.0);
        let ti = rng.random_range(0.001..1.5);
        let got = fresnel_reflection(z1, z2, ti).map_err(|e| e.to_string())?.reflection;
        let want = fresnel_oracle(z1, z2, ti);
        let e = (got - want).abs() / want.abs().max(1e-12);
        worst_r = worst_r.max(e);

        let i0 = rng.random_range(0.1..10.0);
        let a = rng.random_range(0.0..10.0);
        let d = rng.random_range(0.0..5.0);
        let f = rng.random_range(1.0..15.0);
        let alpha = rng.random_range(0.05..2.0);
        let got = beer_absorption(i0, a, d, f, alpha);
        let want = i0 * (-alpha * a * d * f * std::f64::consts::LN_10 / 10.0).exp();
        worst_b = worst_b.max(rel_err(got, want));
    }
    ensure(worst_r <= 1e-9, || format!("fresnel rel err {worst_r:e}"))?;
    ensure(worst_b <= 1e-9, || format!("beer rel err {worst_b:e}"))?;

    let r = fresnel_reflection(1.352, 1.647, 0.0).map_err(|e| e.to_string())?.reflection;
    ensure((r - 0.00968).abs() < 5e-6, || format!("fat→muscle R = {r}"))?;
    let t = beer_absorption(1.0, 1.47, 2.0, 5.0, 1.0);
    ensure((t - 0.0339).abs() < 5e-5, || format!("muscle 2 cm transmission = {t}"))?;
    Ok(format!(
        "max rel err fresnel {worst_r:.1e}, beer {worst_b:.1e}; R(fat→muscle) = {r:.5}; T(muscle, 2 cm) = {t:.4}"
    ))
}

// ------------------------------------------------------------ propagation

fn propagation_invariants() -> Check {
    let geom = FanGeometry::default();
    let params = PhysicsParams {
        beer_alpha: 1.0,
        ..PhysicsParams::default()
    };
    let lut = AcousticLut::default();
    let dim = geom.dim();
    let no_squeeze = Array2::from_elem(dim, false);

    // homogeneous muscle
    let hu = Array2::from_elem(dim, 60.0);
    let a = lut.attenuation(60.0);
    let slice = build_acoustic_slice(hu, &lut, no_squeeze.clone()).map_err(|e| e.to_string())?;
    let res = propagate(&slice, &geom, &params).map_err(|e| e.to_string())?;
    ensure(res.echo.iter().all(|&e| e == 0.0), || "echo in homogeneous medium".into())?;
    let mut worst: f64 = 0.0;
    for ((k, _), &t) in res.transmission.indexed_iter() {
        let d_cm = k as f64 * geom.radial_step_mm / 10.0;
        let want = 10f64.powf(-a * d_cm * geom.frequency_mhz / 10.0);
        worst = worst.max(rel_err(t, want));
    }
    ensure(worst <= 1e-6, || format!("homogeneous Beer rel err {worst:e}"))?;

    // bone slab spanning every scanline
    let (k1, k2) = (100, 125);
    let hu = Array2::from_shape_fn(dim, |(k, _)| if (k1..k2).contains(&k) { 700.0 } else { 60.0 });
    let slice = build_acoustic_slice(hu, &lut, no_squeeze).map_err(|e| e.to_string())?;
    let res = propagate(&slice, &geom, &params).map_err(|e| e.to_string())?;
    let row_mean = |m: &Array2<f64>, k: usize| m.row(k).mean().unwrap();
    let above = row_mean(&res.transmission, k1 - 1);
    let below = row_mean(&res.transmission, k2 + 1);
    let ratio = below / above;
    ensure(ratio < 0.01, || format!("shadow ratio {ratio:.4}"))?;
    // analytic product bound on a scanline: two interfaces and the slab
    let rb = fresnel_reflection(lut.impedance(60.0), lut.impedance(700.0), 0.0).unwrap().reflection;
    let slab_cm = (k2 - k1) as f64 * geom.radial_step_mm / 10.0;
    let bound = (1.0 - rb).powi(2)
        * 10f64.powf(-lut.attenuation(700.0) * slab_cm * geom.frequency_mhz / 10.0)
        * 10f64.powf(-a * 2.0 * geom.radial_step_mm / 10.0 * geom.frequency_mhz / 10.0);
    ensure(ratio <= bound * (1.0 + 1e-9), || format!("shadow {ratio:e} exceeds analytic bound {bound:e}"))?;
    let echo_rows: Vec<f64> = (0..dim.0).map(|k| row_mean(&res.echo, k)).collect();
    let peak = (0..dim.0).max_by(|&a, &b| echo_rows[a].total_cmp(&echo_rows[b])).unwrap();
    ensure(peak == k1 - 1, || format!("echo peak at row {peak}, slab top interface at {}", k1 - 1))?;
    for s in 0..dim.1 {
        let col = res.echo.column(s);
        let p = (0..dim.0).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        ensure(p == k1 - 1, || format!("scanline {s}: echo peak at row {p}"))?;
    }
    Ok(format!(
        "homogeneous max rel err {worst:.1e}; shadow ratio {ratio:.2e} (bound {bound:.2e}); echo peak at slab top"
    ))
}

// ------------------------------------------------------------------ press

/// Centre-line displacement of the press warp at depth `y` below the
/// contact: the squared ratio applied to the push depth.
fn press_oracle(y: f64, r_max: f64, push: f64, f: f64, alpha: f64) -> f64 {
    let slack = r_max * r_max - y * y;
    if slack <= 0.0 {
        return 0.0;
    }
    let d = 100.0 / f * alpha * push * push;
    (slack / (slack + d)).powi(2) * push
}

fn press_warp() -> Check {
    let (rows, cols) = (200, 201);
    let centre = 100.0;
    let contact = |push: f64, hu_weight: bool| ProbeContact {
        probe_radius_mm: 40.0,
        contact_center_px: [centre, 0.0],
        push_target_px: [centre, push],
        r_max_px: 60.0,
        strength_f: 1000.0,
        hu_weight_enabled: hu_weight,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let field = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1000.0..1500.0));
    let (same, _) = apply_press(&field, &contact(0.0, true));
    ensure(
        same.iter().zip(field.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        || "zero push is not bit-exact identity".into(),
    )?;
    let fan = FanGeometry::default();
    let imager = Imager::new(
        fan,
        &PressParams {
            push_depth_mm: Some(0.0),
            ..PressParams::default()
        },
        PhysicsParams::default(),
        SynthesisParams::default(),
        AcousticLut::default(),
    )
    .map_err(|e| e.to_string())?;
    let vol = PhantomSpec::default().volume().map_err(|e| e.to_string())?;
    let pose = ProbePose::from_axes(Vec3::new(0.0, 0.0, 0.0), Vec3::x(), Vec3::z());
    let (raw, pressed) = imager.press_preview(&vol, &pose);
    ensure(
        raw.iter().zip(pressed.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        || "zero push changed the imager slice".into(),
    )?;

    // centre line: a depth ramp makes the backward lookup read the displacement
    let push = 12.0;
    let ramp = Array2::from_shape_fn((rows, cols), |(r, _)| r as f64);
    let (warped, _) = apply_press(&ramp, &contact(push, false));
    let c = centre as usize;
    let mut worst: f64 = 0.0;
    for r in 0..rows {
        let want = press_oracle(r as f64, 60.0, push, 1000.0, 1.0);
        if (r as f64) < want {
            continue; // source above the image, clamped
        }
        let got = r as f64 - warped[(r, c)];
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1.0, || format!("centre-line displacement off by {worst} px"))?;

    // stiffer tissue moves less
    let levels = [-100.0, 0.0, 300.0, 700.0, 1500.0];
    let mags: Vec<Array2<f64>> = levels
        .iter()
        .map(|&h| {
            let uv = UvMap::build(&contact(push, true), &Array2::from_elem((rows, cols), h));
            Array2::from_shape_fn((rows, cols), |(r, c)| {
                let [x, y] = uv.src[(r, c)];
                (c as f64 - x).hypot(r as f64 - y)
            })
        })
        .collect();
    let mut compared = 0usize;
    for ((r, c), &soft) in mags[0].indexed_iter() {
        if soft == 0.0 {
            continue;
        }
        for w in mags.windows(2) {
            ensure(w[1][(r, c)] < w[0][(r, c)], || format!("displacement not decreasing with HU at ({r}, {c})"))?;
        }
        compared += 1;
    }
    ensure(compared > 1000, || format!("only {compared} displaced pixels"))?;
    Ok(format!(
        "identity bit-exact; centre-line max error {worst:.2e} px; HU ordering strict on {compared} pixels"
    ))
}

// ---------------------------------------------------------- thick stripe

fn half_max_width(profile: &[f64]) -> usize {
    let peak = profile.iter().cloned().fold(0.0, f64::max);
    let above: Vec<usize> = (0..profile.len()).filter(|&i| profile[i] >= 0.5 * peak).collect();
    above.last().unwrap() - above.first().unwrap() + 1
}

fn thick_stripe() -> Check {
    // bone surface tilted 45° along the elevational axis
    let vol = CtVolume::from_fn([49, 41, 189], [0.25; 3], Vec3::new(-6.0, -5.0, -3.0), |p| {
        let t = 0.5 * (1.0 + ((p.z - 15.0 - p.y) / 1.5).tanh());
        MUSCLE_HU + t * (BONE_HU - MUSCLE_HU)
    })
    .map_err(|e| e.to_string())?;
    let fan = FanGeometry {
        num_scanlines: 48,
        samples_per_line: 120,
        radial_step_mm: 0.25,
        fov_angle_deg: 50.0,
        probe_radius_mm: 30.0,
        frequency_mhz: 5.0,
    };
    // no press, so the band reflects elevational sampling alone
    let imager = Imager::new(
        fan,
        &PressParams {
            push_depth_mm: Some(0.0),
            ..PressParams::default()
        },
        PhysicsParams::default(),
        SynthesisParams::default(),
        AcousticLut::default(),
    )
    .map_err(|e| e.to_string())?;
    let centre = fan.num_scanlines / 2;
    let mut report = Vec::new();
    for (thin, thick) in [(1.5, 3.0), (2.0, 4.0), (3.0, 6.0)] {
        let w: Vec<usize> = [thin, thick]
            .iter()
            .map(|&t| {
                let enh = imager.elevational_enhancement(&vol, &ProbePose::identity(), t, 5).unwrap();
                half_max_width(&enh.column(centre).to_vec())
            })
            .collect();
        ensure(w[1] > w[0], || format!("FWHM {} → {} samples for {thin} → {thick} mm", w[0], w[1]))?;
        report.push(format!("{thin}→{thick} mm: {}→{}", w[0], w[1]));
    }
    Ok(format!("band FWHM (samples) {}", report.join(", ")))
}

// ----------------------------------------------------------- determinism

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    write_phantom(root, &PhantomSpec::default(), 64).map_err(|e| e.to_string())?;
    let cfg_text = fs::read_to_string(root.join(phantom_files::CONFIG)).unwrap();
    fs::write(root.join("b.json"), cfg_text.replace("\"dataset\"", "\"dataset_b\"")).unwrap();
    let run = |cfg: &str, workers: &str| -> Result<Duration, String> {
        let t = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_ctus"))
            .args(["simulate", "--config", cfg, "--workers", workers])
            .current_dir(root)
            .env_remove("CTUS_THREADS")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        Ok(t.elapsed())
    };
    let t1 = run(phantom_files::CONFIG, "1")?;
    let t4 = run("b.json", "4")?;
    let (a, b) = (root.join("dataset"), root.join("dataset_b"));
    let m = Manifest::load(&a).map_err(|e| e.to_string())?;
    ensure(m.frame_count == 64, || format!("{} frames", m.frame_count))?;
    m.verify(&a).map_err(|e| e.to_string())?;
    ensure(listing(&a) == listing(&b), || "file sets differ".into())?;
    for f in listing(&a) {
        ensure(fs::read(a.join(&f)).unwrap() == fs::read(b.join(&f)).unwrap(), || format!("{f} differs"))?;
    }
    ensure(t1.as_secs_f64() < 60.0, || format!("64 frames took {:.1} s", t1.as_secs_f64()))?;
    Ok(format!(
        "{} files byte-identical for 1 and 4 workers; 64 frames in {:.1} s (1 worker), {:.1} s (4 workers)",
        listing(&a).len(),
        t1.as_secs_f64(),
        t4.as_secs_f64()
    ))
}

// -------------------------------------------------------------------- ICP

fn random_rigid(rng: &mut ChaCha8Rng, max_deg: f64, max_mm: f64) -> RigidTransform {
    let axis = loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 {
            break v;
        }
    };
    let angle = rng.random_range(0.0..max_deg).to_radians();
    let dir = loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 {
            break v.normalize();
        }
    };
    RigidTransform::from_axis_angle(&axis, angle, dir * rng.random_range(0.0..max_mm))
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn icp() -> Check {
    let spec = PhantomSpec::default();
    let params = IcpParams {
        trim_fraction: 0.25,
        ..IcpParams::default()
    };
    let mut lines = Vec::new();
    for trial in 0..5u64 {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + trial);
        let surface = spec.surface_samples(2000, 40 + trial);
        let truth = random_rigid(&mut rng, 30.0, 30.0);
        let dst: Vec<Vec3> = surface.iter().map(|p| truth.apply(p)).collect();
        let mut src = surface.clone();
        for p in src.iter_mut().take(400) {
            *p += random_unit(&mut rng) * 50.0;
        }
        let res = register(&src, &dst, &params).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed().as_secs_f64();
        let dt = (res.transform.translation() - truth.translation()).norm();
        let dr = res.transform.compose(&truth.inverse()).rotation_angle_rad().to_degrees();
        ensure(dt < 0.5 && dr < 0.5, || format!("trial {trial}: error {dt:.3} mm / {dr:.3}°"))?;
        ensure(
            res.rms_history.windows(2).all(|w| w[1] <= w[0]),
            || format!("trial {trial}: RMS increased: {:?}", res.rms_history),
        )?;
        ensure(elapsed < 5.0, || format!("trial {trial}: {elapsed:.2} s"))?;
        lines.push(format!("{dt:.1e} mm/{dr:.1e}° in {elapsed:.2} s"));
    }
    Ok(format!("5 trials, 20% outliers at 50 mm: {}", lines.join("; ")))
}

// ------------------------------------------------------------ end to end

fn end_to_end() -> Check {
    let spec = PhantomSpec::default();
    let vol = spec.volume().map_err(|e| e.to_string())?;
    let half = 0.5 * spec.vertebrae as f64 * spec.pitch_mm;
    let skin = SurfaceMesh::skin_from_volume(&vol, -300.0, 2).map_err(|e| e.to_string())?;
    let region = Aabb {
        min: Vec3::new(-40.0, -half, -20.0),
        max: Vec3::new(40.0, half, 40.0),
    };
    let mesh = clip_region(&skin, &region).map_err(|e| e.to_string())?;
    let mut poses = Vec::new();
    let mut last = None;
    for c in slice_curves(&mesh, &Vec3::y(), 2.0).map_err(|e| e.to_string())? {
        if last != Some(c.plane_index) {
            last = Some(c.plane_index);
            poses.push(c.pose_at(0.5 * c.length()));
        }
    }
    let fan = FanGeometry {
        samples_per_line: 450,
        ..FanGeometry::default()
    };
    let imager = Imager::new(
        fan,
        &PressParams::default(),
        PhysicsParams::default(),
        SynthesisParams::default(),
        AcousticLut::default(),
    )
    .map_err(|e| e.to_string())?;
    let frames: Vec<(Array2<bool>, ProbePose)> = poses
        .par_iter()
        .enumerate()
        .map(|(i, p)| imager.synthesize(&vol, p, i as u64).map(|f| (f.label, *p)))
        .collect::<ctus_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let us = frames_to_pointcloud(&frames, &imager.calibration(), imager.image_pixel_mm()).map_err(|e| e.to_string())?;

    // patient placed in tracker space by an unknown rigid motion
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let placement = random_rigid(&mut rng, 20.0, 25.0);
    let src: Vec<Vec3> = us.vectors().iter().map(|p| placement.apply(p)).collect();
    let ct = spec.ct_cloud(&vol, 1.0).map_err(|e| e.to_string())?;
    let truth = placement.inverse();
    let result = register_segments(&src, &ct, &IcpParams::default(), 50).map_err(|e| e.to_string())?;

    let plan = spec.screw_plan();
    let level = (spec.vertebrae / 2 + 1) as u32;
    let tracked_plan = ScrewPlan::from_entry_tip(
        placement.apply(&Vec3::from(plan.entry_mm)),
        placement.apply(&Vec3::from(plan.tip_mm)),
        plan.diameter_mm,
    )
    .map_err(|e| e.to_string())?;

    let ct_tracked: Vec<Vec3> = ct.vectors().iter().map(|p| placement.apply(p)).collect();
    let global_err = per_axis_error(&result.global.transform, &truth, &ct_tracked);
    let mut worst = global_err.iter().cloned().fold(0.0, f64::max);
    let mut seg_lines = Vec::new();
    for (id, r) in &result.segments {
        let pts: Vec<Vec3> = ct.segment(*id).iter().map(|p| placement.apply(p)).collect();
        let e = per_axis_error(&r.transform, &truth, &pts);
        worst = worst.max(e.iter().cloned().fold(0.0, f64::max));
        seg_lines.push(format!("L{id} [{:.2}, {:.2}, {:.2}]", e[0], e[1], e[2]));
    }
    let screw_t = result.segments.get(&level).map_or(&result.global.transform, |r| &r.transform);
    let screw = screw_error(&tracked_plan, screw_t, &truth);
    ensure(worst <= 3.37, || format!("per-axis error {worst:.3} mm ({})", seg_lines.join(", ")))?;
    ensure(screw.angle_deg <= 4.5, || format!("screw angle {:.3}°", screw.angle_deg))?;
    Ok(format!(
        "{} frames, {} US points; global per-axis [{:.2}, {:.2}, {:.2}] mm; {}; screw angle {:.2}°, tip {:.2} mm",
        frames.len(),
        src.len(),
        global_err[0],
        global_err[1],
        global_err[2],
        seg_lines.join(", "),
        screw.angle_deg,
        screw.tip_err_norm_mm
    ))
}

// ---------------------------------------------------------------- metrics

fn oracle_surface(m: &Array2<bool>) -> Vec<(i64, i64)> {
    let (rows, cols) = (m.nrows() as i64, m.ncols() as i64);
    let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < rows && c < cols && m[(r as usize, c as usize)];
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let border = r == 0 || c == 0 || r == rows - 1 || c == cols - 1;
            if at(r, c) && (border || !at(r - 1, c) || !at(r + 1, c) || !at(r, c - 1) || !at(r, c + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

fn oracle_directed(a: &[(i64, i64)], b: &[(i64, i64)], sp: f64) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let total: f64 = a
        .iter()
        .map(|&(r, c)| {
            b.iter()
                .map(|&(r2, c2)| (((r - r2).pow(2) + (c - c2).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Some(total / a.len() as f64 * sp)
}

fn metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let (rows, cols) = (rng.random_range(6..20), rng.random_range(6..20));
        let density = rng.random_range(0.05..0.6);
        let p = Array2::from_shape_simple_fn((rows, cols), || rng.random_bool(density));
        let g = Array2::from_shape_simple_fn((rows, cols), || rng.random_bool(density));
        let sp = rng.random_range(0.05..1.0);
        let inter = p.iter().zip(g.iter()).filter(|(a, b)| **a && **b).count();
        let (np, ng) = (p.iter().filter(|v| **v).count(), g.iter().filter(|v| **v).count());
        let want = if np + ng == 0 { 1.0 } else { 2.0 * inter as f64 / (np + ng) as f64 };
        let got = dice(&p, &g).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("mask {i}: dice {got} vs {want}"))?;
        let (tp, fnd) = chamfer(&p, &g, sp).map_err(|e| e.to_string())?;
        let (sp_p, sp_g) = (oracle_surface(&p), oracle_surface(&g));
        for (got, want) in [(tp, oracle_directed(&sp_p, &sp_g, sp)), (fnd, oracle_directed(&sp_g, &sp_p, sp))] {
            match (got, want) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return Err(format!("mask {i}: chamfer definedness {got:?} vs {want:?}")),
            }
        }
    }
    ensure(worst <= 1e-9, || format!("chamfer error {worst:e} mm"))?;
    Ok(format!("20 random masks: dice exact, chamfer max error {worst:.1e} mm"))
}

fn main() {
    let criteria: [(&str, f64, fn() -> Check); 8] = [
        ("physics closed forms", 1.0, physics_closed_forms),
        ("propagation invariants", 10.0, propagation_invariants),
        ("press warp", 5.0, press_warp),
        ("thick-stripe enhancement", 10.0, thick_stripe),
        ("dataset determinism", 180.0, determinism),
        ("trimmed ICP with outliers", 30.0, icp),
        ("end-to-end navigation", 180.0, end_to_end),
        ("segmentation metrics", 10.0, metrics),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(_) if secs > budget => Err(format!("took {secs:.2} s, budget {budget} s")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.2} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.2} s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
