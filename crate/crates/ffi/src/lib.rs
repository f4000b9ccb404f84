//! C ABI over `ctus-core`. Objects cross the boundary as opaque handles that
//! the caller frees with the matching `*_free`. Every fallible call returns a
//! [`CtusStatus`]; the message of the last failure on the calling thread is
//! available from [`ctus_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ctus_core::config::LoadedConfig;
use ctus_core::kinematics::{PoseRecord, ProbePose};
use ctus_core::phantom::PhantomSpec;
use ctus_core::propagation::{beer_absorption, fresnel_reflection};
use ctus_core::registration::{register, screw_error, IcpParams, PointCloud, ScrewPlan};
use ctus_core::synthesis::Imager;
use ctus_core::transform::{RigidTransform, TransformRecord};
use ctus_core::volume::{CtVolume, Vec3};
use ctus_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtusStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Registration = 5,
    BufferTooSmall = 6,
    Panic = 99,
}

pub struct CtusVolume(CtVolume);

pub struct CtusImager(Imager);

pub struct CtusCloud(PointCloud);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CtusStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } => CtusStatus::Io,
        Error::Json { .. } | Error::MissingSidecar(_) | Error::SizeMismatch { .. } | Error::Mesh(_) => {
            CtusStatus::Format
        }
        Error::NoPoints | Error::DegenerateCloud(_) | Error::EmptyMask => CtusStatus::Registration,
        _ => CtusStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (CtusStatus, String)>) -> CtusStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CtusStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CtusStatus::Panic
        }
    }
}

fn core<T>(r: ctus_core::Result<T>) -> Result<T, (CtusStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CtusStatus, String) {
    (CtusStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (CtusStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CtusStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_handle<T>(out: *mut *mut T, value: T) -> Result<(), (CtusStatus, String)> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn transform_arg(rt: *const f64) -> Result<RigidTransform, (CtusStatus, String)> {
    if rt.is_null() {
        return Err(null("transform"));
    }
    let v = std::slice::from_raw_parts(rt, 12);
    core(RigidTransform::try_from(&TransformRecord {
        rotation: v[..9].try_into().expect("9 values"),
        translation: v[9..].try_into().expect("3 values"),
    }))
}

unsafe fn write_transform(t: &RigidTransform, out: *mut f64) {
    let rec = TransformRecord::from(t);
    let dst = std::slice::from_raw_parts_mut(out, 12);
    dst[..9].copy_from_slice(&rec.rotation);
    dst[9..].copy_from_slice(&rec.translation);
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ctus_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Energy reflection coefficient and refraction angle (radians; NaN under
/// total internal reflection).
///
/// # Safety
/// `out_r` and `out_theta_t` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_fresnel_reflection(
    z1: f64,
    z2: f64,
    theta_i: f64,
    out_r: *mut f64,
    out_theta_t: *mut f64,
) -> CtusStatus {
    guard(|| {
        if out_r.is_null() || out_theta_t.is_null() {
            return Err(null("output"));
        }
        let f = core(fresnel_reflection(z1, z2, theta_i))?;
        *out_r = f.reflection;
        *out_theta_t = f.theta_t.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// `i0 · 10^(−alpha·a·d_cm·f_mhz / 10)`, `a` in dB/cm/MHz.
#[no_mangle]
pub extern "C" fn ctus_beer_absorption(i0: f64, a: f64, d_cm: f64, f_mhz: f64, alpha: f64) -> f64 {
    beer_absorption(i0, a, d_cm, f_mhz, alpha)
}

/// Loads a `.ctvol.json` volume.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_volume_load(path: *const c_char, out: *mut *mut CtusVolume) -> CtusStatus {
    guard(|| {
        let p = path_arg(path)?;
        out_handle(out, CtusVolume(core(CtVolume::load(p))?))
    })
}

/// The built-in synthetic spine phantom with `vertebrae` levels.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_volume_phantom(vertebrae: usize, out: *mut *mut CtusVolume) -> CtusStatus {
    guard(|| {
        if vertebrae == 0 {
            return Err((CtusStatus::InvalidArgument, "vertebrae must be positive".into()));
        }
        let spec = PhantomSpec {
            vertebrae,
            ..PhantomSpec::default()
        };
        out_handle(out, CtusVolume(core(spec.volume())?))
    })
}

/// # Safety
/// `vol` must be a live handle; `out_dims` valid for 3 writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_volume_dims(vol: *const CtusVolume, out_dims: *mut usize) -> CtusStatus {
    guard(|| {
        let v = vol.as_ref().ok_or_else(|| null("volume"))?;
        if out_dims.is_null() {
            return Err(null("output"));
        }
        std::slice::from_raw_parts_mut(out_dims, 3).copy_from_slice(&v.0.dims());
        Ok(())
    })
}

/// HU at a world point (trilinear; air outside).
///
/// # Safety
/// `vol` must be a live handle; `p` valid for 3 reads; `out` for a write.
#[no_mangle]
pub unsafe extern "C" fn ctus_volume_hu_at(vol: *const CtusVolume, p: *const f64, out: *mut f64) -> CtusStatus {
    guard(|| {
        let v = vol.as_ref().ok_or_else(|| null("volume"))?;
        if p.is_null() || out.is_null() {
            return Err(null("point"));
        }
        let q = std::slice::from_raw_parts(p, 3);
        *out = v.0.hu_at(&Vec3::new(q[0], q[1], q[2]));
        Ok(())
    })
}

/// # Safety
/// `vol` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ctus_volume_free(vol: *mut CtusVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Imager with default probe, physics, press and synthesis parameters.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_imager_new_default(out: *mut *mut CtusImager) -> CtusStatus {
    guard(|| {
        let imager = core(Imager::new(
            Default::default(),
            &Default::default(),
            Default::default(),
            Default::default(),
            Default::default(),
        ))?;
        out_handle(out, CtusImager(imager))
    })
}

/// Imager built from the parameter sections of a simulation config.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_imager_from_config(path: *const c_char, out: *mut *mut CtusImager) -> CtusStatus {
    guard(|| {
        let cfg = core(LoadedConfig::load(path_arg(path)?))?;
        out_handle(out, CtusImager(core(cfg.config.imager())?))
    })
}

/// Output image `rows × cols`.
///
/// # Safety
/// `imager` must be a live handle; outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_imager_image_size(
    imager: *const CtusImager,
    out_rows: *mut usize,
    out_cols: *mut usize,
) -> CtusStatus {
    guard(|| {
        let im = imager.as_ref().ok_or_else(|| null("imager"))?;
        if out_rows.is_null() || out_cols.is_null() {
            return Err(null("output"));
        }
        let [r, c] = im.0.params().image_size;
        *out_rows = r;
        *out_cols = c;
        Ok(())
    })
}

/// Renders one frame. `pose` is `[x, y, z, qw, qx, qy, qz]`; `image` and
/// `label` (0/255) receive `rows·cols` bytes in row-major order.
///
/// # Safety
/// Handles must be live; `pose` valid for 7 reads; `image` and `label`
/// valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_imager_synthesize(
    imager: *const CtusImager,
    vol: *const CtusVolume,
    pose: *const f64,
    seed: u64,
    image: *mut u8,
    label: *mut u8,
    len: usize,
) -> CtusStatus {
    guard(|| {
        let im = imager.as_ref().ok_or_else(|| null("imager"))?;
        let v = vol.as_ref().ok_or_else(|| null("volume"))?;
        if pose.is_null() || image.is_null() || label.is_null() {
            return Err(null("buffer"));
        }
        let [rows, cols] = im.0.params().image_size;
        if len < rows * cols {
            return Err((CtusStatus::BufferTooSmall, format!("need {} bytes, got {len}", rows * cols)));
        }
        let q = std::slice::from_raw_parts(pose, 7);
        let pose = core(ProbePose::try_from(&PoseRecord {
            position_mm: [q[0], q[1], q[2]],
            quaternion: [q[3], q[4], q[5], q[6]],
        }))?;
        let frame = core(im.0.synthesize(&v.0, &pose, seed))?;
        let img = std::slice::from_raw_parts_mut(image, rows * cols);
        let lab = std::slice::from_raw_parts_mut(label, rows * cols);
        for (i, (&px, &l)) in frame.image.iter().zip(frame.label.iter()).enumerate() {
            img[i] = px;
            lab[i] = if l { 255 } else { 0 };
        }
        Ok(())
    })
}

/// # Safety
/// `imager` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ctus_imager_free(imager: *mut CtusImager) {
    if !imager.is_null() {
        drop(Box::from_raw(imager));
    }
}

/// Cloud from `n` packed `xyz` triples.
///
/// # Safety
/// `xyz` valid for `3n` reads; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_cloud_new(xyz: *const f64, n: usize, out: *mut *mut CtusCloud) -> CtusStatus {
    guard(|| {
        if xyz.is_null() && n > 0 {
            return Err(null("points"));
        }
        let pts: Vec<Vec3> = if n == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(xyz, 3 * n)
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect()
        };
        let cloud = PointCloud::from_points(&pts);
        core(cloud.validate())?;
        out_handle(out, CtusCloud(cloud))
    })
}

/// Reads an ASCII PLY or JSON cloud.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_cloud_load(path: *const c_char, out: *mut *mut CtusCloud) -> CtusStatus {
    guard(|| {
        let p = path_arg(path)?;
        out_handle(out, CtusCloud(core(PointCloud::load(&p))?))
    })
}

/// Number of points; 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctus_cloud_len(cloud: *const CtusCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `cloud` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ctus_cloud_free(cloud: *mut CtusCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Coarse alignment plus trimmed ICP of `src` onto `dst`. `out_rt` receives
/// the row-major rotation followed by the translation (12 values),
/// `out_mse_xyz` three per-axis mean squared residuals (may be null).
///
/// # Safety
/// Handles must be live; `out_rt` valid for 12 writes, `out_rms` for one,
/// `out_mse_xyz` null or valid for 3 writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_register(
    src: *const CtusCloud,
    dst: *const CtusCloud,
    trim_fraction: f64,
    max_iter: usize,
    out_rt: *mut f64,
    out_rms: *mut f64,
    out_mse_xyz: *mut f64,
) -> CtusStatus {
    guard(|| {
        let s = src.as_ref().ok_or_else(|| null("src"))?;
        let d = dst.as_ref().ok_or_else(|| null("dst"))?;
        if out_rt.is_null() || out_rms.is_null() {
            return Err(null("output"));
        }
        let params = IcpParams {
            trim_fraction,
            max_iter,
            ..IcpParams::default()
        };
        core(params.validate())?;
        let r = core(register(&s.0.vectors(), &d.0.vectors(), &params))?;
        write_transform(&r.transform, out_rt);
        *out_rms = r.rms_mm;
        if !out_mse_xyz.is_null() {
            std::slice::from_raw_parts_mut(out_mse_xyz, 3).copy_from_slice(&r.mse_xyz);
        }
        Ok(())
    })
}

/// Screw tip and axis error. Transforms are 12 values (row-major rotation,
/// then translation); `out` receives `[dx, dy, dz, |d|, angle_deg]`.
///
/// # Safety
/// `entry`, `tip` valid for 3 reads; `t_est`, `t_gt` for 12; `out` for 5
/// writes.
#[no_mangle]
pub unsafe extern "C" fn ctus_screw_error(
    entry: *const f64,
    tip: *const f64,
    t_est: *const f64,
    t_gt: *const f64,
    out: *mut f64,
) -> CtusStatus {
    guard(|| {
        if entry.is_null() || tip.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let e = std::slice::from_raw_parts(entry, 3);
        let t = std::slice::from_raw_parts(tip, 3);
        let plan = core(ScrewPlan::from_entry_tip(
            Vec3::new(e[0], e[1], e[2]),
            Vec3::new(t[0], t[1], t[2]),
            0.0,
        ))?;
        let err = screw_error(&plan, &transform_arg(t_est)?, &transform_arg(t_gt)?);
        let o = std::slice::from_raw_parts_mut(out, 5);
        o[..3].copy_from_slice(&err.tip_err_mm);
        o[3] = err.tip_err_norm_mm;
        o[4] = err.angle_deg;
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ctus_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
