//! C ABI over `cephalo3d`.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`C3dStatus`]; on failure [`c3d_last_error_message`] describes the cause.
//! The header is generated into `include/cephalo3d.h` at build time.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cephalo3d::evaluate;
use cephalo3d::landmarks::Frame;
use cephalo3d::phantom::{self, PhantomSpec};
use cephalo3d::pipeline::{self, Model};
use cephalo3d::volgrid::read_cvol;
use cephalo3d::{Error, LandmarkId, LandmarkSet, Volume};

pub const C3D_LANDMARK_COUNT: usize = 12;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum C3dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    State = 6,
    Config = 7,
    Data = 8,
    Diverged = 9,
    NotFound = 10,
    Panic = 11,
}

/// A CT-like volume.
pub struct C3dVolume(Volume);

/// A trained landmark model.
pub struct C3dModel(Model<f32>);

/// A landmark set in world millimetres.
pub struct C3dLandmarks(LandmarkSet);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct C3dLandmarkError {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub d3: f64,
}

const NAMES: [&CStr; C3D_LANDMARK_COUNT] = [
    c"Na", c"Bregma", c"CFM", c"R_Or", c"L_Or", c"R_Po", c"L_Po", c"Me", c"R_Cor", c"L_Cor", c"R_F", c"L_F",
];

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> C3dStatus {
    match e {
        Error::InvalidArgument(_) => C3dStatus::InvalidArgument,
        Error::Io { .. } => C3dStatus::Io,
        Error::Format { .. } => C3dStatus::Format,
        Error::Shape(_) | Error::DimensionOverflow(_) | Error::OutOfBounds { .. } => C3dStatus::Shape,
        Error::State(_) => C3dStatus::State,
        Error::Config(_) => C3dStatus::Config,
        Error::IncompleteData { .. }
        | Error::InsufficientData(_)
        | Error::Degenerate(_)
        | Error::SampleRejected { .. } => C3dStatus::Data,
        Error::Diverged(_) => C3dStatus::Diverged,
    }
}

/// Runs `f`, recording the error message and trapping panics.
fn guard(f: impl FnOnce() -> Result<(), (C3dStatus, String)>) -> C3dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            C3dStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            C3dStatus::Panic
        }
    }
}

fn lib(e: Error) -> (C3dStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (C3dStatus, String) {
    (C3dStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, (C3dStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (C3dStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn point_arg(p: *const f64, what: &str) -> Result<[f64; 3], (C3dStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok([*p, *p.add(1), *p.add(2)])
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn c3d_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn c3d_landmark_count() -> usize {
    C3D_LANDMARK_COUNT
}

/// Static name of catalog entry `index`, or null when out of range.
#[no_mangle]
pub extern "C" fn c3d_landmark_name(index: usize) -> *const c_char {
    NAMES.get(index).map_or(ptr::null(), |s| s.as_ptr())
}

/// Reads a CVOL file.
#[no_mangle]
pub unsafe extern "C" fn c3d_volume_read(path: *const c_char, out: *mut *mut C3dVolume) -> C3dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v = read_cvol(path_arg(path)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(C3dVolume(v)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn c3d_volume_free(v: *mut C3dVolume) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Writes the voxel counts to `out_dims[0..3]`.
#[no_mangle]
pub unsafe extern "C" fn c3d_volume_dims(v: *const C3dVolume, out_dims: *mut usize) -> C3dStatus {
    guard(|| {
        let v = v.as_ref().ok_or_else(|| null("volume"))?;
        if out_dims.is_null() {
            return Err(null("out_dims"));
        }
        for (a, d) in v.0.dims().into_iter().enumerate() {
            *out_dims.add(a) = d;
        }
        Ok(())
    })
}

/// 1 for a normalized volume, 0 for raw HU, -1 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn c3d_volume_is_normalized(v: *const C3dVolume) -> i32 {
    v.as_ref().map_or(-1, |v| i32::from(v.0.is_normalized()))
}

/// Generates one skull phantom on a `dims[0..3]` grid with isotropic
/// `spacing` mm. Either output may be null when not wanted.
#[no_mangle]
pub unsafe extern "C" fn c3d_phantom_generate(
    dims: *const usize,
    spacing: f64,
    jitter: f64,
    seed: u64,
    out_volume: *mut *mut C3dVolume,
    out_landmarks: *mut *mut C3dLandmarks,
) -> C3dStatus {
    guard(|| {
        if dims.is_null() {
            return Err(null("dims"));
        }
        let dims = [*dims, *dims.add(1), *dims.add(2)];
        if !(spacing > 0.0 && spacing.is_finite()) || dims.contains(&0) {
            return Err((C3dStatus::InvalidArgument, "dims and spacing must be positive".into()));
        }
        let spec = PhantomSpec {
            jitter,
            seed,
            ..PhantomSpec::for_grid(dims, spacing)
        };
        let p = phantom::generate(&spec).map_err(lib)?;
        if !out_volume.is_null() {
            *out_volume = Box::into_raw(Box::new(C3dVolume(p.volume)));
        }
        if !out_landmarks.is_null() {
            *out_landmarks = Box::into_raw(Box::new(C3dLandmarks(p.landmarks)));
        }
        Ok(())
    })
}

/// Loads a checkpoint written by `cephalo3d train`.
#[no_mangle]
pub unsafe extern "C" fn c3d_model_load(path: *const c_char, out: *mut *mut C3dModel) -> C3dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = Model::<f32>::load(path_arg(path)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(C3dModel(m)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn c3d_model_free(m: *mut C3dModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Predicts world-frame landmarks. Raw volumes are preprocessed onto the
/// model grid; normalized volumes must already match it.
#[no_mangle]
pub unsafe extern "C" fn c3d_predict(
    m: *const C3dModel,
    v: *const C3dVolume,
    out: *mut *mut C3dLandmarks,
) -> C3dStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let v = v.as_ref().ok_or_else(|| null("volume"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let lm = if v.0.is_normalized() {
            let voxel = m.0.predict_voxel(&v.0).map_err(lib)?;
            cephalo3d::landmarks::landmarks_voxel_to_world(&voxel, &v.0).map_err(lib)?
        } else {
            pipeline::predict(&m.0, &v.0).map_err(lib)?
        };
        *out = Box::into_raw(Box::new(C3dLandmarks(lm)));
        Ok(())
    })
}

/// Copies landmark `index` (catalog order) into `out_xyz[0..3]`.
#[no_mangle]
pub unsafe extern "C" fn c3d_landmarks_get(lm: *const C3dLandmarks, index: usize, out_xyz: *mut f64) -> C3dStatus {
    guard(|| {
        let lm = lm.as_ref().ok_or_else(|| null("landmarks"))?;
        if out_xyz.is_null() {
            return Err(null("out_xyz"));
        }
        let id = *LandmarkId::ALL
            .get(index)
            .ok_or_else(|| (C3dStatus::InvalidArgument, format!("landmark index {index} out of range")))?;
        let p = lm.0.get(id).ok_or_else(|| (C3dStatus::NotFound, format!("landmark {id} not set")))?;
        ptr::copy_nonoverlapping(p.as_ptr(), out_xyz, 3);
        Ok(())
    })
}

/// 1 for world millimetres, 0 for voxel indices, -1 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn c3d_landmarks_is_world(lm: *const C3dLandmarks) -> i32 {
    lm.as_ref().map_or(-1, |l| i32::from(l.0.frame() == Frame::World))
}

#[no_mangle]
pub unsafe extern "C" fn c3d_landmarks_free(lm: *mut C3dLandmarks) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// Per-axis absolute and Euclidean distance between two points.
#[no_mangle]
pub unsafe extern "C" fn c3d_landmark_error(
    reference: *const f64,
    predicted: *const f64,
    out: *mut C3dLandmarkError,
) -> C3dStatus {
    guard(|| {
        let r = point_arg(reference, "reference")?;
        let p = point_arg(predicted, "predicted")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let e = evaluate::landmark_error(r, p, LandmarkId::Na).map_err(lib)?;
        *out = C3dLandmarkError {
            dx: e.dx,
            dy: e.dy,
            dz: e.dz,
            d3: e.d3,
        };
        Ok(())
    })
}
