//! C ABI over the one-dimensional models and the tower builder.
//!
//! Every entry point returns an [`MtStatus`]. On failure the message is
//! kept per thread and read back with [`mt_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use markov_tower::expansion::ExpansionConfig;
use markov_tower::maps::{MapModel, Point};
use markov_tower::tower::{run_tower, PartitionElement, StepRecord, TowerConfig};
use markov_tower::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Verification = 4,
    Numerical = 5,
    Io = 6,
    OutOfRange = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A map model.
pub struct MtModel {
    model: MapModel,
}

/// A finished tower.
pub struct MtTower {
    elements: Vec<PartitionElement>,
    steps: Vec<StepRecord>,
    unpartitioned_fraction: f64,
}

/// Tower parameters. A NaN `p` selects the base point automatically.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MtTowerConfig {
    pub delta0: f64,
    pub delta1: f64,
    pub r0: u32,
    pub n_max: u32,
    pub particles: u32,
    pub p: f64,
}

/// One partition element: its arc at time zero and return time.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MtElement {
    pub lo: f64,
    pub hi: f64,
    pub return_time: u32,
    pub log_measure: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MtStatus {
    match e {
        Error::Config { .. } | Error::Parse(_) | Error::Domain(_) | Error::NoBranches(_) | Error::SingularPoint(_) => {
            MtStatus::Config
        }
        Error::Verification(_) | Error::InconsistentState { .. } => MtStatus::Verification,
        Error::Io(_) => MtStatus::Io,
        _ => MtStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MtStatus, String)>) -> MtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtStatus::Ok,
        Ok(Err((s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            MtStatus::Panic
        }
    }
}

fn lib(e: Error) -> (MtStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MtStatus, String) {
    (MtStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failure on this thread; empty when none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a model by catalog name (`doubling`, `lsv`, `gauss`, `viana`).
/// A NaN `alpha` or zero `k_max` keeps the model default.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mt_model_new(name: *const c_char, alpha: f64, k_max: u32, out: *mut *mut MtModel) -> MtStatus {
    guard(|| {
        if name.is_null() {
            return Err(null("name"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let name = CStr::from_ptr(name).to_str().map_err(|_| (MtStatus::InvalidArgument, "name is not UTF-8".into()))?;
        let alpha = (!alpha.is_nan()).then_some(alpha);
        let k_max = (k_max > 0).then_some(k_max as usize);
        let model = MapModel::by_name(name, alpha, k_max, None).map_err(lib)?;
        *out = Box::into_raw(Box::new(MtModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mt_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mt_model_free(model: *mut MtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates a one-dimensional model at `x`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mt_model_evaluate(model: *const MtModel, x: f64, out: *mut f64) -> MtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        match m.model.evaluate(Point::Line(x)).map_err(lib)? {
            Point::Line(y) => {
                *out = y;
                Ok(())
            }
            Point::Plane(_) => Err((MtStatus::InvalidArgument, "model is not one-dimensional".into())),
        }
    })
}

/// Writes the branch pre-images of `y` into `buf`. `len` receives the
/// number of pre-images, also when `cap` is too small.
///
/// # Safety
/// `buf` must hold `cap` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mt_model_preimages(model: *const MtModel, y: f64, buf: *mut f64, cap: usize, len: *mut usize) -> MtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if len.is_null() {
            return Err(null("len"));
        }
        let pre = m.model.branch_preimages(y).map_err(lib)?;
        *len = pre.len();
        if pre.len() > cap {
            return Err((MtStatus::BufferTooSmall, format!("{} pre-images, capacity {cap}", pre.len())));
        }
        if !pre.is_empty() {
            if buf.is_null() {
                return Err(null("buf"));
            }
            ptr::copy_nonoverlapping(pre.as_ptr(), buf, pre.len());
        }
        Ok(())
    })
}

/// Default tower parameters.
#[no_mangle]
pub extern "C" fn mt_tower_config_default() -> MtTowerConfig {
    let d = TowerConfig::default();
    MtTowerConfig {
        delta0: d.delta0,
        delta1: d.delta1,
        r0: d.r0 as u32,
        n_max: d.n_max as u32,
        particles: d.particles as u32,
        p: f64::NAN,
    }
}

/// Builds a tower with the model's default expansion settings.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mt_tower_run(model: *const MtModel, cfg: *const MtTowerConfig, out: *mut *mut MtTower) -> MtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let tc = TowerConfig {
            delta0: c.delta0,
            delta1: c.delta1,
            r0: c.r0 as usize,
            n_max: c.n_max as usize,
            particles: c.particles as usize,
            p: (!c.p.is_nan()).then_some(c.p),
            ..TowerConfig::default()
        };
        let exp = ExpansionConfig::for_model(&m.model, 1.0);
        let run = run_tower(&m.model, &exp, &tc).map_err(lib)?;
        *out = Box::into_raw(Box::new(MtTower {
            unpartitioned_fraction: run.summary.unpartitioned_fraction,
            elements: run.elements,
            steps: run.records,
        }));
        Ok(())
    })
}

/// # Safety
/// `tower` must come from [`mt_tower_run`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mt_tower_free(tower: *mut MtTower) {
    if !tower.is_null() {
        drop(Box::from_raw(tower));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mt_tower_element_count(tower: *const MtTower, out: *mut usize) -> MtStatus {
    guard(|| {
        let t = tower.as_ref().ok_or_else(|| null("tower"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = t.elements.len();
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mt_tower_element(tower: *const MtTower, index: usize, out: *mut MtElement) -> MtStatus {
    guard(|| {
        let t = tower.as_ref().ok_or_else(|| null("tower"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        let e = t
            .elements
            .get(index)
            .ok_or_else(|| (MtStatus::OutOfRange, format!("element {index} of {}", t.elements.len())))?;
        *o = MtElement { lo: e.u[0].0, hi: e.u[0].1, return_time: e.r as u32, log_measure: e.log_measure };
        Ok(())
    })
}

/// Number of recorded steps, including step zero.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mt_tower_step_count(tower: *const MtTower, out: *mut usize) -> MtStatus {
    guard(|| {
        let t = tower.as_ref().ok_or_else(|| null("tower"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = t.steps.len();
        Ok(())
    })
}

/// Measure of the unpartitioned part `Delta_n` after step `n`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mt_tower_leb_delta(tower: *const MtTower, n: usize, out: *mut f64) -> MtStatus {
    guard(|| {
        let t = tower.as_ref().ok_or_else(|| null("tower"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        let r = t.steps.get(n).ok_or_else(|| (MtStatus::OutOfRange, format!("step {n} of {}", t.steps.len())))?;
        *o = r.leb_delta;
        Ok(())
    })
}

/// Fraction of the base left unpartitioned at the last step.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mt_tower_unpartitioned_fraction(tower: *const MtTower, out: *mut f64) -> MtStatus {
    guard(|| {
        let t = tower.as_ref().ok_or_else(|| null("tower"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = t.unpartitioned_fraction;
        Ok(())
    })
}
