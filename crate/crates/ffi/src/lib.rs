//! C ABI over `ltms-core`: load or create a model, predict a scene from flat
//! arrays, read back world-frame modes and probabilities.
//!
//! Every function returns an [`LtmsStatus`]; on failure the message is kept
//! per thread and can be read with [`ltms_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ltms_core::data::{Checkpoint, ModelConfig};
use ltms_core::model::{Model, Prediction, SceneInputs};
use ltms_core::scene::{LaneSegment, Scenario};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LtmsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericError = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct LtmsModel {
    model: Model,
}

/// Opaque prediction handle.
pub struct LtmsPrediction {
    prediction: Prediction,
}

/// Shape of a model's inputs and outputs.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LtmsDims {
    pub hidden: usize,
    pub modes: usize,
    pub observed: usize,
    pub predicted: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Fail(LtmsStatus, String);

impl From<ltms_core::Error> for Fail {
    fn from(e: ltms_core::Error) -> Self {
        let status = match e {
            ltms_core::Error::Numerics(_) => LtmsStatus::NumericError,
            _ => LtmsStatus::DataError,
        };
        Fail(status, e.to_string())
    }
}

impl From<ltms_core::data::DataError> for Fail {
    fn from(e: ltms_core::data::DataError) -> Self {
        Fail(LtmsStatus::DataError, e.to_string())
    }
}

impl From<ltms_core::numerics::NumericsError> for Fail {
    fn from(e: ltms_core::numerics::NumericsError) -> Self {
        Fail(LtmsStatus::NumericError, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LtmsStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LtmsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LtmsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LtmsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LtmsStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn boxed<T>(value: T, out: *mut *mut T) -> Result<(), Fail> {
    // SAFETY: callers check `out` before doing any work
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ltms_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fresh model with the default configuration and the given seed.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ltms_model_new_default(seed: u64, out: *mut *mut LtmsModel) -> LtmsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        boxed(LtmsModel { model: Model::new(&config)? }, out)
    })
}

/// Model restored from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ltms_model_load(path: *const c_char, out: *mut *mut LtmsModel) -> LtmsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        let mut model = Model::new(&ckpt.config)?;
        ckpt.restore_into(&mut model.params)?;
        boxed(LtmsModel { model }, out)
    })
}

/// Writes the model parameters to a checkpoint file.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ltms_model_save(model: *const LtmsModel, path: *const c_char) -> LtmsStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        Checkpoint::from_store(&m.config, &m.params, 0, m.config.seed, None).save(&path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ltms_model_free(model: *mut LtmsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ltms_model_dims(model: *const LtmsModel, out: *mut LtmsDims) -> LtmsStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = LtmsDims {
            hidden: m.config.hidden,
            modes: m.config.modes,
            observed: m.config.observed,
            predicted: m.config.predicted,
        };
        Ok(())
    })
}

/// Number of trainable parameters.
///
/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ltms_model_param_count(model: *const LtmsModel, out: *mut usize) -> LtmsStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        *out.as_mut().ok_or_else(|| null("out"))? = m.param_count();
        Ok(())
    })
}

/// Predicts every agent present at the last observed step.
///
/// `positions` holds `agents * steps * 2` world coordinates, agent-major;
/// `valid` holds `agents * steps` flags (nonzero means observed). Only the
/// first `observed` steps are read. `lanes` holds `lane_count * 4` values
/// `(x0, y0, x1, y1)` and `lane_flags` one bitmask per lane (1 turn,
/// 2 intersection, 4 traffic control); both may be null when `lane_count`
/// is zero.
///
/// # Safety
/// Every non-null pointer must reference at least the stated number of
/// elements and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ltms_predict(
    model: *const LtmsModel,
    positions: *const f64,
    valid: *const u8,
    agents: usize,
    steps: usize,
    sample_rate_hz: f64,
    lanes: *const f64,
    lane_flags: *const u8,
    lane_count: usize,
    out: *mut *mut LtmsPrediction,
) -> LtmsStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if out.is_null() {
            return Err(null("out"));
        }
        let cells = agents
            .checked_mul(steps)
            .filter(|&c| c.checked_mul(2).is_some())
            .ok_or_else(|| Fail(LtmsStatus::InvalidArgument, "agents * steps overflows".into()))?;
        let pos = slice(positions, cells * 2, "positions")?;
        let flags = slice(valid, cells, "valid")?;
        let lane_xy = slice(lanes, lane_count.saturating_mul(4), "lanes")?;
        let lane_bits = slice(lane_flags, lane_count, "lane_flags")?;
        let scenario = Scenario {
            id: "ffi".into(),
            agent_ids: (0..agents).map(|a| format!("a{a}")).collect(),
            positions: (0..agents)
                .map(|a| (0..steps).map(|t| [pos[(a * steps + t) * 2], pos[(a * steps + t) * 2 + 1]]).collect())
                .collect(),
            valid: (0..agents)
                .map(|a| (0..steps).map(|t| flags[a * steps + t] != 0).collect())
                .collect(),
            lanes: (0..lane_count)
                .map(|l| {
                    let c = &lane_xy[l * 4..l * 4 + 4];
                    LaneSegment::from_flag_bits([c[0], c[1]], [c[2], c[3]], lane_bits[l])
                })
                .collect(),
            sample_rate_hz,
            focal: vec![],
        };
        let inputs = SceneInputs::build(&scenario, &m.config)?;
        let prediction = m.predict(&inputs)?;
        boxed(LtmsPrediction { prediction }, out)
    })
}

/// # Safety
/// `pred` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ltms_prediction_free(pred: *mut LtmsPrediction) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

/// Number of predicted agents.
///
/// # Safety
/// `pred` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ltms_prediction_agents(pred: *const LtmsPrediction, out: *mut usize) -> LtmsStatus {
    guard(|| {
        let p = &pred.as_ref().ok_or_else(|| null("prediction"))?.prediction;
        *out.as_mut().ok_or_else(|| null("out"))? = p.agents.len();
        Ok(())
    })
}

unsafe fn slot_of<'a>(pred: *const LtmsPrediction, slot: usize) -> Result<&'a Prediction, Fail> {
    let p = &pred.as_ref().ok_or_else(|| null("prediction"))?.prediction;
    if slot >= p.agents.len() {
        return Err(Fail(
            LtmsStatus::InvalidArgument,
            format!("slot {slot} out of range for {} agents", p.agents.len()),
        ));
    }
    Ok(p)
}

unsafe fn fill(buf: *mut f64, len: usize, values: &[f64]) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if len < values.len() {
        return Err(Fail(
            LtmsStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    Ok(())
}

/// Input agent index of output `slot`.
///
/// # Safety
/// `pred` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ltms_prediction_agent_index(
    pred: *const LtmsPrediction,
    slot: usize,
    out: *mut usize,
) -> LtmsStatus {
    guard(|| {
        let p = slot_of(pred, slot)?;
        *out.as_mut().ok_or_else(|| null("out"))? = p.agents[slot];
        Ok(())
    })
}

/// World-frame mode locations of `slot` as `modes * predicted * 2` values.
/// `refined` selects the refined trajectories instead of the proposals.
///
/// # Safety
/// `pred` must come from this library and `buf` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ltms_prediction_locations(
    pred: *const LtmsPrediction,
    slot: usize,
    refined: bool,
    buf: *mut f64,
    len: usize,
) -> LtmsStatus {
    guard(|| {
        let p = slot_of(pred, slot)?;
        let modes = if refined { p.world_refined(slot) } else { p.world_stage1(slot) };
        let flat: Vec<f64> = modes.iter().flatten().flat_map(|q| [q[0], q[1]]).collect();
        fill(buf, len, &flat)
    })
}

/// Mode probabilities of `slot`.
///
/// # Safety
/// `pred` must come from this library and `buf` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ltms_prediction_probabilities(
    pred: *const LtmsPrediction,
    slot: usize,
    buf: *mut f64,
    len: usize,
) -> LtmsStatus {
    guard(|| {
        let p = slot_of(pred, slot)?;
        fill(buf, len, &p.stage1.probs[slot])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_values_are_stable() {
        assert_eq!(LtmsStatus::Ok as i32, 0);
        assert_eq!(LtmsStatus::Panic as i32, 6);
    }

    #[test]
    fn null_out_is_reported() {
        let s = unsafe { ltms_model_new_default(0, ptr::null_mut()) };
        assert_eq!(s, LtmsStatus::NullArgument);
        let msg = unsafe { CStr::from_ptr(ltms_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "out is null");
    }
}
