//! C interface.
//!
//! Scenarios and runs are opaque heap handles owned by the caller and
//! released with their `_free` function. Every fallible call returns an
//! [`AgwStatus`]; the message of the last failure on the calling thread is
//! available from [`agw_last_error_message`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use agc_watermark::config::ScenarioFile;
use agc_watermark::detector::{calibrate_empirical, BlockReport, ResidualSpace, DEFAULT_T_INF};
use agc_watermark::eval::{self, ExperimentReport};
use agc_watermark::sim::Scenario;
use agc_watermark::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Runtime = 4,
    OutOfRange = 5,
    Panic = 6,
}

/// Opaque scenario handle.
pub struct AgwScenario(Scenario);

/// Opaque handle to a finished run.
pub struct AgwRun(ExperimentReport);

/// One detector block.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgwBlock {
    /// Block index, from 1.
    pub j: usize,
    pub xi1: f64,
    pub xi2: f64,
    pub eta1: f64,
    pub eta2: f64,
    /// 1 when the block raised an alarm.
    pub alarm: u8,
}

/// Summary of a run. Absent quantities are −1 (integers) or NaN (θ).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgwOutcome {
    pub blocks: usize,
    pub alarms: usize,
    pub false_alarms: usize,
    pub detection_delay_blocks: i64,
    pub diverged_at: i64,
    pub stopped_at: i64,
    pub theta: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: AgwStatus, msg: impl Into<String>) -> AgwStatus {
    set_error(msg);
    status
}

fn from_error(err: Error) -> AgwStatus {
    let status = match err {
        Error::Config(_) | Error::InvalidParameter(_) => AgwStatus::Config,
        _ => AgwStatus::Runtime,
    };
    fail(status, err.to_string())
}

/// Runs `f`, converting panics into [`AgwStatus::Panic`].
fn guard(f: impl FnOnce() -> AgwStatus) -> AgwStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(AgwStatus::Panic, "internal panic"))
}

fn opt_index(v: Option<usize>) -> i64 {
    v.map_or(-1, |x| x as i64)
}

/// The message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn agw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a TOML scenario into `*out`.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn agw_scenario_from_toml(toml: *const c_char, out: *mut *mut AgwScenario) -> AgwStatus {
    guard(|| {
        if toml.is_null() || out.is_null() {
            return fail(AgwStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let Ok(text) = CStr::from_ptr(toml).to_str() else {
            return fail(AgwStatus::InvalidUtf8, "scenario text is not UTF-8");
        };
        match ScenarioFile::parse(text).and_then(|f| f.scenario()) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(AgwScenario(s)));
                AgwStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// The built-in four-area scenario, honest, with the given seed and length.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn agw_scenario_four_area_preset(
    seed: u64,
    duration_steps: usize,
    out: *mut *mut AgwScenario,
) -> AgwStatus {
    guard(|| {
        if out.is_null() {
            return fail(AgwStatus::NullPointer, "null argument");
        }
        let mut s = Scenario::four_area();
        s.seed = seed;
        s.duration_steps = duration_steps;
        if let Err(e) = s.validate() {
            *out = ptr::null_mut();
            return from_error(e);
        }
        *out = Box::into_raw(Box::new(AgwScenario(s)));
        AgwStatus::Ok
    })
}

/// # Safety
/// `scenario` must come from this library and not be freed.
#[no_mangle]
pub unsafe extern "C" fn agw_scenario_set_seed(scenario: *mut AgwScenario, seed: u64) -> AgwStatus {
    match scenario.as_mut() {
        Some(s) => {
            s.0.seed = seed;
            AgwStatus::Ok
        }
        None => fail(AgwStatus::NullPointer, "null scenario"),
    }
}

/// Releases a scenario; null is ignored.
///
/// # Safety
/// `scenario` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn agw_scenario_free(scenario: *mut AgwScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Models, calibrates and simulates the scenario, storing the run in `*out`.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn agw_run(scenario: *const AgwScenario, out: *mut *mut AgwRun) -> AgwStatus {
    guard(|| {
        let Some(s) = scenario.as_ref() else {
            return fail(AgwStatus::NullPointer, "null scenario");
        };
        if out.is_null() {
            return fail(AgwStatus::NullPointer, "null output");
        }
        *out = ptr::null_mut();
        match eval::evaluate(&s.0) {
            Ok((_, report)) => {
                *out = Box::into_raw(Box::new(AgwRun(report)));
                AgwStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Number of completed blocks, 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn agw_run_block_count(run: *const AgwRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.blocks.len())
}

/// Copies block `index` (from 0) into `*out`.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn agw_run_block(run: *const AgwRun, index: usize, out: *mut AgwBlock) -> AgwStatus {
    let (Some(r), false) = (run.as_ref(), out.is_null()) else {
        return fail(AgwStatus::NullPointer, "null argument");
    };
    let Some(b): Option<&BlockReport> = r.0.blocks.get(index) else {
        return fail(AgwStatus::OutOfRange, format!("block {index} of {}", r.0.blocks.len()));
    };
    *out = AgwBlock {
        j: b.j,
        xi1: b.xi1,
        xi2: b.xi2,
        eta1: b.eta1,
        eta2: b.eta2,
        alarm: u8::from(b.alarm),
    };
    AgwStatus::Ok
}

/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn agw_run_outcome(run: *const AgwRun, out: *mut AgwOutcome) -> AgwStatus {
    let (Some(r), false) = (run.as_ref(), out.is_null()) else {
        return fail(AgwStatus::NullPointer, "null argument");
    };
    let r = &r.0;
    *out = AgwOutcome {
        blocks: r.blocks.len(),
        alarms: r.blocks.iter().filter(|b| b.alarm).count(),
        false_alarms: r.false_alarms,
        detection_delay_blocks: opt_index(r.detection_delay_blocks),
        diverged_at: opt_index(r.diverged_at),
        stopped_at: opt_index(r.stopped_at),
        theta: r.theta.unwrap_or(f64::NAN),
    };
    AgwStatus::Ok
}

/// Releases a run; null is ignored.
///
/// # Safety
/// `run` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn agw_run_free(run: *mut AgwRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Long-window thresholds `κ′·ξ∞` from an honest run of the scenario's
/// monitored area, written to `*eta1` and `*eta2`.
///
/// # Safety
/// `scenario` must be a live handle; `eta1` and `eta2` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn agw_calibrate_empirical(
    scenario: *const AgwScenario,
    kappa_prime: f64,
    eta1: *mut f64,
    eta2: *mut f64,
) -> AgwStatus {
    guard(|| {
        let Some(s) = scenario.as_ref() else {
            return fail(AgwStatus::NullPointer, "null scenario");
        };
        if eta1.is_null() || eta2.is_null() {
            return fail(AgwStatus::NullPointer, "null output");
        }
        let result = eval::detector_model(&s.0).and_then(|model| {
            let honest = eval::honest_trace(&s.0, DEFAULT_T_INF)?;
            calibrate_empirical(&model, ResidualSpace::State, &honest, DEFAULT_T_INF, kappa_prime)
        });
        match result {
            Ok(t) => {
                *eta1 = t.eta1;
                *eta2 = t.eta2;
                AgwStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Robustness indicator θ of a ξ₁ series whose first entry is block 1.
///
/// # Safety
/// `xi1` must point to `len` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn agw_theta(xi1: *const f64, len: usize, start_block: usize, out: *mut f64) -> AgwStatus {
    if xi1.is_null() || out.is_null() {
        return fail(AgwStatus::NullPointer, "null argument");
    }
    match eval::theta(std::slice::from_raw_parts(xi1, len), start_block) {
        Ok(t) => {
            *out = t;
            AgwStatus::Ok
        }
        Err(e) => fail(AgwStatus::OutOfRange, e.to_string()),
    }
}
