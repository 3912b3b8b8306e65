//! C interface to the lease and election laboratory.
//!
//! Scenarios and reports are opaque handles created and released through
//! this API. Every fallible call returns an [`LldStatus`]; on failure a
//! description is available from [`lld_last_error_message`] on the same
//! thread. Strings returned to the caller are owned by the caller and must
//! be released with [`lld_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lld_core::cli::{explore_election, run_scenario, Outcome, RunOptions, RunOutput, Scenario, ScenarioError};
use lld_core::explorer::{ElectionConfig, Limits};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LldStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    InvalidArgument = 6,
    Panic = 7,
}

/// Verdict of a run or an exploration.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LldOutcome {
    Pass = 0,
    Violation = 1,
    Inconclusive = 2,
}

impl From<Outcome> for LldOutcome {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Pass => LldOutcome::Pass,
            Outcome::Violation => LldOutcome::Violation,
            Outcome::Inconclusive => LldOutcome::Inconclusive,
        }
    }
}

/// A parsed and validated scenario.
pub struct LldScenario(Scenario);

/// The report and schedule trace of one scenario run.
pub struct LldReport(RunOutput);

/// Summary of an election exploration.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LldExploreResult {
    pub outcome: LldOutcome,
    pub states_explored: u64,
    pub transitions: u64,
    pub max_depth: u64,
    /// Handover wait that was explored.
    pub wait: u64,
    /// True if a counterexample was found and the simulator reproduced it.
    pub replay_confirms: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: LldStatus, msg: impl Into<String>) -> LldStatus {
    set_error(msg);
    status
}

fn scenario_status(e: &ScenarioError) -> LldStatus {
    match e {
        ScenarioError::Io { .. } => LldStatus::Io,
        ScenarioError::Parse { .. } => LldStatus::Parse,
        ScenarioError::Validation { .. } => LldStatus::Validation,
    }
}

/// Runs `f`, turning a panic into [`LldStatus::Panic`].
fn guard(f: impl FnOnce() -> LldStatus) -> LldStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == LldStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            status
        }
        Err(_) => fail(LldStatus::Panic, "internal error"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, LldStatus> {
    if p.is_null() {
        return Err(fail(LldStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LldStatus::InvalidUtf8, "argument is not UTF-8"))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn lld_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lld_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a scenario from JSON text.
///
/// # Safety
/// `json` must be NULL or a NUL-terminated string; `out` must be NULL or
/// valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn lld_scenario_parse(json: *const c_char, out: *mut *mut LldScenario) -> LldStatus {
    guard(|| {
        if out.is_null() {
            return fail(LldStatus::NullPointer, "null output pointer");
        }
        let text = match str_arg(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Scenario::parse(text) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(LldScenario(s)));
                LldStatus::Ok
            }
            Err(e) => fail(scenario_status(&e), e.to_string()),
        }
    })
}

/// Loads a scenario file.
///
/// # Safety
/// As for [`lld_scenario_parse`], with `path` a file path.
#[no_mangle]
pub unsafe extern "C" fn lld_scenario_load(path: *const c_char, out: *mut *mut LldScenario) -> LldStatus {
    guard(|| {
        if out.is_null() {
            return fail(LldStatus::NullPointer, "null output pointer");
        }
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Scenario::load(Path::new(path)) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(LldScenario(s)));
                LldStatus::Ok
            }
            Err(e) => fail(scenario_status(&e), e.to_string()),
        }
    })
}

/// Releases a scenario. NULL is ignored.
///
/// # Safety
/// `scenario` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lld_scenario_free(scenario: *mut LldScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Runs a scenario. `seed` and `limit` override the file's values when
/// non-NULL.
///
/// # Safety
/// `scenario` must be a live handle; `seed` and `limit` NULL or readable;
/// `out` valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn lld_scenario_run(
    scenario: *const LldScenario,
    seed: *const u64,
    limit: *const u64,
    out: *mut *mut LldReport,
) -> LldStatus {
    guard(|| {
        if scenario.is_null() || out.is_null() {
            return fail(LldStatus::NullPointer, "null scenario or output pointer");
        }
        let opts = RunOptions {
            seed: seed.as_ref().copied(),
            limit: limit.as_ref().copied(),
        };
        match run_scenario(&(*scenario).0, &opts) {
            Ok(o) => {
                *out = Box::into_raw(Box::new(LldReport(o)));
                LldStatus::Ok
            }
            Err(e) => fail(scenario_status(&e), e.to_string()),
        }
    })
}

/// Outcome of a run: pass iff every invariant held. A NULL handle reads
/// as inconclusive.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lld_report_outcome(report: *const LldReport) -> LldOutcome {
    match report.as_ref() {
        Some(r) => r.0.report.outcome.into(),
        None => LldOutcome::Inconclusive,
    }
}

/// True iff the run met the scenario's expectation.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lld_report_met_expectation(report: *const LldReport) -> bool {
    report.as_ref().is_some_and(|r| r.0.report.met_expectation)
}

/// The report as JSON. Free with [`lld_string_free`]; NULL on a NULL handle.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lld_report_json(report: *const LldReport) -> *mut c_char {
    report
        .as_ref()
        .map_or(ptr::null_mut(), |r| into_c_string(r.0.report.to_json()))
}

/// The schedule trace as tab-separated text. Free with [`lld_string_free`].
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lld_report_trace(report: *const LldReport) -> *mut c_char {
    report
        .as_ref()
        .map_or(ptr::null_mut(), |r| into_c_string(r.0.trace.export()))
}

/// Releases a report. NULL is ignored.
///
/// # Safety
/// `report` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lld_report_free(report: *mut LldReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lld_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Exhaustively explores the local leader election. `wait` of 0 selects
/// the standard handover wait `period + 4 * epsilon`; `max_states` of 0
/// means no bound.
///
/// # Safety
/// `out` must be valid for writing one [`LldExploreResult`].
#[no_mangle]
pub unsafe extern "C" fn lld_explore_election(
    epsilon: u64,
    period: u64,
    max_instances: u32,
    wait: u64,
    max_states: u64,
    out: *mut LldExploreResult,
) -> LldStatus {
    guard(|| {
        if out.is_null() {
            return fail(LldStatus::NullPointer, "null output pointer");
        }
        if epsilon == 0 || period == 0 || max_instances == 0 || max_instances > 8 {
            return fail(
                LldStatus::InvalidArgument,
                "epsilon and period must be positive and max_instances in 1..=8",
            );
        }
        let mut config = ElectionConfig::new(epsilon, period, max_instances as usize);
        if wait > 0 {
            config = config.with_wait(wait);
        }
        let mut limits = Limits::default();
        if max_states > 0 {
            limits.max_states = usize::try_from(max_states).unwrap_or(usize::MAX);
        }
        let e = explore_election(config, limits);
        *out = LldExploreResult {
            outcome: e.outcome.into(),
            states_explored: e.report.states_explored,
            transitions: e.report.transitions,
            max_depth: e.report.max_depth as u64,
            wait: config.wait,
            replay_confirms: e.report.replay_confirms == Some(true),
        };
        LldStatus::Ok
    })
}
