use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use lld_ffi::*;

fn scenario_path(name: &str) -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/scenarios")
        .join(name);
    CString::new(p.display().to_string()).unwrap()
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    assert!(!s.is_null());
    let out = CStr::from_ptr(s).to_str().unwrap().to_owned();
    lld_string_free(s);
    out
}

unsafe fn last_error() -> String {
    let p = lld_last_error_message();
    assert!(!p.is_null());
    CStr::from_ptr(p).to_string_lossy().into_owned()
}

#[test]
fn load_run_and_inspect_a_scenario() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(
            lld_scenario_load(scenario_path("sybil_clone_app.json").as_ptr(), &mut s),
            LldStatus::Ok
        );
        assert!(lld_last_error_message().is_null());
        let mut r = ptr::null_mut();
        assert_eq!(lld_scenario_run(s, ptr::null(), ptr::null(), &mut r), LldStatus::Ok);
        assert_eq!(lld_report_outcome(r), LldOutcome::Pass);
        assert!(lld_report_met_expectation(r));
        let json: serde_json::Value = serde_json::from_str(&take(lld_report_json(r))).unwrap();
        assert_eq!(json["scenario"], "sybil_clone_app");
        let trace = take(lld_report_trace(r));
        assert!(trace.lines().count() > 10);
        lld_report_free(r);
        lld_scenario_free(s);
    }
}

#[test]
fn seed_override_changes_the_trace_deterministically() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(
            lld_scenario_load(scenario_path("fork_attack.json").as_ptr(), &mut s),
            LldStatus::Ok
        );
        let mut traces = Vec::new();
        for seed in [5u64, 5, 6] {
            let mut r = ptr::null_mut();
            assert_eq!(lld_scenario_run(s, &seed, ptr::null(), &mut r), LldStatus::Ok);
            traces.push(take(lld_report_trace(r)));
            lld_report_free(r);
        }
        assert_eq!(traces[0], traces[1]);
        assert_ne!(traces[0], traces[2]);
        lld_scenario_free(s);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut s = ptr::null_mut();
        let bad = CString::new("{\"name\": 3}").unwrap();
        assert_eq!(lld_scenario_parse(bad.as_ptr(), &mut s), LldStatus::Parse);
        assert!(last_error().contains("parse error at line 1"));
        assert!(s.is_null());

        let invalid = CString::new(
            r#"{"name": "x", "system": {"kind": "lease", "apps": []}, "mode": {"simulate": {"limit": 10}}}"#,
        )
        .unwrap();
        assert_eq!(lld_scenario_parse(invalid.as_ptr(), &mut s), LldStatus::Validation);

        let missing = CString::new("/nonexistent/scenario.json").unwrap();
        assert_eq!(lld_scenario_load(missing.as_ptr(), &mut s), LldStatus::Io);

        assert_eq!(lld_scenario_parse(ptr::null(), &mut s), LldStatus::NullPointer);
        assert_eq!(
            lld_scenario_parse(bad.as_ptr(), ptr::null_mut()),
            LldStatus::NullPointer
        );
        let not_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(
            lld_scenario_parse(not_utf8.as_ptr().cast(), &mut s),
            LldStatus::InvalidUtf8
        );
        assert_eq!(
            lld_scenario_run(ptr::null(), ptr::null(), ptr::null(), ptr::null_mut()),
            LldStatus::NullPointer
        );

        assert_eq!(lld_report_outcome(ptr::null()), LldOutcome::Inconclusive);
        assert!(!lld_report_met_expectation(ptr::null()));
        assert!(lld_report_json(ptr::null()).is_null());
        lld_report_free(ptr::null_mut());
        lld_scenario_free(ptr::null_mut());
        lld_string_free(ptr::null_mut());
    }
}

#[test]
fn exploration_through_the_c_interface() {
    unsafe {
        let mut out = std::mem::zeroed::<LldExploreResult>();
        assert_eq!(lld_explore_election(1, 5, 2, 0, 0, &mut out), LldStatus::Ok);
        assert_eq!(out.outcome, LldOutcome::Pass);
        assert_eq!(out.wait, 9);
        assert!(out.states_explored > 0);
        assert!(!out.replay_confirms);

        assert_eq!(lld_explore_election(1, 5, 2, 7, 0, &mut out), LldStatus::Ok);
        assert_eq!(out.outcome, LldOutcome::Violation);
        assert!(out.replay_confirms);

        assert_eq!(lld_explore_election(1, 5, 2, 0, 20, &mut out), LldStatus::Ok);
        assert_eq!(out.outcome, LldOutcome::Inconclusive);

        assert_eq!(
            lld_explore_election(0, 5, 2, 0, 0, &mut out),
            LldStatus::InvalidArgument
        );
        assert!(last_error().contains("epsilon"));
        assert_eq!(
            lld_explore_election(1, 5, 2, 0, 0, ptr::null_mut()),
            LldStatus::NullPointer
        );
    }
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(lld_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
