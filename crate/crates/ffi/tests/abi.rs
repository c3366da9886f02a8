use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use cislunar_game_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    let n = unsafe { cg_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_str()
        .unwrap()
        .to_string();
    assert_eq!(s.len(), n.min(buf.len() - 1));
    s
}

fn nrho() -> *mut CgOrbit {
    let mut orbit = ptr::null_mut();
    assert_eq!(unsafe { cg_orbit_nrho_new(&mut orbit) }, CgStatus::Ok);
    assert!(!orbit.is_null());
    orbit
}

#[test]
fn null_arguments_are_reported() {
    let mut c = 0.0;
    assert_eq!(
        unsafe { cg_jacobi_constant(ptr::null(), &mut c) },
        CgStatus::NullArgument
    );
    assert_eq!(last_error(), "null argument");
    assert_eq!(
        unsafe { cg_orbit_nrho_new(ptr::null_mut()) },
        CgStatus::NullArgument
    );
    assert!(unsafe { cg_orbit_period(ptr::null()) }.is_nan());
    assert_eq!(unsafe { cg_log_len(ptr::null()) }, 0);
    // freeing null is a no-op
    unsafe {
        cg_orbit_free(ptr::null_mut());
        cg_scenario_free(ptr::null_mut());
        cg_log_free(ptr::null_mut());
    }
}

#[test]
fn error_message_truncates_and_reports_full_length() {
    let mut c = 0.0;
    unsafe { cg_jacobi_constant(ptr::null(), &mut c) };
    let full = unsafe { cg_last_error_message(ptr::null_mut(), 0) };
    assert_eq!(full, "null argument".len());
    let mut buf = [1 as std::ffi::c_char; 5];
    let n = unsafe { cg_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, full);
    assert_eq!(
        unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(),
        "null"
    );
}

#[test]
fn propagation_conserves_jacobi_constant() {
    let s0 = [0.83, 0.0, 0.05, 0.0, 0.1, 0.0];
    let mut s1 = [0.0; 6];
    assert_eq!(
        unsafe { cg_propagate(s0.as_ptr(), 0.0, 1.0, 1e-12, 1e-12, s1.as_mut_ptr()) },
        CgStatus::Ok
    );
    let (mut c0, mut c1) = (0.0, 0.0);
    unsafe {
        assert_eq!(cg_jacobi_constant(s0.as_ptr(), &mut c0), CgStatus::Ok);
        assert_eq!(cg_jacobi_constant(s1.as_ptr(), &mut c1), CgStatus::Ok);
    }
    assert!((c0 - c1).abs() < 1e-10);
    assert_ne!(s0, s1);
}

#[test]
fn bad_span_is_a_config_error() {
    let s0 = [0.83, 0.0, 0.05, 0.0, 0.1, 0.0];
    let mut s1 = [0.0; 6];
    let status = unsafe { cg_propagate(s0.as_ptr(), 1.0, 1.0, 1e-12, 1e-12, s1.as_mut_ptr()) };
    assert_eq!(status, CgStatus::Config);
    assert!(!last_error().is_empty());
}

#[test]
fn nrho_handle_exposes_period_and_manifold() {
    let orbit = nrho();
    unsafe {
        assert_eq!(cg_orbit_period(orbit), 1.466695);
        assert!(cg_orbit_unstable_eigenvalue(orbit).abs() > 1.0);
        let mut s = [0.0; 6];
        assert_eq!(cg_orbit_sample(orbit, 0.0, s.as_mut_ptr()), CgStatus::Ok);
        assert!(s[2] < 0.0);
        let mut e = [0.0; 6];
        assert_eq!(
            cg_orbit_manifold_direction(orbit, 0, 0.3, e.as_mut_ptr()),
            CgStatus::Ok
        );
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // reload from its own initial state
        let mut again = ptr::null_mut();
        assert_eq!(
            cg_orbit_load(s.as_ptr(), 1.466695, &mut again),
            CgStatus::Ok
        );
        assert_eq!(cg_orbit_period(again), 1.466695);
        cg_orbit_free(again);
        cg_orbit_free(orbit);
    }
}

#[test]
fn non_periodic_state_is_numerical() {
    let s = [0.9, 0.1, 0.05, 0.02, 0.1, -0.03];
    let mut orbit = ptr::null_mut();
    assert_eq!(
        unsafe { cg_orbit_load(s.as_ptr(), 2.0, &mut orbit) },
        CgStatus::Numerical
    );
    assert!(orbit.is_null());
}

#[test]
fn bad_json_is_a_config_error() {
    let mut sc = ptr::null_mut();
    for text in ["{", r#"{"d0": 1}"#, r#"{"duration_periods": -1}"#] {
        let json = CString::new(text).unwrap();
        assert_eq!(
            unsafe { cg_scenario_from_json(json.as_ptr(), &mut sc) },
            CgStatus::Config,
            "{text}"
        );
        assert!(sc.is_null());
    }
}

#[test]
fn short_scenario_runs_and_exports() {
    let json = CString::new(
        r#"{"prediction_horizon_periods": 0.1, "control_horizon_periods": 0.02,
            "duration_periods": 0.04, "solver": {"grid_size": 256},
            "ablation": "no_phasing"}"#,
    )
    .unwrap();
    let mut sc = ptr::null_mut();
    let mut log = ptr::null_mut();
    unsafe {
        assert_eq!(cg_scenario_from_json(json.as_ptr(), &mut sc), CgStatus::Ok);
        assert_eq!(cg_scenario_run(sc, &mut log), CgStatus::Ok);
        let n = cg_log_len(log);
        assert_eq!(n, 81);
        let mut r = std::mem::zeroed::<CgRecord>();
        assert_eq!(cg_log_record(log, n - 1, &mut r), CgStatus::Ok);
        assert!((r.t_nd - 0.04 * 1.466695).abs() < 1e-9);
        assert!(r.tau_e.is_nan() && r.tau_p.is_nan());
        assert!(r.sep_km > 0.0);
        assert_eq!(cg_log_record(log, n, &mut r), CgStatus::OutOfRange);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("log.csv").to_str().unwrap()).unwrap();
        assert_eq!(cg_log_write_csv(log, path.as_ptr()), CgStatus::Ok);
        let text = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(text.lines().count(), n + 1);

        let bad = CString::new("/no/such/dir/log.csv").unwrap();
        assert_eq!(cg_log_write_csv(log, bad.as_ptr()), CgStatus::Io);

        cg_log_free(log);
        cg_scenario_free(sc);
    }
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "cislunar_game.h"

int main(void) {
    CgOrbit *orbit = NULL;
    if (cg_orbit_nrho_new(&orbit) != CG_STATUS_OK) return 1;
    if (fabs(cg_orbit_period(orbit) - 1.466695) > 1e-12) return 2;
    cg_orbit_free(orbit);
    double c;
    if (cg_jacobi_constant(NULL, &c) != CG_STATUS_NULL_ARGUMENT) return 3;
    char msg[64];
    if (cg_last_error_message(msg, sizeof msg) == 0) return 4;
    CgScenario *sc = NULL;
    if (cg_scenario_from_json("{\"bogus\": 1}", &sc) != CG_STATUS_CONFIG || sc) return 5;
    printf("ok\n");
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // the archive built alongside this test binary
    let deps = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let archive = deps.join("libcislunar_game_ffi.a");
    assert!(archive.exists(), "missing {}", archive.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&src)
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
