//! C ABI over the engagement library.
//!
//! Objects cross the boundary as opaque handles created by `cg_*_new` style
//! functions and released with the matching `cg_*_free`. Every fallible call
//! returns a [`CgStatus`]; the message of the most recent failure on the
//! calling thread is available through [`cg_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cislunar_game::dynamics::{jacobi_constant, propagate_state, SpacecraftState, SystemParams};
use cislunar_game::ode::Tolerances;
use cislunar_game::orbit::{monodromy, southern_nrho, ManifoldData, ManifoldKind, PeriodicOrbit};
use cislunar_game::sim::{run_mpc, write_log_csv, Scenario, ScenarioConfig, SimulationLog};
use cislunar_game::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStatus {
    Ok = 0,
    NullArgument = 1,
    /// Invalid configuration or argument.
    Config = 2,
    /// Integration, correction or solver failure.
    Numerical = 3,
    Io = 4,
    /// Index or buffer size out of range.
    OutOfRange = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

impl From<&Error> for CgStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            2 => CgStatus::Config,
            4 => CgStatus::Io,
            _ => CgStatus::Numerical,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: CgStatus, msg: impl Into<String>) -> CgStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> CgStatus {
    let status = CgStatus::from(&e);
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`CgStatus::Internal`].
fn guard(f: impl FnOnce() -> CgStatus) -> CgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(CgStatus::Internal, "panic inside the library"),
    }
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Jacobi constant of a normalized Earth-Moon state `s[6]`.
///
/// # Safety
/// `s` must point to 6 doubles and `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn cg_jacobi_constant(s: *const f64, out: *mut f64) -> CgStatus {
    if s.is_null() || out.is_null() {
        return fail(CgStatus::NullArgument, "null argument");
    }
    guard(|| {
        let state = SpacecraftState::from_slice(std::slice::from_raw_parts(s, 6));
        match jacobi_constant(&state, &SystemParams::earth_moon()) {
            Ok(c) => {
                *out = c;
                CgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Propagates an uncontrolled Earth-Moon state from `t0` to `tf`.
///
/// # Safety
/// `s0` must point to 6 doubles and `out` to 6 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_propagate(
    s0: *const f64,
    t0: f64,
    tf: f64,
    rel_tol: f64,
    abs_tol: f64,
    out: *mut f64,
) -> CgStatus {
    if s0.is_null() || out.is_null() {
        return fail(CgStatus::NullArgument, "null argument");
    }
    guard(|| {
        let state = SpacecraftState::from_slice(std::slice::from_raw_parts(s0, 6));
        let tol = Tolerances::new(rel_tol, abs_tol);
        match propagate_state(&state, &SystemParams::earth_moon(), t0, tf, &tol) {
            Ok(traj) => {
                std::slice::from_raw_parts_mut(out, 6)
                    .copy_from_slice(traj.final_state().as_slice());
                CgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// A periodic reference orbit with its monodromy eigenstructure.
pub struct CgOrbit {
    orbit: PeriodicOrbit,
    manifold: ManifoldData,
}

fn orbit_tol() -> Tolerances {
    Tolerances::new(1e-12, 1e-12)
}

fn finish_orbit(orbit: PeriodicOrbit, out: *mut *mut CgOrbit) -> CgStatus {
    match monodromy(&orbit, &orbit_tol()) {
        Ok(manifold) => {
            // SAFETY: callers check `out` before reaching here
            unsafe { *out = Box::into_raw(Box::new(CgOrbit { orbit, manifold })) };
            CgStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Generates the southern Earth-Moon NRHO of period 1.466695.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a handle to be
/// released with [`cg_orbit_free`].
#[no_mangle]
pub unsafe extern "C" fn cg_orbit_nrho_new(out: *mut *mut CgOrbit) -> CgStatus {
    if out.is_null() {
        return fail(CgStatus::NullArgument, "null argument");
    }
    *out = ptr::null_mut();
    guard(
        || match southern_nrho(&SystemParams::earth_moon(), &orbit_tol()) {
            Ok(orbit) => finish_orbit(orbit, out),
            Err(e) => from_error(e),
        },
    )
}

/// Loads a periodic orbit from an initial state `s0[6]` and its period.
///
/// # Safety
/// `s0` must point to 6 doubles; `out` as in [`cg_orbit_nrho_new`].
#[no_mangle]
pub unsafe extern "C" fn cg_orbit_load(
    s0: *const f64,
    period: f64,
    out: *mut *mut CgOrbit,
) -> CgStatus {
    if s0.is_null() || out.is_null() {
        return fail(CgStatus::NullArgument, "null argument");
    }
    *out = ptr::null_mut();
    guard(|| {
        let state = SpacecraftState::from_slice(std::slice::from_raw_parts(s0, 6));
        match PeriodicOrbit::load(state, period, &SystemParams::earth_moon(), &orbit_tol()) {
            Ok(orbit) => finish_orbit(orbit, out),
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `orbit` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cg_orbit_free(orbit: *mut CgOrbit) {
    if !orbit.is_null() {
        drop(Box::from_raw(orbit));
    }
}

/// Orbit period, or NaN for a null handle.
///
/// # Safety
/// `orbit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cg_orbit_period(orbit: *const CgOrbit) -> f64 {
    orbit.as_ref().map_or(f64::NAN, |o| o.orbit.period())
}

/// Real unstable monodromy eigenvalue, or NaN for a null handle.
///
/// # Safety
/// `orbit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cg_orbit_unstable_eigenvalue(orbit: *const CgOrbit) -> f64 {
    orbit
        .as_ref()
        .map_or(f64::NAN, |o| o.manifold.unstable_eigenvalue())
}

/// Reference state at `phase` into `out[6]`.
///
/// # Safety
/// `orbit` must be a live handle and `out` valid for 6 doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_orbit_sample(
    orbit: *const CgOrbit,
    phase: f64,
    out: *mut f64,
) -> CgStatus {
    let (Some(o), false) = (orbit.as_ref(), out.is_null()) else {
        return fail(CgStatus::NullArgument, "null argument");
    };
    guard(|| {
        std::slice::from_raw_parts_mut(out, 6).copy_from_slice(o.orbit.sample(phase).0.as_slice());
        CgStatus::Ok
    })
}

/// Unit unstable (`stable == 0`) or stable (`stable != 0`) direction at
/// time `t` into `out[6]`.
///
/// # Safety
/// `orbit` must be a live handle and `out` valid for 6 doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_orbit_manifold_direction(
    orbit: *const CgOrbit,
    stable: i32,
    t: f64,
    out: *mut f64,
) -> CgStatus {
    let (Some(o), false) = (orbit.as_ref(), out.is_null()) else {
        return fail(CgStatus::NullArgument, "null argument");
    };
    let kind = if stable != 0 {
        ManifoldKind::Stable
    } else {
        ManifoldKind::Unstable
    };
    guard(|| {
        let e = o.manifold.direction(kind, t);
        std::slice::from_raw_parts_mut(out, 6).copy_from_slice(e.as_slice());
        CgStatus::Ok
    })
}

/// A validated scenario with its orbit and manifold data built.
pub struct CgScenario {
    scenario: Scenario,
}

/// Builds a scenario from a JSON config (NUL-terminated UTF-8). Absent keys
/// take their defaults, so `"{}"` is the reference engagement.
///
/// # Safety
/// `json` must be a valid C string; `out` a valid pointer receiving a
/// handle for [`cg_scenario_free`].
#[no_mangle]
pub unsafe extern "C" fn cg_scenario_from_json(
    json: *const c_char,
    out: *mut *mut CgScenario,
) -> CgStatus {
    if json.is_null() || out.is_null() {
        return fail(CgStatus::NullArgument, "null argument");
    }
    *out = ptr::null_mut();
    guard(|| {
        let Ok(text) = CStr::from_ptr(json).to_str() else {
            return fail(CgStatus::Config, "config is not UTF-8");
        };
        match ScenarioConfig::from_json(text).and_then(|c| Scenario::build(&c)) {
            Ok(scenario) => {
                *out = Box::into_raw(Box::new(CgScenario { scenario }));
                CgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `scenario` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cg_scenario_free(scenario: *mut CgScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Result of a receding-horizon run.
pub struct CgLog {
    log: SimulationLog,
}

/// One logged sample. Thrusts in newtons, distances in kilometres; the
/// phase rates are NaN when phasing is disabled.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CgRecord {
    pub t_nd: f64,
    pub t_days: f64,
    pub evader: [f64; 6],
    pub pursuer: [f64; 6],
    pub c_e: f64,
    pub c_p: f64,
    pub u_e_newton: [f64; 3],
    pub tau_e: f64,
    pub u_p_newton: [f64; 3],
    pub tau_p: f64,
    pub err_e_km: f64,
    pub err_p_km: f64,
    pub sep_km: f64,
    pub aggressiveness: f64,
    pub alpha: f64,
}

/// Runs the engagement. A run stopped early by a solver failure still
/// returns its partial log together with [`CgStatus::Numerical`].
///
/// # Safety
/// `scenario` must be a live handle; `out` a valid pointer receiving a
/// handle for [`cg_log_free`].
#[no_mangle]
pub unsafe extern "C" fn cg_scenario_run(
    scenario: *const CgScenario,
    out: *mut *mut CgLog,
) -> CgStatus {
    let (Some(s), false) = (scenario.as_ref(), out.is_null()) else {
        return fail(CgStatus::NullArgument, "null argument");
    };
    *out = ptr::null_mut();
    guard(|| match run_mpc(&s.scenario) {
        Ok(log) => {
            let aborted = log.aborted.clone();
            *out = Box::into_raw(Box::new(CgLog { log }));
            match aborted {
                Some(reason) => fail(CgStatus::Numerical, reason),
                None => CgStatus::Ok,
            }
        }
        Err(e) => from_error(e),
    })
}

/// # Safety
/// `log` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cg_log_free(log: *mut CgLog) {
    if !log.is_null() {
        drop(Box::from_raw(log));
    }
}

/// Number of logged samples, 0 for a null handle.
///
/// # Safety
/// `log` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cg_log_len(log: *const CgLog) -> usize {
    log.as_ref().map_or(0, |l| l.log.records.len())
}

/// Copies sample `index` into `out`.
///
/// # Safety
/// `log` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cg_log_record(
    log: *const CgLog,
    index: usize,
    out: *mut CgRecord,
) -> CgStatus {
    let (Some(l), false) = (log.as_ref(), out.is_null()) else {
        return fail(CgStatus::NullArgument, "null argument");
    };
    let Some(r) = l.log.records.get(index) else {
        return fail(CgStatus::OutOfRange, format!("record {index} out of range"));
    };
    *out = CgRecord {
        t_nd: r.t_nd,
        t_days: r.t_days,
        evader: [r.xe, r.ye, r.ze, r.vxe, r.vye, r.vze],
        pursuer: [r.xp, r.yp, r.zp, r.vxp, r.vyp, r.vzp],
        c_e: r.ce,
        c_p: r.cp,
        u_e_newton: [r.uex_n, r.uey_n, r.uez_n],
        tau_e: r.tau_e.unwrap_or(f64::NAN),
        u_p_newton: [r.upx_n, r.upy_n, r.upz_n],
        tau_p: r.tau_p.unwrap_or(f64::NAN),
        err_e_km: r.err_e_km,
        err_p_km: r.err_p_km,
        sep_km: r.sep_km,
        aggressiveness: r.a,
        alpha: r.alpha,
    };
    CgStatus::Ok
}

/// Time in days after which separation stays above `km`; NaN when it never
/// settles above it or for a null handle.
///
/// # Safety
/// `log` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cg_log_permanent_crossing_days(log: *const CgLog, km: f64) -> f64 {
    log.as_ref()
        .and_then(|l| l.log.permanent_crossing_days(km))
        .unwrap_or(f64::NAN)
}

/// Writes the log as CSV to `path` (NUL-terminated UTF-8).
///
/// # Safety
/// `log` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn cg_log_write_csv(log: *const CgLog, path: *const c_char) -> CgStatus {
    let (Some(l), false) = (log.as_ref(), path.is_null()) else {
        return fail(CgStatus::NullArgument, "null argument");
    };
    guard(|| {
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(CgStatus::Config, "path is not UTF-8");
        };
        match write_log_csv(&l.log, Path::new(p)) {
            Ok(()) => CgStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}
