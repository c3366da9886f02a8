use std::sync::OnceLock;

use cislunar_game::dynamics::{propagate_state, SpacecraftState, SystemParams};
use cislunar_game::ode::Tolerances;
use cislunar_game::orbit::*;
use cislunar_game::Error;
use nalgebra::{Matrix6, Vector6};
use proptest::prelude::*;

fn tol() -> Tolerances {
    Tolerances::new(1e-12, 1e-12)
}

fn nrho() -> &'static (PeriodicOrbit, ManifoldData) {
    static CELL: OnceLock<(PeriodicOrbit, ManifoldData)> = OnceLock::new();
    CELL.get_or_init(|| {
        let orbit = southern_nrho(&SystemParams::earth_moon(), &tol()).unwrap();
        let data = monodromy(&orbit, &tol()).unwrap();
        (orbit, data)
    })
}

#[test]
fn corrected_nrho_is_periodic_to_1e8() {
    let (orbit, _) = nrho();
    assert!(
        orbit.periodicity_residual() <= 1e-8,
        "{:e}",
        orbit.periodicity_residual()
    );
    assert_eq!(orbit.period(), NRHO_PERIOD_ND);
    let s = orbit.initial_state();
    assert!(
        s.0[2] < 0.0,
        "southern family starts below the plane at apolune"
    );
}

#[test]
fn nrho_shape_has_close_perilune() {
    let (orbit, _) = nrho();
    let p = orbit.params();
    let ((peri, _), (apo, _)) = orbit.secondary_distance_extrema(4000);
    let (peri_km, apo_km) = (p.nd_to_km(peri), p.nd_to_km(apo));
    assert!(peri_km < apo_km);
    assert!(
        peri_km > 1737.4 && peri_km < 10_000.0,
        "perilune radius {peri_km} km"
    );
    assert!(apo_km > 50_000.0, "apolune radius {apo_km} km");
}

#[test]
fn non_periodic_state_is_rejected() {
    let p = SystemParams::earth_moon();
    let s = SpacecraftState::new(0.9, 0.1, 0.05, 0.02, 0.1, -0.03);
    match PeriodicOrbit::load(s, 2.0, &p, &tol()) {
        Err(Error::Periodicity { residual }) => assert!(residual > 1e-6),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn corrector_fixed_point() {
    let (orbit, _) = nrho();
    let p = orbit.params();
    let (state, period) = differential_correct(
        orbit.initial_state(),
        orbit.period(),
        p,
        CorrectionMode::FixedZ,
    )
    .unwrap();
    assert!((state.0 - orbit.initial_state().0).amax() < 1e-10);
    assert!((period - orbit.period()).abs() < 1e-9);
}

#[test]
fn sample_wraps_and_matches_direct_propagation() {
    let (orbit, _) = nrho();
    let r = orbit.periodicity_residual().max(1e-12);
    let x0 = orbit.initial_state().0;
    assert_eq!(orbit.sample(0.0).0, x0);
    let t = orbit.period();
    assert!((orbit.sample(t).0 - x0).norm() <= r);
    assert!((orbit.sample(-t).0 - x0).norm() <= r);
    let half =
        propagate_state(orbit.initial_state(), orbit.params(), 0.0, 0.5 * t, &tol()).unwrap();
    let direct = Vector6::from_column_slice(half.final_state().as_slice());
    assert!((orbit.sample(0.5 * t).0 - direct).norm() < 1e-9);
    for k in [-3.0, -1.0, 1.0, 2.0, 5.0] {
        let c = 0.3217;
        assert!((orbit.sample(c + k * t).0 - orbit.sample(c).0).norm() < 1e-8);
    }
}

#[test]
fn monodromy_is_symplectic_with_trivial_pair() {
    let (_, data) = nrho();
    let det = data.monodromy().determinant();
    assert!((det - 1.0).abs() <= 1e-6, "det {det}");
    let eig = data.eigenvalues();
    let near_one = eig
        .iter()
        .filter(|e| (*e - nalgebra::Complex::new(1.0, 0.0)).norm() < 1e-4)
        .count();
    assert!(near_one >= 2, "{eig:?}");
    for e in eig {
        let inv = e.inv();
        assert!(
            eig.iter().any(|f| (f - inv).norm() <= 1e-4 * inv.norm()),
            "no reciprocal for {e}"
        );
    }
    assert!(data.unstable_eigenvalue().abs() > 1.0);
    assert!((data.unstable_eigenvalue() * data.stable_eigenvalue() - 1.0).abs() < 1e-6);
}

#[test]
fn eigenpairs_hold() {
    let (_, data) = nrho();
    let m = data.monodromy();
    for (e, l) in [
        (data.e_u0(), data.unstable_eigenvalue()),
        (data.e_s0(), data.stable_eigenvalue()),
    ] {
        let lhs = m * e;
        assert!((lhs - e * l).norm() <= 1e-8 * lhs.norm().max(l.abs()));
        let first = e.iter().find(|c| c.abs() > 1e-8).unwrap();
        assert!(*first > 0.0);
    }
}

#[test]
fn direction_at_zero_and_one_period() {
    let (orbit, data) = nrho();
    assert_eq!(
        manifold_direction(data, ManifoldKind::Unstable, 0.0),
        *data.e_u0()
    );
    assert_eq!(
        manifold_direction(data, ManifoldKind::Stable, 0.0),
        *data.e_s0()
    );
    let t = orbit.period();
    for which in [ManifoldKind::Unstable, ManifoldKind::Stable] {
        let e0 = manifold_direction(data, which, 0.0);
        let et = manifold_direction(data, which, t);
        assert!((et - e0).norm().min((et + e0).norm()) < 1e-7);
        // just before the period the stored STM gives the same line
        let before = manifold_direction(data, which, t * (1.0 - 1e-12));
        assert!((before - e0).norm().min((before + e0).norm()) < 1e-6);
    }
}

#[test]
fn floquet_extension_matches_direct_stm() {
    // second-period direction from a long STM integration
    let (orbit, data) = nrho();
    let t = 1.37 * orbit.period();
    let traj = propagate_with_stm(orbit.initial_state(), orbit.params(), 0.0, t, &tol()).unwrap();
    let phi = Matrix6::from_column_slice(&traj.final_state().as_slice()[6..42]);
    let v = phi * data.e_u0();
    let v = v / v.norm();
    let e = manifold_direction(data, ManifoldKind::Unstable, t);
    assert!((e - v).norm() < 1e-6, "{}", (e - v).norm());
}

#[test]
fn stable_planar_orbit_has_no_unstable_manifold() {
    // retrograde planar orbit about the Moon, linearly stable
    let p = SystemParams::earth_moon();
    let guess = SpacecraftState::new(1.0874403, 0.0, 0.0, 0.0, -0.4636277, 0.0);
    let (state, period) =
        differential_correct(&guess, NRHO_PERIOD_ND, &p, CorrectionMode::FixedX).unwrap();
    let orbit = PeriodicOrbit::load(state, period, &p, &tol()).unwrap();
    assert!(matches!(
        monodromy(&orbit, &tol()),
        Err(Error::OrbitStability(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn directions_are_unit_and_forward_parallel(frac in 0.0f64..1.0) {
        let (orbit, data) = nrho();
        let t = frac * orbit.period();
        for (which, e0) in [(ManifoldKind::Unstable, data.e_u0()), (ManifoldKind::Stable, data.e_s0())] {
            let e = manifold_direction(data, which, t);
            prop_assert!((e.norm() - 1.0).abs() < 1e-12);
            let v = data.stm(t) * e0;
            prop_assert!(e.dot(&v) > 0.0);
            prop_assert!((e - v / v.norm()).norm() < 1e-12);
        }
    }

    #[test]
    fn projector_is_rank_one_orthogonal(frac in 0.0f64..3.0, seed in prop::array::uniform6(-1.0f64..1.0)) {
        let (orbit, data) = nrho();
        let t = frac * orbit.period();
        let pu = unstable_projector(data, t);
        let e = manifold_direction(data, ManifoldKind::Unstable, t);
        prop_assert!((pu * pu - pu).norm() <= 1e-10);
        prop_assert_eq!(pu, pu.transpose());
        prop_assert!((pu.trace() - 1.0).abs() < 1e-12);
        prop_assert!((pu * e - e).norm() < 1e-12);
        let v = Vector6::from_column_slice(&seed);
        let perp = v - e * e.dot(&v);
        prop_assert!((pu * perp).norm() < 1e-12);
    }

    #[test]
    fn sample_is_continuous(c in -5.0f64..5.0) {
        let (orbit, _) = nrho();
        let d = (orbit.sample(c + 1e-9).0 - orbit.sample(c).0).norm();
        prop_assert!(d < 1e-6);
    }
}
