use std::sync::OnceLock;

use cislunar_game::ddp::SolverSettings;
use cislunar_game::sim::*;
use proptest::prelude::*;

/// Short engagement: a tenth of a period with replans every 0.04 periods.
fn short_config() -> ScenarioConfig {
    ScenarioConfig {
        prediction_horizon_periods: 0.2,
        control_horizon_periods: 0.04,
        duration_periods: 0.1,
        solver: SolverSettings {
            grid_size: 512,
            ..SolverSettings::default()
        },
        ..ScenarioConfig::default()
    }
}

fn short_run() -> &'static SimulationLog {
    static CELL: OnceLock<SimulationLog> = OnceLock::new();
    CELL.get_or_init(|| run_mpc(&Scenario::build(&short_config()).unwrap()).unwrap())
}

#[test]
fn replan_count_follows_control_horizon() {
    let log = short_run();
    assert!(log.aborted.is_none());
    let cfg = short_config();
    let expected = (cfg.duration_periods / cfg.control_horizon_periods).ceil() as usize;
    assert_eq!(log.replans.len(), expected);
    assert!(log.records.windows(2).all(|w| w[1].t_nd > w[0].t_nd));
    // 2000 samples per period
    assert_eq!(log.records.len(), 201);
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let log = short_run();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.csv");
    write_log_csv(log, &path).unwrap();
    let back = read_log_csv(&path).unwrap();
    assert_eq!(back.len(), log.records.len());
    for (a, b) in back.iter().zip(&log.records) {
        assert_eq!(a.sep_km.to_bits(), b.sep_km.to_bits());
        assert_eq!(a, b);
    }
    let header = std::fs::read_to_string(&path).unwrap();
    let first = header.lines().next().unwrap();
    assert_eq!(
        first,
        "t_nd,t_days,xe,ye,ze,vxe,vye,vze,xp,yp,zp,vxp,vyp,vzp,ce,cp,uex_N,uey_N,uez_N,tau_e,\
         upx_N,upy_N,upz_N,tau_p,err_e_km,err_p_km,sep_km,a,alpha"
    );
}

#[test]
fn json_round_trip_keeps_metadata() {
    let log = short_run();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    write_log_json(log, &path).unwrap();
    let back = read_log_json(&path).unwrap();
    assert_eq!(&back, log);
    assert_eq!(back.schema_version, LOG_SCHEMA_VERSION);
}

#[test]
fn separation_column_matches_state_columns() {
    let log = short_run();
    let lu = log.config.system.length_unit_km;
    for r in &log.records {
        let d = ((r.xe - r.xp).powi(2) + (r.ye - r.yp).powi(2) + (r.ze - r.zp).powi(2)).sqrt();
        assert!(
            (d * lu - r.sep_km).abs() <= 1e-9,
            "{} vs {}",
            d * lu,
            r.sep_km
        );
    }
}

#[test]
fn unopposed_evader_on_reference_does_not_thrust() {
    let cfg = ScenarioConfig {
        opponent: Opponent::None,
        // half a period behind, far outside the proximity radius
        pursuer_phase_nd: -0.5 * cislunar_game::orbit::NRHO_PERIOD_ND,
        duration_periods: 1.0,
        solver: SolverSettings {
            grid_size: 512,
            ..SolverSettings::default()
        },
        ..ScenarioConfig::default()
    };
    let log = run_mpc(&Scenario::build(&cfg).unwrap()).unwrap();
    assert!(log.aborted.is_none());
    assert_eq!(log.pursuer_impulse_ns, 0.0);
    assert!(
        log.evader_impulse_ns < 1e-3,
        "evader impulse {} N s",
        log.evader_impulse_ns
    );
    let worst = log.records.iter().map(|r| r.err_e_km).fold(0.0, f64::max);
    assert!(worst < 1.0, "tracking error {worst} km");
}

#[test]
fn no_phasing_drops_tau_channels() {
    let cfg = ScenarioConfig {
        ablation: Some(Ablation::NoPhasing),
        duration_periods: 0.04,
        ..short_config()
    };
    let log = run_mpc(&Scenario::build(&cfg).unwrap()).unwrap();
    assert!(log
        .records
        .iter()
        .all(|r| r.tau_e.is_none() && r.tau_p.is_none()));
    assert!(log
        .records
        .iter()
        .all(|r| (r.ce - r.t_nd - cfg.evader_phase_nd).abs() < 1e-9));
}

#[test]
fn identical_configs_give_identical_logs() {
    let cfg = ScenarioConfig {
        duration_periods: 0.04,
        ..short_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let log = run_mpc(&Scenario::build(&cfg).unwrap()).unwrap();
        let path = dir.path().join(format!("{k}.csv"));
        write_log_csv(&log, &path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn plot_data_writes_all_six_slices() {
    let log = short_run();
    let dir = tempfile::tempdir().unwrap();
    let inputs = PlotInputs {
        main: Some(&log.records),
        lq: Some(&log.records),
        no_shaping: Some(&log.records),
        no_phasing: Some(&log.records),
        neither: Some(&log.records),
    };
    let files = write_plot_data(&inputs, dir.path()).unwrap();
    assert_eq!(files.len(), PLOT_FILES.len());
    for name in PLOT_FILES {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.lines().count() > 1, "{name} is empty");
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_horizons() {
    assert!(ScenarioConfig::from_json(r#"{"d0": 660}"#).is_err());
    let bad = r#"{"prediction_horizon_periods": 0.1, "control_horizon_periods": 0.2}"#;
    assert_eq!(ScenarioConfig::from_json(bad).unwrap_err().exit_code(), 2);
    let ok = ScenarioConfig::from_json(r#"{"opponent": "lq", "duration_periods": 2}"#).unwrap();
    assert_eq!(ok.opponent, Opponent::Lq);
}

proptest! {
    #[test]
    fn aggressiveness_is_non_increasing_in_separation(
        s in prop::collection::vec(0.0f64..2000.0, 1..20),
        bump in 0.0f64..500.0,
    ) {
        let a = update_aggressiveness(&s, 660.0);
        let raised: Vec<f64> = s.iter().map(|v| v + bump).collect();
        let b = update_aggressiveness(&raised, 660.0);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b <= a);
    }
}
