use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cislunar_game::dynamics::{
    jacobi_constant, lagrange_points, propagate_state, SpacecraftState, SystemParams,
};
use cislunar_game::lq::{solve_riccati, RiccatiSummary};
use cislunar_game::ode::Tolerances;
use cislunar_game::orbit::{
    differential_correct, monodromy, southern_nrho, CorrectionMode, ManifoldKind, PeriodicOrbit,
};
use cislunar_game::sim::{
    nominal_table, read_log_csv, run_mpc, write_log_csv, write_log_json, write_plot_data, Ablation,
    Opponent, PlotInputs, Scenario, ScenarioConfig, SolveSummary, LOG_SCHEMA_VERSION,
};
use cislunar_game::{Error, Result};

/// Pursuit-evasion games on cislunar periodic orbits.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate one uncontrolled spacecraft and report Jacobi drift.
    Propagate(PropagateArgs),
    /// Load or correct a periodic orbit, compute its monodromy matrix and
    /// optionally export manifold directions.
    Orbit(OrbitArgs),
    /// Solve the engagement game once from the scenario's initial state.
    SolveGame(SolveArgs),
    /// Run the receding-horizon engagement.
    Simulate(SimulateArgs),
    /// Solve the LQ game Riccati equations over one prediction horizon.
    Baseline(BaselineArgs),
    /// Cut per-figure CSV slices from simulation logs.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct PropagateArgs {
    /// Scenario config supplying the system parameters (Earth-Moon if absent).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initial state: L1..L5 at rest, or six comma-separated numbers.
    #[arg(long)]
    state: String,
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    #[arg(long)]
    tf: f64,
    #[arg(long, default_value_t = 1e-12)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-12)]
    atol: f64,
    /// Number of uniformly spaced output rows.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Trajectory CSV (t, x, y, z, vx, vy, vz).
    #[arg(long, default_value = "trajectory.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Correction {
    /// Use the state and period as given.
    None,
    FixedPeriod,
    FixedX,
    FixedZ,
}

#[derive(Args)]
struct OrbitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Orbit initial state, six comma-separated numbers; the scenario orbit
    /// (or the generated NRHO) when absent.
    #[arg(long, requires = "period_nd")]
    state_nd: Option<String>,
    #[arg(long)]
    period_nd: Option<f64>,
    /// Single-shooting correction applied to --state-nd first.
    #[arg(long, value_enum, default_value_t = Correction::None)]
    correct: Correction,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Manifold CSV: t, x..vz, eu1..eu6, es1..es6.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evader aggressiveness; the blend follows the configured mapping.
    #[arg(long, default_value_t = 0.0)]
    aggressiveness: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// One or more scenario configs.
    #[arg(long, required = true, num_args = 1..)]
    config: Vec<PathBuf>,
    /// Output directory; with several configs each run gets a subdirectory
    /// named after its config file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    opponent: Option<OpponentArg>,
    #[arg(long, value_enum)]
    ablate: Option<AblateArg>,
    /// Scenarios run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum OpponentArg {
    Saddle,
    Lq,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblateArg {
    NoShaping,
    NoPhasing,
    Neither,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Report JSON.
    #[arg(long, default_value = "baseline.json")]
    out: PathBuf,
    /// Start of the horizon along the pursuer's reference phase.
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    /// Gain samples written per mode.
    #[arg(long, default_value_t = 200)]
    samples: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Main saddle-point run: a log CSV or the directory holding log.csv.
    #[arg(long)]
    main: PathBuf,
    #[arg(long)]
    lq: Option<PathBuf>,
    #[arg(long)]
    no_shaping: Option<PathBuf>,
    #[arg(long)]
    no_phasing: Option<PathBuf>,
    #[arg(long)]
    neither: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Propagate(a) => cmd_propagate(a),
        Command::Orbit(a) => cmd_orbit(a),
        Command::SolveGame(a) => cmd_solve(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::PlotData(a) => cmd_plot_data(a),
    };
    match result {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            // a closed pipe on stdout is not an error of the command
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ScenarioConfig::from_json(&text).map_err(|e| match e {
        Error::Serde(s) => Error::Config(format!("{}: {s}", path.display())),
        other => other,
    })
}

fn optional_config(path: &Option<PathBuf>) -> Result<ScenarioConfig> {
    path.as_deref()
        .map_or_else(|| Ok(ScenarioConfig::default()), load_config)
}

fn parse_state(text: &str, params: &SystemParams) -> Result<SpacecraftState> {
    let upper = text.trim().to_ascii_uppercase();
    if let Some(k) = upper.strip_prefix('L') {
        let k: usize = k
            .parse()
            .map_err(|_| Error::Config(format!("unknown state {text:?}")))?;
        if !(1..=5).contains(&k) {
            return Err(Error::Config(format!("no Lagrange point {text}")));
        }
        return Ok(SpacecraftState::at_rest(lagrange_points(params)?[k - 1]));
    }
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad state {text:?}: {e}")))?;
    if v.len() != 6 {
        return Err(Error::Config(format!(
            "state needs 6 components, got {}",
            v.len()
        )));
    }
    Ok(SpacecraftState::from_slice(&v))
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_propagate(a: PropagateArgs) -> Result<serde_json::Value> {
    let cfg = optional_config(&a.config)?;
    let params = &cfg.system;
    let s0 = parse_state(&a.state, params)?;
    if a.tf == a.t0 || a.samples < 2 {
        return Err(Error::Config(
            "empty trajectory: need tf != t0 and at least 2 samples".into(),
        ));
    }
    let tol = Tolerances::new(a.rtol, a.atol);
    let traj = propagate_state(&s0, params, a.t0, a.tf, &tol)?;
    let c0 = jacobi_constant(&s0, params)?;
    let mut drift: f64 = 0.0;
    let rows: Vec<Vec<f64>> = traj
        .sample_uniform(a.samples)
        .into_iter()
        .map(|(t, y)| {
            let c = jacobi_constant(&SpacecraftState::from_slice(y.as_slice()), params)
                .unwrap_or(f64::NAN);
            drift = drift.max((c - c0).abs());
            std::iter::once(t).chain(y.iter().copied()).collect()
        })
        .collect();
    write_rows(
        &a.out,
        &["t", "x", "y", "z", "vx", "vy", "vz"],
        rows.into_iter(),
    )?;
    Ok(json!({
        "schema_version": LOG_SCHEMA_VERSION,
        "output": a.out,
        "steps": traj.step_count(),
        "jacobi_initial": c0,
        "jacobi_max_drift": drift,
        "final_state": traj.final_state().as_slice(),
    }))
}

fn resolve_orbit(a: &OrbitArgs, cfg: &ScenarioConfig) -> Result<PeriodicOrbit> {
    let params = &cfg.system;
    let tol = &cfg.orbit_tol;
    match (&a.state_nd, a.period_nd) {
        (Some(text), Some(period)) => {
            let s = parse_state(text, params)?;
            let (s, period) = match a.correct {
                Correction::None => (s, period),
                Correction::FixedPeriod => {
                    differential_correct(&s, period, params, CorrectionMode::FixedPeriod)?
                }
                Correction::FixedX => {
                    differential_correct(&s, period, params, CorrectionMode::FixedX)?
                }
                Correction::FixedZ => {
                    differential_correct(&s, period, params, CorrectionMode::FixedZ)?
                }
            };
            PeriodicOrbit::load(s, period, params, tol)
        }
        _ => match (&cfg.orbit.initial_state_nd, cfg.orbit.period_nd) {
            (Some(s), Some(p)) => {
                PeriodicOrbit::load(SpacecraftState::from_slice(s), p, params, tol)
            }
            _ => southern_nrho(params, tol),
        },
    }
}

fn cmd_orbit(a: OrbitArgs) -> Result<serde_json::Value> {
    let cfg = optional_config(&a.config)?;
    let orbit = resolve_orbit(&a, &cfg)?;
    let data = monodromy(&orbit, &cfg.orbit_tol)?;
    let params = &cfg.system;
    let ((peri, _), (apo, _)) = orbit.secondary_distance_extrema(4000);
    if let Some(path) = &a.export {
        let n = a.samples.max(2);
        let rows = (0..n).map(|i| {
            let t = orbit.period() * i as f64 / (n - 1) as f64;
            let x = orbit.sample(t);
            let eu = data.direction(ManifoldKind::Unstable, t);
            let es = data.direction(ManifoldKind::Stable, t);
            std::iter::once(t)
                .chain(x.0.iter().copied())
                .chain(eu.iter().copied())
                .chain(es.iter().copied())
                .collect()
        });
        let header = [
            "t", "x", "y", "z", "vx", "vy", "vz", "eu1", "eu2", "eu3", "eu4", "eu5", "eu6", "es1",
            "es2", "es3", "es4", "es5", "es6",
        ];
        write_rows(path, &header, rows)?;
    }
    let eig: Vec<[f64; 2]> = data.eigenvalues().iter().map(|z| [z.re, z.im]).collect();
    Ok(json!({
        "schema_version": LOG_SCHEMA_VERSION,
        "period_nd": orbit.period(),
        "period_days": params.nd_to_days(orbit.period()),
        "initial_state_nd": orbit.initial_state().0.as_slice(),
        "periodicity_residual": orbit.periodicity_residual(),
        "unstable_eigenvalue": data.unstable_eigenvalue(),
        "stable_eigenvalue": data.stable_eigenvalue(),
        "monodromy_determinant": data.monodromy().determinant(),
        "eigenvalues": eig,
        "perilune_km": params.nd_to_km(peri),
        "apolune_km": params.nd_to_km(apo),
        "export": a.export,
    }))
}

fn cmd_solve(a: SolveArgs) -> Result<serde_json::Value> {
    let cfg = load_config(&a.config)?;
    let scenario = Scenario::build(&cfg)?;
    let x0 = scenario.initial_state();
    let alpha_e = scenario.evader_alpha(a.aggressiveness.clamp(0.0, 1.0));
    let (game, out) = scenario.solve_once(&x0, 0.0, alpha_e, None)?;
    std::fs::create_dir_all(&a.out)?;
    let summary = SolveSummary {
        schema_version: LOG_SCHEMA_VERSION,
        t0_nd: out.evader.t0(),
        tf_nd: out.evader.tf(),
        alpha_e: game.weights().alpha_e,
        alpha_p: game.weights().alpha_p,
        report: out.report.clone(),
        evader: out.evader.clone(),
        pursuer: out.pursuer.clone(),
        gains: out.gains.clone(),
    };
    let json_path = a.out.join("solve.json");
    serde_json::to_writer(
        std::io::BufWriter::new(std::fs::File::create(&json_path)?),
        &summary,
    )?;
    let csv_path = a.out.join("nominal.csv");
    let header = [
        "t_nd", "xe", "ye", "ze", "vxe", "vye", "vze", "xp", "yp", "zp", "vxp", "vyp", "vzp", "ce",
        "cp",
    ];
    write_rows(
        &csv_path,
        &header,
        nominal_table(&out.nominal, out.evader.grid())
            .into_iter()
            .map(|r| r.to_vec()),
    )?;
    Ok(json!({
        "schema_version": LOG_SCHEMA_VERSION,
        "converged": out.report.converged,
        "iterations": out.report.iterations,
        "update_norm": out.report.update_norm,
        "cost": out.nominal.cost,
        "outputs": [json_path, csv_path],
    }))
}

fn simulate_one(cfg: ScenarioConfig, dir: &Path) -> Result<serde_json::Value> {
    let log = run_mpc(&Scenario::build(&cfg)?)?;
    std::fs::create_dir_all(dir)?;
    write_log_csv(&log, &dir.join("log.csv"))?;
    write_log_json(&log, &dir.join("log.json"))?;
    let threshold = cfg.separation_objective_km;
    let summary = json!({
        "schema_version": LOG_SCHEMA_VERSION,
        "output": dir,
        "records": log.records.len(),
        "replans": log.replans.len(),
        "unconverged_replans": log.replans.iter().filter(|r| !r.converged).count(),
        "permanent_crossing_days": log.permanent_crossing_days(threshold),
        "periods_below_objective": log.periods_below(threshold),
        "evader_impulse_ns": log.evader_impulse_ns,
        "pursuer_impulse_ns": log.pursuer_impulse_ns,
        "aborted": log.aborted,
    });
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    if let Some(reason) = &log.aborted {
        return Err(Error::SolverFailure(format!(
            "run aborted, partial log in {}: {reason}",
            dir.display()
        )));
    }
    Ok(summary)
}

fn cmd_simulate(a: SimulateArgs) -> Result<serde_json::Value> {
    let mut jobs = Vec::new();
    for path in &a.config {
        let mut cfg = load_config(path)?;
        if let Some(o) = a.opponent {
            cfg.opponent = match o {
                OpponentArg::Saddle => Opponent::Saddle,
                OpponentArg::Lq => Opponent::Lq,
                OpponentArg::None => Opponent::None,
            };
        }
        if let Some(ab) = a.ablate {
            cfg.ablation = Some(match ab {
                AblateArg::NoShaping => Ablation::NoShaping,
                AblateArg::NoPhasing => Ablation::NoPhasing,
                AblateArg::Neither => Ablation::Neither,
            });
        }
        let dir = if a.config.len() == 1 {
            a.out.clone()
        } else {
            let stem = path.file_stem().unwrap_or_default();
            a.out.join(stem)
        };
        jobs.push((cfg, dir));
    }
    let workers = a.jobs.clamp(1, jobs.len());
    let mut results: Vec<Option<Result<serde_json::Value>>> = jobs.iter().map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some((cfg, dir)) = jobs.get(i) else { break };
                let r = simulate_one(cfg.clone(), dir);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let mut summaries = Vec::new();
    for r in results {
        summaries.push(r.expect("every job ran")?);
    }
    if summaries.len() == 1 {
        Ok(summaries.pop().expect("one summary"))
    } else {
        Ok(json!({ "schema_version": LOG_SCHEMA_VERSION, "runs": summaries }))
    }
}

fn cmd_baseline(a: BaselineArgs) -> Result<serde_json::Value> {
    let cfg = load_config(&a.config)?;
    let scenario = Scenario::build(&cfg)?;
    let setup = scenario.lq_setup(&scenario.game, cfg.pursuer_phase_nd);
    let (t0, tf) = (a.t0, a.t0 + scenario.prediction_horizon());
    let tol = cfg.orbit_tol;
    let mut modes = Vec::new();
    for (name, scale) in [("pursuit", 1.0), ("track", 0.0)] {
        let mut entry = serde_json::Map::new();
        entry.insert("mode".into(), json!(name));
        let mut s = scale;
        let mut solved = None;
        for _ in 0..2 {
            let trial = setup.with_evasion(setup.m * s, setup.m_f * s);
            match solve_riccati(&trial, t0, tf, &tol) {
                Ok(sol) => {
                    solved = Some(sol);
                    break;
                }
                Err(Error::ConjugatePoint { t }) if s > 0.0 => {
                    eprintln!("conjugate point at t = {t} with evasion scale {s}; halving");
                    s *= 0.5;
                }
                Err(e) => return Err(e),
            }
        }
        let Some(sol) = solved else {
            entry.insert("conjugate_point".into(), json!(true));
            modes.push(serde_json::Value::Object(entry));
            continue;
        };
        let n = a.samples.max(2);
        let mut asym: f64 = 0.0;
        let mut gains = Vec::with_capacity(n);
        for i in 0..n {
            let t = t0 + (tf - t0) * i as f64 / (n - 1) as f64;
            let m = sol.s(t);
            asym = asym.max((&m - m.transpose()).amax());
            let (ke, kp) = sol.gains(t);
            gains.push(json!({ "t": t, "k_e": ke.as_slice(), "k_p": kp.as_slice() }));
        }
        entry.insert(
            "summary".into(),
            serde_json::to_value(RiccatiSummary::of(&sol, s))?,
        );
        entry.insert("max_asymmetry".into(), json!(asym));
        entry.insert("symmetric".into(), json!(asym <= 1e-9));
        entry.insert("gains_column_major".into(), json!(gains));
        modes.push(serde_json::Value::Object(entry));
    }
    let report = json!({
        "schema_version": LOG_SCHEMA_VERSION,
        "t0_nd": t0,
        "tf_nd": tf,
        "modes": modes,
    });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, serde_json::to_string(&report)?)?;
    let symmetric = report["modes"]
        .as_array()
        .map(|m| m.iter().all(|e| e["symmetric"] != json!(false)))
        .unwrap_or(false);
    Ok(json!({
        "schema_version": LOG_SCHEMA_VERSION,
        "output": a.out,
        "symmetric": symmetric,
        "modes": report["modes"].as_array().map(|m| m.iter().map(|e| json!({
            "mode": e["mode"],
            "evasion_scale": e["summary"]["evasion_scale"],
            "max_asymmetry": e["max_asymmetry"],
        })).collect::<Vec<_>>()),
    }))
}

fn log_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("log.csv")
    } else {
        p.to_path_buf()
    }
}

fn cmd_plot_data(a: PlotArgs) -> Result<serde_json::Value> {
    let read = |p: &Option<PathBuf>| -> Result<Option<Vec<_>>> {
        p.as_deref().map(|p| read_log_csv(&log_path(p))).transpose()
    };
    let main = read_log_csv(&log_path(&a.main))?;
    let lq = read(&a.lq)?;
    let no_shaping = read(&a.no_shaping)?;
    let no_phasing = read(&a.no_phasing)?;
    let neither = read(&a.neither)?;
    let inputs = PlotInputs {
        main: Some(&main),
        lq: lq.as_deref(),
        no_shaping: no_shaping.as_deref(),
        no_phasing: no_phasing.as_deref(),
        neither: neither.as_deref(),
    };
    let files = write_plot_data(&inputs, &a.out)?;
    Ok(json!({ "schema_version": LOG_SCHEMA_VERSION, "files": files }))
}
