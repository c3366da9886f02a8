//! Receding-horizon engagement harness: scenario configuration, the MPC
//! loop, logging and export.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DVector, Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::ddp::{
    solve, ControlTrajectory, GainTrajectory, Rollout, SolveOutput, SolveReport, SolverSettings,
};
use crate::dynamics::{SpacecraftState, SystemParams};
use crate::error::{Error, Result};
use crate::game::{EngagementGame, EngagementState, GameWeights, STATE_DIM};
use crate::lq::{lq_pursuer_policy, LqGameSetup, LqPursuer};
use crate::ode::{self, Tolerances};
use crate::orbit::{monodromy, southern_nrho, ManifoldData, PeriodicOrbit};

/// Who drives the pursuer during execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Opponent {
    /// Pursuer half of the game solution.
    Saddle,
    /// Riccati pursuer of the linear-quadratic game.
    Lq,
    /// Zero thrust, nominal phase rate.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoShaping,
    NoPhasing,
    Neither,
}

impl Ablation {
    pub fn shaping(self) -> bool {
        matches!(self, Ablation::NoPhasing)
    }

    pub fn phasing(self) -> bool {
        matches!(self, Ablation::NoShaping)
    }
}

/// Map from aggressiveness `a` to the evader's shaping blend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMapping {
    #[default]
    OneMinusA,
    Identity,
}

impl AlphaMapping {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            AlphaMapping::OneMinusA => 1.0 - a,
            AlphaMapping::Identity => a,
        }
    }
}

/// Reference orbit: an explicit initial state and period, or the built-in
/// southern NRHO when both are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OrbitConfig {
    #[serde(default)]
    pub initial_state_nd: Option<[f64; 6]>,
    #[serde(default)]
    pub period_nd: Option<f64>,
}

/// Game weights with units in the key names. Diagonal entries only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    pub q_evader_diag: [f64; 6],
    pub q_pursuer_diag: [f64; 6],
    pub f_evader_diag: [f64; 6],
    pub f_pursuer_diag: [f64; 6],
    /// Thrust weights, per N^2.
    pub r_evader_diag_per_n2: [f64; 3],
    pub r_pursuer_diag_per_n2: [f64; 3],
    pub phase_rate_weight_evader: f64,
    pub phase_rate_weight_pursuer: f64,
    pub proximity_weight: f64,
    pub proximity_exponent: f64,
    pub d0_km: f64,
    pub evader_mass_kg: f64,
    pub pursuer_mass_kg: f64,
    /// Shaping blend of the pursuer, held fixed during a run.
    pub alpha_pursuer: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            q_evader_diag: [5.0; 6],
            q_pursuer_diag: [5.0; 6],
            f_evader_diag: [5.0; 6],
            f_pursuer_diag: [5.0; 6],
            r_evader_diag_per_n2: [0.025; 3],
            r_pursuer_diag_per_n2: [0.05; 3],
            phase_rate_weight_evader: 0.005,
            phase_rate_weight_pursuer: 0.01,
            proximity_weight: 2000.0,
            proximity_exponent: 2.1,
            d0_km: 660.0,
            evader_mass_kg: 1000.0,
            pursuer_mass_kg: 1000.0,
            alpha_pursuer: 1.0,
        }
    }
}

impl WeightsConfig {
    pub fn to_weights(&self, params: &SystemParams) -> GameWeights {
        let d6 = |d: &[f64; 6]| Matrix6::from_diagonal(&Vector6::from_column_slice(d));
        let d3 = |d: &[f64; 3]| Matrix3::from_diagonal(&Vector3::from_column_slice(d));
        GameWeights {
            q_e0: d6(&self.q_evader_diag),
            q_p0: d6(&self.q_pursuer_diag),
            f_e0: d6(&self.f_evader_diag),
            f_p0: d6(&self.f_pursuer_diag),
            r_e: d3(&self.r_evader_diag_per_n2),
            r_p: d3(&self.r_pursuer_diag_per_n2),
            a_e: self.phase_rate_weight_evader,
            a_p: self.phase_rate_weight_pursuer,
            w: self.proximity_weight,
            p: self.proximity_exponent,
            d0: params.km_to_nd(self.d0_km),
            alpha_e: 1.0,
            alpha_p: self.alpha_pursuer,
            m_e: self.evader_mass_kg,
            m_p: self.pursuer_mass_kg,
        }
    }
}

/// Settings of the linear-quadratic pursuer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqPursuerConfig {
    /// Scalar on the identity position block of `M`.
    pub evasion_weight: f64,
    pub terminal_evasion_weight: f64,
    /// Pursuit mode applies at or below this separation.
    pub threshold_km: f64,
}

impl Default for LqPursuerConfig {
    fn default() -> Self {
        Self {
            evasion_weight: 100.0,
            terminal_evasion_weight: 100.0,
            threshold_km: 600.0,
        }
    }
}

/// One engagement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub system: SystemParams,
    pub orbit: OrbitConfig,
    /// Initial phases along the orbit.
    pub evader_phase_nd: f64,
    pub pursuer_phase_nd: f64,
    /// Initial states; on the orbit at the initial phase when absent.
    pub evader_state_nd: Option<[f64; 6]>,
    pub pursuer_state_nd: Option<[f64; 6]>,
    pub weights: WeightsConfig,
    pub prediction_horizon_periods: f64,
    pub control_horizon_periods: f64,
    pub duration_periods: f64,
    pub opponent: Opponent,
    pub ablation: Option<Ablation>,
    pub alpha_mapping: AlphaMapping,
    pub separation_objective_km: f64,
    pub lq_pursuer: LqPursuerConfig,
    pub solver: SolverSettings,
    /// Integrator tolerances of the executed (true) dynamics.
    pub execution_tol: Tolerances,
    /// Orbit and monodromy propagation tolerances.
    pub orbit_tol: Tolerances,
    pub samples_per_period: usize,
    /// Recorded with the log. The loop itself draws no random numbers.
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            system: SystemParams::earth_moon(),
            orbit: OrbitConfig::default(),
            evader_phase_nd: 0.001,
            pursuer_phase_nd: 0.0,
            evader_state_nd: None,
            pursuer_state_nd: None,
            weights: WeightsConfig::default(),
            prediction_horizon_periods: 1.0,
            control_horizon_periods: 0.2,
            duration_periods: 6.0,
            opponent: Opponent::Saddle,
            ablation: None,
            alpha_mapping: AlphaMapping::OneMinusA,
            separation_objective_km: 600.0,
            lq_pursuer: LqPursuerConfig::default(),
            solver: SolverSettings::default(),
            execution_tol: Tolerances::new(1e-10, 1e-12),
            orbit_tol: Tolerances::new(1e-12, 1e-12),
            samples_per_period: 2000,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.solver.validate()?;
        let positive = [
            (
                "prediction_horizon_periods",
                self.prediction_horizon_periods,
            ),
            ("control_horizon_periods", self.control_horizon_periods),
            ("duration_periods", self.duration_periods),
            ("separation_objective_km", self.separation_objective_km),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.control_horizon_periods > self.prediction_horizon_periods {
            return Err(Error::Config(
                "control horizon exceeds the prediction horizon".into(),
            ));
        }
        if self.weights.d0_km < self.separation_objective_km {
            return Err(Error::Config(format!(
                "d0_km ({}) is below the separation objective ({})",
                self.weights.d0_km, self.separation_objective_km
            )));
        }
        if self.samples_per_period < 2 {
            return Err(Error::Config(
                "samples_per_period must be at least 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.weights.alpha_pursuer) {
            return Err(Error::Config("alpha_pursuer must lie in [0, 1]".into()));
        }
        match (&self.orbit.initial_state_nd, &self.orbit.period_nd) {
            (Some(_), Some(p)) if *p > 0.0 => {}
            (None, None) => {}
            _ => {
                return Err(Error::Config(
                    "orbit needs both initial_state_nd and a positive period_nd, or neither".into(),
                ))
            }
        }
        self.weights.to_weights(&self.system).validate()
    }

    pub fn phasing_enabled(&self) -> bool {
        self.ablation.map_or(true, Ablation::phasing)
    }

    pub fn shaping_enabled(&self) -> bool {
        self.ablation.map_or(true, Ablation::shaping)
    }
}

/// Aggressiveness `max(1 - min_sep / d0, 0)`, clamped to `[0, 1]`.
pub fn update_aggressiveness(separations: &[f64], d0: f64) -> f64 {
    let min = separations.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return 0.0;
    }
    (1.0 - min / d0).clamp(0.0, 1.0)
}

/// Orbit, manifold data and base game shared by every replan of a run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub orbit: Arc<PeriodicOrbit>,
    pub manifold: Arc<ManifoldData>,
    pub game: EngagementGame,
}

impl Scenario {
    pub fn build(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let params = config.system.clone();
        let orbit = match (&config.orbit.initial_state_nd, config.orbit.period_nd) {
            (Some(s), Some(period)) => PeriodicOrbit::load(
                SpacecraftState::from_slice(s),
                period,
                &params,
                &config.orbit_tol,
            )?,
            _ => southern_nrho(&params, &config.orbit_tol)?,
        };
        let orbit = Arc::new(orbit);
        let manifold = Arc::new(monodromy(&orbit, &config.orbit_tol)?);
        let weights = config.weights.to_weights(&params);
        let game = EngagementGame::new(
            params,
            orbit.clone(),
            Some(manifold.clone()),
            weights,
            config.phasing_enabled(),
        )?;
        Ok(Self {
            config: config.clone(),
            orbit,
            manifold,
            game,
        })
    }

    pub fn period(&self) -> f64 {
        self.orbit.period()
    }

    pub fn prediction_horizon(&self) -> f64 {
        self.config.prediction_horizon_periods * self.period()
    }

    pub fn control_horizon(&self) -> f64 {
        self.config.control_horizon_periods * self.period()
    }

    pub fn duration(&self) -> f64 {
        self.config.duration_periods * self.period()
    }

    pub fn initial_state(&self) -> EngagementState {
        let c = &self.config;
        let pick = |given: &Option<[f64; 6]>, phase: f64| match given {
            Some(s) => SpacecraftState::from_slice(s),
            None => self.orbit.sample(phase),
        };
        EngagementState::new(
            pick(&c.evader_state_nd, c.evader_phase_nd),
            pick(&c.pursuer_state_nd, c.pursuer_phase_nd),
            c.evader_phase_nd,
            c.pursuer_phase_nd,
        )
    }

    fn control_dim(&self) -> usize {
        if self.config.phasing_enabled() {
            4
        } else {
            3
        }
    }

    fn nominal_control(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.control_dim()];
        if self.config.phasing_enabled() {
            v[3] = 1.0;
        }
        v
    }

    /// Evader shaping blend for aggressiveness `a`.
    pub fn evader_alpha(&self, a: f64) -> f64 {
        if self.config.shaping_enabled() {
            self.config.alpha_mapping.apply(a).clamp(0.0, 1.0)
        } else {
            1.0
        }
    }

    fn pursuer_alpha(&self) -> f64 {
        if self.config.shaping_enabled() {
            self.config.weights.alpha_pursuer
        } else {
            1.0
        }
    }

    /// LQ game about the reference with `game`'s base weights and the
    /// configured evasion weights; both players track phase `phase_offset + t`.
    pub fn lq_setup(&self, game: &EngagementGame, phase_offset: f64) -> LqGameSetup {
        let w = game.weights();
        let lq = &self.config.lq_pursuer;
        LqGameSetup {
            params: self.config.system.clone(),
            orbit: self.orbit.clone(),
            phase_offset,
            r_e: w.r_e,
            r_p: w.r_p,
            q_e: w.q_e0,
            q_p: w.q_p0,
            f_e: w.f_e0,
            f_p: w.f_p0,
            m: Matrix3::identity() * lq.evasion_weight,
            m_f: Matrix3::identity() * lq.terminal_evasion_weight,
            m_e: w.m_e,
            m_p: w.m_p,
        }
    }

    /// Solves the game once over `[t0, t0 + horizon]` from `x0`.
    pub fn solve_once(
        &self,
        x0: &EngagementState,
        t0: f64,
        alpha_e: f64,
        warm: Option<(&ControlTrajectory, &ControlTrajectory)>,
    ) -> Result<(EngagementGame, SolveOutput)> {
        let game = self.game.with_alphas(alpha_e, self.pursuer_alpha())?;
        let settings = &self.config.solver;
        let tf = t0 + self.prediction_horizon();
        let n = settings.grid_size;
        let tail = self.nominal_control();
        let (we, wp) = match warm {
            Some((e, p)) => (e.shifted(t0, tf, n, &tail)?, p.shifted(t0, tf, n, &tail)?),
            None => (
                ControlTrajectory::constant(t0, tf, n, &tail)?,
                ControlTrajectory::constant(t0, tf, n, &tail)?,
            ),
        };
        let x = x0.to_vector();
        let out = match solve(&game, x.as_slice(), we.clone(), wp.clone(), settings) {
            Ok(o) => o,
            Err(Error::SolverFailure(_)) => {
                let retry = SolverSettings {
                    lambda_init: (2.0 * settings.lambda_init).max(2.0 * settings.lambda_seed),
                    ..settings.clone()
                };
                solve(&game, x.as_slice(), we, wp, &retry)?
            }
            Err(e) => return Err(e),
        };
        Ok((game, out))
    }
}

/// One logged sample. Thrusts in newtons, distances in kilometres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t_nd: f64,
    pub t_days: f64,
    pub xe: f64,
    pub ye: f64,
    pub ze: f64,
    pub vxe: f64,
    pub vye: f64,
    pub vze: f64,
    pub xp: f64,
    pub yp: f64,
    pub zp: f64,
    pub vxp: f64,
    pub vyp: f64,
    pub vzp: f64,
    pub ce: f64,
    pub cp: f64,
    #[serde(rename = "uex_N")]
    pub uex_n: f64,
    #[serde(rename = "uey_N")]
    pub uey_n: f64,
    #[serde(rename = "uez_N")]
    pub uez_n: f64,
    pub tau_e: Option<f64>,
    #[serde(rename = "upx_N")]
    pub upx_n: f64,
    #[serde(rename = "upy_N")]
    pub upy_n: f64,
    #[serde(rename = "upz_N")]
    pub upz_n: f64,
    pub tau_p: Option<f64>,
    pub err_e_km: f64,
    pub err_p_km: f64,
    pub sep_km: f64,
    pub a: f64,
    pub alpha: f64,
}

impl LogRecord {
    pub fn state(&self) -> EngagementState {
        EngagementState::from_slice(&[
            self.xe, self.ye, self.ze, self.vxe, self.vye, self.vze, self.xp, self.yp, self.zp,
            self.vxp, self.vyp, self.vzp, self.ce, self.cp,
        ])
    }
}

/// Summary of one replanning instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub t_nd: f64,
    pub a: f64,
    pub alpha_e: f64,
    pub alpha_p: f64,
    pub min_sep_window_km: f64,
    pub iterations: usize,
    pub converged: bool,
    pub update_norm: f64,
    pub final_lambda: f64,
    pub cost: f64,
    /// Conjugate-point scale applied to the LQ pursuer's evasion weights.
    pub lq_evasion_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationLog {
    pub schema_version: u32,
    pub crate_version: String,
    pub config: ScenarioConfig,
    pub period_nd: f64,
    pub records: Vec<LogRecord>,
    pub replans: Vec<ReplanRecord>,
    /// `int |u| dt` over the run, newton-seconds.
    pub evader_impulse_ns: f64,
    pub pursuer_impulse_ns: f64,
    /// Set when a replan failed and the run stopped early.
    pub aborted: Option<String>,
}

pub const LOG_SCHEMA_VERSION: u32 = 1;

impl SimulationLog {
    pub fn separations_km(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.sep_km).collect()
    }

    /// Earliest time (days) after which separation stays above `km`.
    pub fn permanent_crossing_days(&self, km: f64) -> Option<f64> {
        let last_below = self.records.iter().rposition(|r| r.sep_km <= km);
        match last_below {
            None => self.records.first().map(|r| r.t_days),
            Some(i) if i + 1 < self.records.len() => Some(self.records[i + 1].t_days),
            Some(_) => None,
        }
    }

    /// Number of distinct orbital periods in which separation drops below `km`.
    pub fn periods_below(&self, km: f64) -> usize {
        let mut periods: Vec<i64> = self
            .records
            .iter()
            .filter(|r| r.sep_km < km)
            .map(|r| (r.t_nd / self.period_nd).floor() as i64)
            .collect();
        periods.dedup();
        periods.len()
    }
}

/// Policy executed between replans.
struct Segment<'a> {
    game: &'a EngagementGame,
    out: &'a SolveOutput,
    opponent: Opponent,
    lq: Option<(&'a LqPursuer, f64)>,
    orbit: &'a PeriodicOrbit,
    phasing: bool,
}

impl Segment<'_> {
    /// Controls of both players at `(t, x)`, each as `[ux, uy, uz, tau]`.
    fn controls(&self, t: f64, x: &[f64]) -> ([f64; 4], [f64; 4]) {
        let xbar = self.out.nominal.state_at(t);
        let dx = DVector::from_column_slice(x) - xbar;
        let g = self.out.gains.eval(t);
        let we = self.out.evader.eval(t);
        let wp = self.out.pursuer.eval(t);
        let de = &g.ell_e + &g.k_e * &dx;
        let dp = &g.ell_p + &g.k_p * &dx;
        let mut ue = [0.0, 0.0, 0.0, 1.0];
        for i in 0..we.len() {
            ue[i] = we[i] + de[i];
        }
        let up = match self.opponent {
            Opponent::Saddle => {
                let mut up = [0.0, 0.0, 0.0, 1.0];
                for i in 0..wp.len() {
                    up[i] = wp[i] + dp[i];
                }
                up
            }
            Opponent::Lq => {
                let (pursuer, threshold) = self.lq.expect("LQ pursuer prepared");
                let u = lq_pursuer_policy(
                    pursuer,
                    &EngagementState::from_slice(x),
                    self.orbit,
                    t,
                    threshold,
                );
                [u.0[0], u.0[1], u.0[2], 1.0]
            }
            Opponent::None => [0.0, 0.0, 0.0, 1.0],
        };
        if !self.phasing {
            ue[3] = 1.0;
        }
        (ue, up)
    }

    fn field(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let (ue, up) = self.controls(t, x);
        let f = self.game.vector_field(
            &EngagementState::from_slice(x),
            &crate::game::PlayerControl::from_slice(&ue),
            &crate::game::PlayerControl::from_slice(&up),
        )?;
        out.copy_from_slice(f.as_slice());
        Ok(())
    }
}

fn tracking_error_km(
    orbit: &PeriodicOrbit,
    params: &SystemParams,
    s: &SpacecraftState,
    phase: f64,
) -> f64 {
    params.nd_to_km((s.position() - orbit.sample(phase).position()).norm())
}

/// Runs the receding-horizon engagement described by `scenario`.
pub fn run_mpc(scenario: &Scenario) -> Result<SimulationLog> {
    let cfg = &scenario.config;
    let params = &cfg.system;
    let period = scenario.period();
    let horizon = scenario.prediction_horizon();
    let step = scenario.control_horizon();
    let duration = scenario.duration();
    let d0 = cfg.weights.d0_km;
    let dt_log = period / cfg.samples_per_period as f64;
    let n_samples = (duration / dt_log + 1e-9).floor() as usize;
    let n_replans = (duration / step - 1e-9).ceil().max(1.0) as usize;
    let phasing = cfg.phasing_enabled();

    let mut log = SimulationLog {
        schema_version: LOG_SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        period_nd: period,
        records: Vec::with_capacity(n_samples + 1),
        replans: Vec::with_capacity(n_replans),
        evader_impulse_ns: 0.0,
        pursuer_impulse_ns: 0.0,
        aborted: None,
    };

    let mut x = scenario.initial_state().to_vector();
    let mut prev: Option<SolveOutput> = None;
    let mut next_sample = 0usize;
    // separations (km) at log times, for the aggressiveness window
    let mut history: Vec<(f64, f64)> = Vec::new();

    for r in 0..n_replans {
        let t_r = r as f64 * step;
        let t_end = ((r + 1) as f64 * step).min(duration);
        let state = EngagementState::from_slice(x.as_slice());
        let sep_now = params.nd_to_km(state.separation());
        let window: Vec<f64> = history
            .iter()
            .filter(|(t, _)| *t >= t_r - period - 1e-12)
            .map(|(_, s)| *s)
            .chain(std::iter::once(sep_now))
            .collect();
        let a = update_aggressiveness(&window, d0);
        let alpha_e = scenario.evader_alpha(a);
        let warm = prev.as_ref().map(|o| (&o.evader, &o.pursuer));
        let (game, out) = match scenario.solve_once(&state, t_r, alpha_e, warm) {
            Ok(v) => v,
            Err(e) => {
                log.aborted = Some(format!("replan at t = {t_r}: {e}"));
                break;
            }
        };

        let lq = if cfg.opponent == Opponent::Lq {
            let setup = scenario.lq_setup(&game, state.c_p - t_r);
            Some(LqPursuer::prepare(
                &setup,
                t_r,
                t_r + horizon,
                &cfg.orbit_tol,
            )?)
        } else {
            None
        };
        let threshold = params.km_to_nd(cfg.lq_pursuer.threshold_km);

        log.replans.push(ReplanRecord {
            t_nd: t_r,
            a,
            alpha_e,
            alpha_p: game.weights().alpha_p,
            min_sep_window_km: window.iter().copied().fold(f64::INFINITY, f64::min),
            iterations: out.report.iterations,
            converged: out.report.converged,
            update_norm: out.report.update_norm,
            final_lambda: out.report.lambda_history.last().copied().unwrap_or(0.0),
            cost: out.report.cost_history.last().copied().unwrap_or(f64::NAN),
            lq_evasion_scale: lq.as_ref().map(|p| p.evasion_scale),
        });

        let seg = Segment {
            game: &game,
            out: &out,
            opponent: cfg.opponent,
            lq: lq.as_ref().map(|p| (p, threshold)),
            orbit: &scenario.orbit,
            phasing,
        };
        let traj = ode::propagate(
            |t, y, dy| seg.field(t, y, dy),
            &x,
            t_r,
            t_end,
            &cfg.execution_tol,
        )?;

        let last_segment = r + 1 == n_replans;
        while next_sample <= n_samples {
            let t = next_sample as f64 * dt_log;
            if t > t_end + 1e-12 || (t >= t_end - 1e-12 && !last_segment) {
                break;
            }
            let t = t.min(t_end);
            let xs = traj.eval(t);
            let (ue, up) = seg.controls(t, xs.as_slice());
            let rec = record(scenario, t, xs.as_slice(), &ue, &up, a, alpha_e);
            history.push((t, rec.sep_km));
            log.records.push(rec);
            next_sample += 1;
        }
        x = traj.final_state();
        if !EngagementState::from_slice(x.as_slice()).is_finite() {
            return Err(Error::BlowUp {
                t: t_end,
                reason: "non-finite engagement state".into(),
            });
        }
        prev = Some(out);
    }

    let (ie, ip) = impulses(&log.records, params);
    log.evader_impulse_ns = ie;
    log.pursuer_impulse_ns = ip;
    Ok(log)
}

fn record(
    scenario: &Scenario,
    t: f64,
    x: &[f64],
    ue: &[f64; 4],
    up: &[f64; 4],
    a: f64,
    alpha: f64,
) -> LogRecord {
    let params = &scenario.config.system;
    let s = EngagementState::from_slice(x);
    let phasing = scenario.config.phasing_enabled();
    let tau = |v: f64| if phasing { Some(v) } else { None };
    LogRecord {
        t_nd: t,
        t_days: params.nd_to_days(t),
        xe: x[0],
        ye: x[1],
        ze: x[2],
        vxe: x[3],
        vye: x[4],
        vze: x[5],
        xp: x[6],
        yp: x[7],
        zp: x[8],
        vxp: x[9],
        vyp: x[10],
        vzp: x[11],
        ce: x[12],
        cp: x[13],
        uex_n: ue[0],
        uey_n: ue[1],
        uez_n: ue[2],
        tau_e: tau(ue[3]),
        upx_n: up[0],
        upy_n: up[1],
        upz_n: up[2],
        tau_p: tau(up[3]),
        err_e_km: tracking_error_km(&scenario.orbit, params, &s.evader, s.c_e),
        err_p_km: tracking_error_km(&scenario.orbit, params, &s.pursuer, s.c_p),
        sep_km: params.nd_to_km(s.separation()),
        a,
        alpha,
    }
}

fn impulses(records: &[LogRecord], params: &SystemParams) -> (f64, f64) {
    let mut ie = 0.0;
    let mut ip = 0.0;
    for w in records.windows(2) {
        let dt = (w[1].t_nd - w[0].t_nd) * params.time_unit_s;
        let ne = |r: &LogRecord| Vector3::new(r.uex_n, r.uey_n, r.uez_n).norm();
        let np = |r: &LogRecord| Vector3::new(r.upx_n, r.upy_n, r.upz_n).norm();
        ie += 0.5 * (ne(&w[0]) + ne(&w[1])) * dt;
        ip += 0.5 * (np(&w[0]) + np(&w[1])) * dt;
    }
    (ie, ip)
}

/// Same run with one of the mechanisms removed.
pub fn run_ablation(config: &ScenarioConfig, which: Ablation) -> Result<SimulationLog> {
    let cfg = ScenarioConfig {
        ablation: Some(which),
        ..config.clone()
    };
    run_mpc(&Scenario::build(&cfg)?)
}

/// Writes the per-sample table in the documented column order.
pub fn write_log_csv(log: &SimulationLog, path: &Path) -> Result<()> {
    if log.records.is_empty() {
        return Err(Error::Parameter("log has no records".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in &log.records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for r in rd.deserialize() {
        out.push(r?);
    }
    Ok(out)
}

pub fn write_log_json(log: &SimulationLog, path: &Path) -> Result<()> {
    if log.records.is_empty() {
        return Err(Error::Parameter("log has no records".into()));
    }
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, log)?;
    Ok(())
}

pub fn read_log_json(path: &Path) -> Result<SimulationLog> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

/// Logs that feed the figure slices. Only `main` is required.
#[derive(Debug, Default)]
pub struct PlotInputs<'a> {
    pub main: Option<&'a [LogRecord]>,
    pub lq: Option<&'a [LogRecord]>,
    pub no_shaping: Option<&'a [LogRecord]>,
    pub no_phasing: Option<&'a [LogRecord]>,
    pub neither: Option<&'a [LogRecord]>,
}

pub const PLOT_FILES: [&str; 6] = [
    "fig3_tracking.csv",
    "fig4_thrust.csv",
    "fig5_tau.csv",
    "fig6_separation.csv",
    "fig7_ablations.csv",
    "fig8_lq_separation.csv",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Writes the six figure slices into `dir`. Series whose source log is
/// missing are left out of the header.
pub fn write_plot_data(inputs: &PlotInputs<'_>, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let main = inputs
        .main
        .ok_or_else(|| Error::Parameter("plot data needs the main run".into()))?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        written.push(path);
        Ok(())
    };

    emit(
        PLOT_FILES[0],
        &["t_days", "err_e_km", "err_p_km"],
        main.iter()
            .map(|r| {
                vec![
                    r.t_days.to_string(),
                    r.err_e_km.to_string(),
                    r.err_p_km.to_string(),
                ]
            })
            .collect(),
    )?;
    emit(
        PLOT_FILES[1],
        &[
            "t_days", "uex_N", "uey_N", "uez_N", "upx_N", "upy_N", "upz_N",
        ],
        main.iter()
            .map(|r| {
                [
                    r.t_days, r.uex_n, r.uey_n, r.uez_n, r.upx_n, r.upy_n, r.upz_n,
                ]
                .iter()
                .map(f64::to_string)
                .collect()
            })
            .collect(),
    )?;
    emit(
        PLOT_FILES[2],
        &["t_days", "tau_e", "tau_p"],
        main.iter()
            .map(|r| vec![r.t_days.to_string(), opt(r.tau_e), opt(r.tau_p)])
            .collect(),
    )?;
    emit(
        PLOT_FILES[3],
        &["t_days", "sep_km"],
        main.iter()
            .map(|r| vec![r.t_days.to_string(), r.sep_km.to_string()])
            .collect(),
    )?;

    let (h, rows) = separation_series(
        main,
        &[
            ("sep_no_shaping_km", inputs.no_shaping),
            ("sep_no_phasing_km", inputs.no_phasing),
            ("sep_neither_km", inputs.neither),
        ],
    );
    emit(PLOT_FILES[4], &h, rows)?;
    let (h, rows) = separation_series(main, &[("sep_lq_km", inputs.lq)]);
    emit(PLOT_FILES[5], &h, rows)?;
    Ok(written)
}

type Table = (Vec<&'static str>, Vec<Vec<String>>);

/// Separation of the main run alongside the present comparison runs,
/// aligned by sample index.
fn separation_series(main: &[LogRecord], extra: &[(&'static str, Option<&[LogRecord]>)]) -> Table {
    let present: Vec<(&'static str, &[LogRecord])> = extra
        .iter()
        .filter_map(|(n, l)| l.map(|l| (*n, l)))
        .collect();
    let mut header = vec!["t_days", "sep_km"];
    header.extend(present.iter().map(|(n, _)| *n));
    let rows = main
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![r.t_days.to_string(), r.sep_km.to_string()];
            for (_, l) in &present {
                row.push(l.get(i).map_or(String::new(), |x| x.sep_km.to_string()));
            }
            row
        })
        .collect();
    (header, rows)
}

/// Nominal trajectory of a solve sampled on its control grid, for export.
pub fn nominal_table(nominal: &Rollout, grid: &[f64]) -> Vec<[f64; STATE_DIM + 1]> {
    grid.iter()
        .map(|&t| {
            let x = nominal.state_at(t);
            let mut row = [0.0; STATE_DIM + 1];
            row[0] = t;
            row[1..].copy_from_slice(x.as_slice());
            row
        })
        .collect()
}

/// Serializable result of a single game solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveSummary {
    pub schema_version: u32,
    pub t0_nd: f64,
    pub tf_nd: f64,
    pub alpha_e: f64,
    pub alpha_p: f64,
    pub report: SolveReport,
    pub evader: ControlTrajectory,
    pub pursuer: ControlTrajectory,
    pub gains: GainTrajectory,
}
