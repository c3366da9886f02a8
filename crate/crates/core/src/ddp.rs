//! Continuous-time game-theoretic differential dynamic programming.
//!
//! The evader minimizes and the pursuer maximizes a common cost. Each outer
//! iteration rolls the nominal controls out through the nonlinear dynamics,
//! integrates the value expansion backward, forms saddle-point gains and
//! refines the nominal through a linearized rollout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{self, DenseTrajectory, Tolerances};

/// First-order dynamics expansion at one point.
#[derive(Debug, Clone)]
pub struct DynamicsJacobians {
    pub f_x: DMatrix<f64>,
    pub f_we: DMatrix<f64>,
    pub f_wp: DMatrix<f64>,
}

/// Second-order running-cost expansion. The cost is separable, so the
/// state/control cross blocks are zero and not stored.
#[derive(Debug, Clone)]
pub struct CostExpansion {
    pub l: f64,
    pub l_x: DVector<f64>,
    pub l_xx: DMatrix<f64>,
    pub l_we: DVector<f64>,
    pub l_wewe: DMatrix<f64>,
    pub l_wp: DVector<f64>,
    pub l_wpwp: DMatrix<f64>,
}

/// A two-player zero-sum differential game: the evader minimizes
/// `int L dt + phi(x(tf))`, the pursuer maximizes it.
pub trait GameProblem {
    fn state_dim(&self) -> usize;
    fn evader_dim(&self) -> usize;
    fn pursuer_dim(&self) -> usize;
    fn dynamics(&self, t: f64, x: &[f64], we: &[f64], wp: &[f64], out: &mut [f64]) -> Result<()>;
    fn jacobians(&self, t: f64, x: &[f64], we: &[f64], wp: &[f64]) -> Result<DynamicsJacobians>;
    fn running_cost(&self, t: f64, x: &[f64], we: &[f64], wp: &[f64]) -> Result<f64>;
    fn expansion(&self, t: f64, x: &[f64], we: &[f64], wp: &[f64]) -> Result<CostExpansion>;
    fn terminal_cost(&self, x: &[f64]) -> Result<f64>;
    fn terminal_expansion(&self, x: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
}

/// Uniform grid of `n` nodes on `[t0, tf]`.
pub fn uniform_grid(t0: f64, tf: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let mut g: Vec<f64> = (0..n)
        .map(|i| t0 + (tf - t0) * i as f64 / (n - 1) as f64)
        .collect();
    g[n - 1] = tf;
    g
}

/// Index `i` with `grid[i] <= t <= grid[i + 1]` and the blend weight.
fn locate(grid: &[f64], t: f64) -> (usize, f64) {
    let n = grid.len();
    if t <= grid[0] {
        return (0, 0.0);
    }
    if t >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let i = grid
        .partition_point(|g| *g <= t)
        .saturating_sub(1)
        .min(n - 2);
    let s = (t - grid[i]) / (grid[i + 1] - grid[i]);
    (i, s)
}

/// Trapezoid weights of the grid, used for the update norm.
fn quadrature_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { grid[i] - grid[i - 1] } else { 0.0 };
            let right = if i + 1 < n {
                grid[i + 1] - grid[i]
            } else {
                0.0
            };
            0.5 * (left + right)
        })
        .collect()
}

/// Piecewise-linear control history on a fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTrajectory {
    grid: Vec<f64>,
    dim: usize,
    values: Vec<f64>,
}

impl ControlTrajectory {
    pub fn new(grid: Vec<f64>, dim: usize, values: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::Parameter(
                "control grid needs at least two nodes".into(),
            ));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Parameter(
                "control grid must be strictly increasing".into(),
            ));
        }
        if values.len() != grid.len() * dim {
            return Err(Error::Parameter(format!(
                "expected {} control values, got {}",
                grid.len() * dim,
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    /// Same value at every node of a uniform grid.
    pub fn constant(t0: f64, tf: f64, n: usize, value: &[f64]) -> Result<Self> {
        let grid = uniform_grid(t0, tf, n);
        let values = grid.iter().flat_map(|_| value.iter().copied()).collect();
        Self::new(grid, value.len(), values)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn t0(&self) -> f64 {
        self.grid[0]
    }

    pub fn tf(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Linear interpolation, clamped at the ends.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let (i, s) = locate(&self.grid, t);
        let a = self.node(i);
        let b = self.node(i + 1);
        for k in 0..self.dim {
            out[k] = a[k] + s * (b[k] - a[k]);
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }

    /// `self + gamma * delta` node by node (grids must agree).
    pub fn add_scaled(&self, delta: &ControlTrajectory, gamma: f64) -> Self {
        let values = self
            .values
            .iter()
            .zip(&delta.values)
            .map(|(a, b)| a + gamma * b)
            .collect();
        Self {
            grid: self.grid.clone(),
            dim: self.dim,
            values,
        }
    }

    /// Resamples onto a uniform grid over `[t0, tf]`; nodes past the
    /// current end take `tail`.
    pub fn shifted(&self, t0: f64, tf: f64, n: usize, tail: &[f64]) -> Result<Self> {
        let grid = uniform_grid(t0, tf, n);
        let end = self.tf();
        let mut values = Vec::with_capacity(grid.len() * self.dim);
        let mut buf = vec![0.0; self.dim];
        for &t in &grid {
            if t <= end + 1e-12 * end.abs().max(1.0) {
                self.eval_into(t, &mut buf);
                values.extend_from_slice(&buf);
            } else {
                values.extend_from_slice(tail);
            }
        }
        Self::new(grid, self.dim, values)
    }

    /// `sqrt(sum |w_i|^2 dt_i / horizon)`.
    pub fn norm(&self) -> f64 {
        let weights = quadrature_weights(&self.grid);
        let horizon = self.tf() - self.t0();
        let sum: f64 = (0..self.len())
            .map(|i| weights[i] * self.node(i).iter().map(|v| v * v).sum::<f64>())
            .sum();
        (sum / horizon).sqrt()
    }
}

/// Feedforward and feedback gains of both players on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTrajectory {
    grid: Vec<f64>,
    state_dim: usize,
    evader_dim: usize,
    pursuer_dim: usize,
    ell_e: Vec<f64>,
    ell_p: Vec<f64>,
    k_e: Vec<f64>,
    k_p: Vec<f64>,
}

/// Gains at one time.
#[derive(Debug, Clone)]
pub struct Gains {
    pub ell_e: DVector<f64>,
    pub k_e: DMatrix<f64>,
    pub ell_p: DVector<f64>,
    pub k_p: DMatrix<f64>,
}

impl GainTrajectory {
    pub fn zeros(grid: Vec<f64>, state_dim: usize, evader_dim: usize, pursuer_dim: usize) -> Self {
        let n = grid.len();
        Self {
            ell_e: vec![0.0; n * evader_dim],
            ell_p: vec![0.0; n * pursuer_dim],
            k_e: vec![0.0; n * evader_dim * state_dim],
            k_p: vec![0.0; n * pursuer_dim * state_dim],
            grid,
            state_dim,
            evader_dim,
            pursuer_dim,
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Overwrites node `i`.
    pub fn set_node(&mut self, i: usize, g: &Gains) {
        let (n, me, mp) = (self.state_dim, self.evader_dim, self.pursuer_dim);
        self.ell_e[i * me..(i + 1) * me].copy_from_slice(g.ell_e.as_slice());
        self.ell_p[i * mp..(i + 1) * mp].copy_from_slice(g.ell_p.as_slice());
        self.k_e[i * me * n..(i + 1) * me * n].copy_from_slice(g.k_e.as_slice());
        self.k_p[i * mp * n..(i + 1) * mp * n].copy_from_slice(g.k_p.as_slice());
    }

    /// Gains stored at node `i`.
    pub fn node(&self, i: usize) -> Gains {
        let (n, me, mp) = (self.state_dim, self.evader_dim, self.pursuer_dim);
        Gains {
            ell_e: DVector::from_column_slice(&self.ell_e[i * me..(i + 1) * me]),
            k_e: DMatrix::from_column_slice(me, n, &self.k_e[i * me * n..(i + 1) * me * n]),
            ell_p: DVector::from_column_slice(&self.ell_p[i * mp..(i + 1) * mp]),
            k_p: DMatrix::from_column_slice(mp, n, &self.k_p[i * mp * n..(i + 1) * mp * n]),
        }
    }

    /// Linear interpolation between nodes, clamped at the ends.
    pub fn eval(&self, t: f64) -> Gains {
        let (i, s) = locate(&self.grid, t);
        let a = self.node(i);
        let b = self.node(i + 1);
        Gains {
            ell_e: &a.ell_e + (&b.ell_e - &a.ell_e) * s,
            k_e: &a.k_e + (&b.k_e - &a.k_e) * s,
            ell_p: &a.ell_p + (&b.ell_p - &a.ell_p) * s,
            k_p: &a.k_p + (&b.k_p - &a.k_p) * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.ell_e, &self.ell_p, &self.k_e, &self.k_p]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Value function expansion sampled on the control grid, plus the dense
/// backward solution it was sampled from.
#[derive(Debug, Clone)]
pub struct ValueExpansion {
    pub grid: Vec<f64>,
    pub v: Vec<f64>,
    pub v_x: Vec<DVector<f64>>,
    pub v_xx: Vec<DMatrix<f64>>,
    pub lambda: f64,
    dense: Option<DenseTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub update_norm: f64,
    pub update_norms: Vec<f64>,
    pub cost_history: Vec<f64>,
    pub lambda_history: Vec<f64>,
    pub step_history: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub epsilon: f64,
    pub step_ladder: Vec<f64>,
    pub lambda_init: f64,
    /// First nonzero regularization when the sweep fails at `lambda = 0`.
    pub lambda_seed: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
    pub max_iterations: usize,
    pub stall_limit: usize,
    pub grid_size: usize,
    pub rollout_tol: Tolerances,
    pub sweep_tol: Tolerances,
    /// `|V_xx|` beyond this counts as finite-time escape.
    pub blowup_norm: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            epsilon: 10f64.powf(-4.5),
            step_ladder: vec![1.0, 0.5, 0.25, 0.1],
            lambda_init: 0.0,
            lambda_seed: 1e-4,
            lambda_factor: 1.5,
            lambda_max: 1e9,
            max_iterations: 200,
            stall_limit: 3,
            grid_size: 4096,
            rollout_tol: Tolerances::new(1e-10, 1e-12),
            sweep_tol: Tolerances::new(1e-9, 1e-10),
            blowup_norm: 1e12,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        if self.step_ladder.is_empty() || self.step_ladder.iter().any(|g| !(*g > 0.0 && *g <= 1.0))
        {
            return Err(Error::Config(
                "step ladder entries must lie in (0, 1]".into(),
            ));
        }
        if !(self.lambda_factor > 1.0) || !(self.lambda_seed > 0.0) || self.lambda_init < 0.0 {
            return Err(Error::Config("invalid regularization schedule".into()));
        }
        if self.grid_size < 2 || self.max_iterations == 0 {
            return Err(Error::Config(
                "grid size must be >= 2 and iteration cap >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Nonlinear rollout with the running cost carried as an extra state.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: DenseTrajectory,
    pub state_dim: usize,
    /// Total cost `int L dt + phi`.
    pub cost: f64,
}

impl Rollout {
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        let mut buf = vec![0.0; self.state_dim + 1];
        self.trajectory.eval_into(t, &mut buf);
        DVector::from_column_slice(&buf[..self.state_dim])
    }

    pub fn final_state(&self) -> DVector<f64> {
        let f = self.trajectory.final_state();
        DVector::from_column_slice(&f.as_slice()[..self.state_dim])
    }
}

pub fn forward_rollout<P: GameProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    we: &ControlTrajectory,
    wp: &ControlTrajectory,
    tol: &Tolerances,
) -> Result<Rollout> {
    let n = problem.state_dim();
    if x0.len() != n {
        return Err(Error::Parameter(format!(
            "expected {n} states, got {}",
            x0.len()
        )));
    }
    let (t0, tf) = (we.t0(), we.tf());
    if wp.t0() > t0 || wp.tf() < tf {
        return Err(Error::Parameter(
            "pursuer controls do not cover the solve span".into(),
        ));
    }
    let mut y0 = DVector::zeros(n + 1);
    y0.rows_mut(0, n).copy_from_slice(x0);
    let mut ue = vec![0.0; we.dim()];
    let mut up = vec![0.0; wp.dim()];
    let trajectory = ode::propagate(
        |t, y, dy| {
            we.eval_into(t, &mut ue);
            wp.eval_into(t, &mut up);
            problem.dynamics(t, &y[..n], &ue, &up, &mut dy[..n])?;
            dy[n] = problem.running_cost(t, &y[..n], &ue, &up)?;
            Ok(())
        },
        &y0,
        t0,
        tf,
        tol,
    )?;
    let end = trajectory.final_state();
    let cost = end[n] + problem.terminal_cost(&end.as_slice()[..n])?;
    if !cost.is_finite() {
        return Err(Error::BlowUp {
            t: tf,
            reason: "non-finite rollout cost".into(),
        });
    }
    Ok(Rollout {
        trajectory,
        state_dim: n,
        cost,
    })
}

/// `l = -Q_ww^-1 Q_w`, `K = -Q_ww^-1 Q_wx` through a symmetric solve.
/// The Hessian must be definite (either sign).
pub fn compute_gains(
    q_w: &DVector<f64>,
    q_ww: &DMatrix<f64>,
    q_wx: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let positive = q_ww.trace() > 0.0;
    let h = if positive { q_ww.clone() } else { -q_ww };
    let chol = h.cholesky().ok_or(Error::SingularHessian)?;
    let sign = if positive { -1.0 } else { 1.0 };
    let ell = chol.solve(q_w) * sign;
    let k = chol.solve(q_wx) * sign;
    if !(ell.iter().all(|v| v.is_finite()) && k.iter().all(|v| v.is_finite())) {
        return Err(Error::SingularHessian);
    }
    Ok((ell, k))
}

/// Every `Q-bar` term of the local saddle subproblem at one time.
struct LocalExpansion {
    l: f64,
    q_x: DVector<f64>,
    q_xx: DMatrix<f64>,
    q_we: DVector<f64>,
    q_wp: DVector<f64>,
    q_wewe: DMatrix<f64>,
    q_wpwp: DMatrix<f64>,
    q_wex: DMatrix<f64>,
    q_wpx: DMatrix<f64>,
}

impl LocalExpansion {
    fn gains(&self) -> Result<Gains> {
        let (ell_e, k_e) = compute_gains(&self.q_we, &self.q_wewe, &self.q_wex)?;
        let (ell_p, k_p) = compute_gains(&self.q_wp, &self.q_wpwp, &self.q_wpx)?;
        Ok(Gains {
            ell_e,
            k_e,
            ell_p,
            k_p,
        })
    }
}

struct SweepContext<'a, P: GameProblem + ?Sized> {
    problem: &'a P,
    nominal: &'a Rollout,
    we: &'a ControlTrajectory,
    wp: &'a ControlTrajectory,
    lambda: f64,
}

impl<'a, P: GameProblem + ?Sized> SweepContext<'a, P> {
    fn nominal_at(&self, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.problem.state_dim();
        let mut x = vec![0.0; n + 1];
        self.nominal.trajectory.eval_into(t, &mut x);
        x.truncate(n);
        (x, self.we.eval(t), self.wp.eval(t))
    }

    fn local(&self, t: f64, v_x: &DVector<f64>, v_xx: &DMatrix<f64>) -> Result<LocalExpansion> {
        let (x, ue, up) = self.nominal_at(t);
        let jac = self.problem.jacobians(t, &x, &ue, &up)?;
        let e = self.problem.expansion(t, &x, &ue, &up)?;
        let me = ue.len();
        let mp = up.len();
        let vxx_fx = v_xx * &jac.f_x;
        Ok(LocalExpansion {
            l: e.l,
            q_x: jac.f_x.tr_mul(v_x) + e.l_x,
            q_xx: &e.l_xx + &vxx_fx + vxx_fx.transpose(),
            q_we: jac.f_we.tr_mul(v_x) + e.l_we,
            q_wp: jac.f_wp.tr_mul(v_x) + e.l_wp,
            q_wewe: e.l_wewe + DMatrix::identity(me, me) * self.lambda,
            q_wpwp: e.l_wpwp - DMatrix::identity(mp, mp) * self.lambda,
            q_wex: jac.f_we.tr_mul(v_xx),
            q_wpx: jac.f_wp.tr_mul(v_xx),
        })
    }
}

fn unpack_value(y: &[f64], n: usize) -> (f64, DVector<f64>, DMatrix<f64>) {
    let v = y[0];
    let v_x = DVector::from_column_slice(&y[1..1 + n]);
    let m = DMatrix::from_column_slice(n, n, &y[1 + n..1 + n + n * n]);
    let v_xx = (&m + m.transpose()) * 0.5;
    (v, v_x, v_xx)
}

/// Integrates the value expansion backward along the nominal and samples
/// gains on the control grid.
pub fn backward_sweep<P: GameProblem + ?Sized>(
    problem: &P,
    nominal: &Rollout,
    we: &ControlTrajectory,
    wp: &ControlTrajectory,
    lambda: f64,
    settings: &SolverSettings,
) -> Result<(ValueExpansion, GainTrajectory)> {
    let n = problem.state_dim();
    let ctx = SweepContext {
        problem,
        nominal,
        we,
        wp,
        lambda,
    };
    let (t0, tf) = (we.t0(), we.tf());
    let x_f = nominal.final_state();
    let (phi, phi_x, phi_xx) = problem.terminal_expansion(x_f.as_slice())?;
    let mut y_f = DVector::zeros(1 + n + n * n);
    y_f[0] = phi;
    y_f.rows_mut(1, n).copy_from(&phi_x);
    y_f.rows_mut(1 + n, n * n)
        .copy_from_slice(phi_xx.as_slice());

    let blowup = settings.blowup_norm;
    let value = ode::propagate(
        |t, y, dy| {
            let (_, v_x, v_xx) = unpack_value(y, n);
            if !(v_xx.amax() <= blowup) {
                return Err(Error::BlowUp {
                    t,
                    reason: "value Hessian escaped".into(),
                });
            }
            let q = ctx.local(t, &v_x, &v_xx)?;
            let g = q.gains()?;
            let minus_v = q.l
                + g.ell_e.dot(&q.q_we)
                + g.ell_p.dot(&q.q_wp)
                + 0.5 * g.ell_e.dot(&(&q.q_wewe * &g.ell_e))
                + 0.5 * g.ell_p.dot(&(&q.q_wpwp * &g.ell_p));
            let minus_vx = &q.q_x
                + g.k_e.tr_mul(&q.q_we)
                + g.k_p.tr_mul(&q.q_wp)
                + q.q_wex.tr_mul(&g.ell_e)
                + q.q_wpx.tr_mul(&g.ell_p)
                + g.k_e.tr_mul(&(&q.q_wewe * &g.ell_e))
                + g.k_p.tr_mul(&(&q.q_wpwp * &g.ell_p));
            let ke_q = g.k_e.tr_mul(&q.q_wex);
            let kp_q = g.k_p.tr_mul(&q.q_wpx);
            let minus_vxx = &ke_q
                + ke_q.transpose()
                + &kp_q
                + kp_q.transpose()
                + g.k_e.tr_mul(&(&q.q_wewe * &g.k_e))
                + g.k_p.tr_mul(&(&q.q_wpwp * &g.k_p))
                + &q.q_xx;
            let minus_vxx = (&minus_vxx + minus_vxx.transpose()) * 0.5;
            dy[0] = -minus_v;
            for i in 0..n {
                dy[1 + i] = -minus_vx[i];
            }
            for (k, v) in minus_vxx.iter().enumerate() {
                dy[1 + n + k] = -v;
            }
            Ok(())
        },
        &y_f,
        tf,
        t0,
        &settings.sweep_tol,
    )?;

    let grid = we.grid().to_vec();
    let mut gains =
        GainTrajectory::zeros(grid.clone(), n, problem.evader_dim(), problem.pursuer_dim());
    let mut expansion = ValueExpansion {
        grid: grid.clone(),
        v: Vec::with_capacity(grid.len()),
        v_x: Vec::with_capacity(grid.len()),
        v_xx: Vec::with_capacity(grid.len()),
        lambda,
        dense: None,
    };
    let mut buf = vec![0.0; 1 + n + n * n];
    for (i, &t) in grid.iter().enumerate() {
        if i + 1 == grid.len() {
            // boundary node holds the terminal data exactly
            buf.copy_from_slice(y_f.as_slice());
        } else {
            value.eval_into(t, &mut buf);
        }
        let (v, v_x, v_xx) = unpack_value(&buf, n);
        let g = ctx.local(t, &v_x, &v_xx)?.gains()?;
        gains.set_node(i, &g);
        expansion.v.push(v);
        expansion.v_x.push(v_x);
        expansion.v_xx.push(v_xx);
    }
    if !gains.is_finite() {
        return Err(Error::BlowUp {
            t: t0,
            reason: "non-finite gains".into(),
        });
    }
    expansion.dense = Some(value);
    Ok((expansion, gains))
}

/// Linearized rollout from `dx(t0) = 0` under `dw = l + K dx`; returns the
/// realized control corrections on the grid.
///
/// With `value` given, gains between grid nodes are recomputed from the
/// dense backward solution instead of interpolated; this matters where the
/// dynamics vary faster than the grid spacing (close lunar passages).
pub fn linearized_rollout<P: GameProblem + ?Sized>(
    problem: &P,
    nominal: &Rollout,
    we: &ControlTrajectory,
    wp: &ControlTrajectory,
    gains: &GainTrajectory,
    value: Option<&ValueExpansion>,
    tol: &Tolerances,
) -> Result<(DenseTrajectory, ControlTrajectory, ControlTrajectory)> {
    let n = problem.state_dim();
    let ctx = SweepContext {
        problem,
        nominal,
        we,
        wp,
        lambda: value.map_or(0.0, |v| v.lambda),
    };
    let dense = value.and_then(|v| v.dense.as_ref());
    let gains_at = |t: f64| -> Result<Gains> {
        match dense {
            Some(d) => {
                let mut buf = vec![0.0; 1 + n + n * n];
                d.eval_into(t, &mut buf);
                let (_, v_x, v_xx) = unpack_value(&buf, n);
                ctx.local(t, &v_x, &v_xx)?.gains()
            }
            None => Ok(gains.eval(t)),
        }
    };
    let (t0, tf) = (we.t0(), we.tf());
    let dx = ode::propagate(
        |t, y, dy| {
            let (x, ue, up) = ctx.nominal_at(t);
            let jac = problem.jacobians(t, &x, &ue, &up)?;
            let g = gains_at(t)?;
            let d = DVector::from_column_slice(y);
            let dwe = &g.ell_e + &g.k_e * &d;
            let dwp = &g.ell_p + &g.k_p * &d;
            let rate = &jac.f_x * &d + &jac.f_we * dwe + &jac.f_wp * dwp;
            dy.copy_from_slice(rate.as_slice());
            Ok(())
        },
        &DVector::zeros(n),
        t0,
        tf,
        tol,
    )?;
    let grid = we.grid().to_vec();
    let mut ve = Vec::with_capacity(grid.len() * problem.evader_dim());
    let mut vp = Vec::with_capacity(grid.len() * problem.pursuer_dim());
    let mut buf = vec![0.0; n];
    for (i, &t) in grid.iter().enumerate() {
        dx.eval_into(t, &mut buf);
        let d = DVector::from_column_slice(&buf);
        let g = gains.node(i);
        ve.extend_from_slice((&g.ell_e + &g.k_e * &d).as_slice());
        vp.extend_from_slice((&g.ell_p + &g.k_p * &d).as_slice());
    }
    let de = ControlTrajectory::new(grid.clone(), problem.evader_dim(), ve)?;
    let dp = ControlTrajectory::new(grid, problem.pursuer_dim(), vp)?;
    Ok((dx, de, dp))
}

/// Converged (or best) policies with their nominal and feedback data.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub evader: ControlTrajectory,
    pub pursuer: ControlTrajectory,
    pub gains: GainTrajectory,
    pub value: ValueExpansion,
    pub nominal: Rollout,
    pub report: SolveReport,
}

struct Iterate {
    evader: ControlTrajectory,
    pursuer: ControlTrajectory,
    gains: GainTrajectory,
    value: ValueExpansion,
    nominal: Rollout,
    norm: f64,
}

fn sweep_with_schedule<P: GameProblem + ?Sized>(
    problem: &P,
    nominal: &Rollout,
    we: &ControlTrajectory,
    wp: &ControlTrajectory,
    lambda: &mut f64,
    settings: &SolverSettings,
) -> Result<(
    ValueExpansion,
    GainTrajectory,
    ControlTrajectory,
    ControlTrajectory,
)> {
    loop {
        let attempt = backward_sweep(problem, nominal, we, wp, *lambda, settings).and_then(
            |(value, gains)| {
                let (_, de, dp) = linearized_rollout(
                    problem,
                    nominal,
                    we,
                    wp,
                    &gains,
                    Some(&value),
                    &settings.rollout_tol,
                )?;
                Ok((value, gains, de, dp))
            },
        );
        match attempt {
            Ok(out) => return Ok(out),
            Err(e) if e.is_blow_up() => {
                *lambda = if *lambda > 0.0 {
                    *lambda * settings.lambda_factor
                } else {
                    settings.lambda_seed
                };
                if *lambda > settings.lambda_max {
                    return Err(Error::SolverFailure(format!(
                        "regularization exceeded {:e} without a bounded backward sweep",
                        settings.lambda_max
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Runs the outer DDP loop from the given initial controls.
pub fn solve<P: GameProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    evader_init: ControlTrajectory,
    pursuer_init: ControlTrajectory,
    settings: &SolverSettings,
) -> Result<SolveOutput> {
    settings.validate()?;
    if evader_init.dim() != problem.evader_dim() || pursuer_init.dim() != problem.pursuer_dim() {
        return Err(Error::Parameter(
            "initial control dimensions do not match the problem".into(),
        ));
    }
    if evader_init.grid() != pursuer_init.grid() {
        return Err(Error::Parameter(
            "evader and pursuer controls must share a grid".into(),
        ));
    }
    let tol = &settings.rollout_tol;
    let mut we = evader_init;
    let mut wp = pursuer_init;
    let mut nominal = forward_rollout(problem, x0, &we, &wp, tol)?;
    let mut lambda = settings.lambda_init;
    let mut report = SolveReport {
        iterations: 0,
        update_norm: f64::INFINITY,
        update_norms: Vec::new(),
        cost_history: vec![nominal.cost],
        lambda_history: Vec::new(),
        step_history: Vec::new(),
        converged: false,
    };
    let mut best: Option<Iterate> = None;
    let mut stalls = 0usize;

    for iteration in 1..=settings.max_iterations {
        report.iterations = iteration;
        let (value, gains, de, dp) =
            sweep_with_schedule(problem, &nominal, &we, &wp, &mut lambda, settings)?;
        report.lambda_history.push(lambda);
        let norm = de.norm() + dp.norm();
        report.update_norms.push(norm);
        report.update_norm = norm;

        let here = Iterate {
            evader: we.clone(),
            pursuer: wp.clone(),
            gains,
            value,
            nominal: nominal.clone(),
            norm,
        };
        if norm <= settings.epsilon {
            report.converged = true;
            return Ok(finish(here, report));
        }
        if best.as_ref().map_or(true, |b| norm < b.norm) {
            best = Some(here);
        }

        // first step that lowers J, either outright or through the evader's
        // change with the pursuer's change already applied
        let mut accepted = None;
        let mut fallback = None;
        for &gamma in &settings.step_ladder {
            let cand_e = we.add_scaled(&de, gamma);
            let cand_p = wp.add_scaled(&dp, gamma);
            let both = match forward_rollout(problem, x0, &cand_e, &cand_p, tol) {
                Ok(r) => r,
                Err(e) if e.is_blow_up() || matches!(e, Error::SingularState { .. }) => continue,
                Err(e) => return Err(e),
            };
            let slack = 1e-12 * nominal.cost.abs().max(1.0);
            let reference = if both.cost <= nominal.cost + slack {
                nominal.cost
            } else {
                match forward_rollout(problem, x0, &we, &cand_p, tol) {
                    Ok(r) => r.cost,
                    Err(_) => f64::INFINITY,
                }
            };
            if both.cost <= reference + slack {
                accepted = Some((gamma, cand_e, cand_p, both));
                break;
            }
            fallback = Some((gamma, cand_e, cand_p, both));
        }
        match accepted {
            Some((gamma, e, p, r)) => {
                stalls = 0;
                report.step_history.push(gamma);
                we = e;
                wp = p;
                nominal = r;
            }
            None => {
                stalls += 1;
                let Some((gamma, e, p, r)) = fallback else {
                    return Err(Error::SolverFailure(
                        "every step in the ladder diverged".into(),
                    ));
                };
                report.step_history.push(gamma);
                we = e;
                wp = p;
                nominal = r;
                if stalls >= settings.stall_limit {
                    break;
                }
            }
        }
        report.cost_history.push(nominal.cost);
        lambda /= settings.lambda_factor;
    }

    let best = best.expect("at least one iteration ran");
    report.update_norm = best.norm;
    Ok(finish(best, report))
}

fn finish(it: Iterate, report: SolveReport) -> SolveOutput {
    SolveOutput {
        evader: it.evader,
        pursuer: it.pursuer,
        gains: it.gains,
        value: it.value,
        nominal: it.nominal,
        report,
    }
}
