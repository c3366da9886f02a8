//! Linear-quadratic pursuit-evasion game about a shared reference orbit and
//! the distance-switched LQ pursuer built on it.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::ddp::{CostExpansion, DynamicsJacobians, GameProblem};
use crate::dynamics::{jacobian_raw, SystemParams, ThrustInput};
use crate::error::{Error, Result};
use crate::game::EngagementState;
use crate::ode::{self, DenseTrajectory, Tolerances};
use crate::orbit::PeriodicOrbit;

/// Stacked tracking-error dimension (evader then pursuer).
pub const LQ_DIM: usize = 12;

/// Weights and reference of the LQ game. Both players track the same
/// reference phase `phase_offset + t`.
#[derive(Debug, Clone)]
pub struct LqGameSetup {
    pub params: SystemParams,
    pub orbit: Arc<PeriodicOrbit>,
    pub phase_offset: f64,
    pub r_e: Matrix3<f64>,
    pub r_p: Matrix3<f64>,
    pub q_e: Matrix6<f64>,
    pub q_p: Matrix6<f64>,
    pub f_e: Matrix6<f64>,
    pub f_p: Matrix6<f64>,
    pub m: Matrix3<f64>,
    pub m_f: Matrix3<f64>,
    pub m_e: f64,
    pub m_p: f64,
}

/// Block matrices of the LQ game at one time.
#[derive(Debug, Clone)]
pub struct LqMatrices {
    pub a: DMatrix<f64>,
    pub b_e: DMatrix<f64>,
    pub b_p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_f: DMatrix<f64>,
}

fn spd3(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && m.clone().cholesky().is_some()
}

fn psd3(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
        && m.symmetric_eigenvalues().iter().all(|v| *v >= -1e-12)
}

fn spd6(m: &Matrix6<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && m.clone().cholesky().is_some()
}

/// Evasion coupling `[[Q_e - M, M], [M, -Q_p - M]]` with `M` on the
/// position blocks.
fn coupled_weight(q_e: &Matrix6<f64>, q_p: &Matrix6<f64>, m: &Matrix3<f64>) -> DMatrix<f64> {
    let mut big_m = DMatrix::zeros(6, 6);
    big_m.view_mut((0, 0), (3, 3)).copy_from(m);
    let mut q = DMatrix::zeros(LQ_DIM, LQ_DIM);
    let qe = DMatrix::from_column_slice(6, 6, q_e.as_slice());
    let qp = DMatrix::from_column_slice(6, 6, q_p.as_slice());
    q.view_mut((0, 0), (6, 6)).copy_from(&(&qe - &big_m));
    q.view_mut((0, 6), (6, 6)).copy_from(&big_m);
    q.view_mut((6, 0), (6, 6)).copy_from(&big_m);
    q.view_mut((6, 6), (6, 6)).copy_from(&(-&qp - &big_m));
    q
}

impl LqGameSetup {
    pub fn validate(&self) -> Result<()> {
        if !spd3(&self.r_e) || !spd3(&self.r_p) {
            return Err(Error::Config(
                "LQ thrust weights must be positive definite".into(),
            ));
        }
        for m in [&self.q_e, &self.q_p, &self.f_e, &self.f_p] {
            if !spd6(m) {
                return Err(Error::Config(
                    "LQ tracking weights must be positive definite".into(),
                ));
            }
        }
        if !psd3(&self.m) || !psd3(&self.m_f) {
            return Err(Error::Config(
                "evasion weights must be positive semidefinite".into(),
            ));
        }
        if !(self.m_e > 0.0 && self.m_p > 0.0) {
            return Err(Error::Config("spacecraft masses must be positive".into()));
        }
        Ok(())
    }

    /// Same setup with both evasion weights replaced.
    pub fn with_evasion(&self, m: Matrix3<f64>, m_f: Matrix3<f64>) -> Self {
        Self {
            m,
            m_f,
            ..self.clone()
        }
    }

    fn input_matrix(&self, offset: usize, mass: f64) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(LQ_DIM, 3);
        let gain = self.params.thrust_scale() / mass;
        for i in 0..3 {
            b[(offset + 3 + i, i)] = gain;
        }
        b
    }

    fn state_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        let xd = self.orbit.sample_vector(self.phase_offset + t);
        let a6 = jacobian_raw(&xd, self.params.mu)?;
        let mut a = DMatrix::zeros(LQ_DIM, LQ_DIM);
        a.view_mut((0, 0), (6, 6)).copy_from(&a6);
        a.view_mut((6, 6), (6, 6)).copy_from(&a6);
        Ok(a)
    }
}

/// Assembles `A(t)`, `B_e`, `B_p`, `Q(t)` and `Q_f` of the LQ game.
pub fn assemble_lq_matrices(setup: &LqGameSetup, t: f64) -> Result<LqMatrices> {
    Ok(LqMatrices {
        a: setup.state_matrix(t)?,
        b_e: setup.input_matrix(0, setup.m_e),
        b_p: setup.input_matrix(6, setup.m_p),
        q: coupled_weight(&setup.q_e, &setup.q_p, &setup.m),
        q_f: coupled_weight(&setup.f_e, &setup.f_p, &setup.m_f),
    })
}

/// Dense solution `S(t)` of the game Riccati equation.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    dim: usize,
    trajectory: DenseTrajectory,
    terminal: DMatrix<f64>,
    b_e: DMatrix<f64>,
    b_p: DMatrix<f64>,
    r_e: DMatrix<f64>,
    r_p: DMatrix<f64>,
}

impl RiccatiSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn span(&self) -> (f64, f64) {
        let (a, b) = self.trajectory.span();
        (a.min(b), a.max(b))
    }

    /// `S(t)`, symmetrized; the terminal value is returned exactly.
    pub fn s(&self, t: f64) -> DMatrix<f64> {
        let (_, tf) = self.span();
        if t >= tf {
            return self.terminal.clone();
        }
        let m = DMatrix::from_column_slice(self.dim, self.dim, self.trajectory.eval(t).as_slice());
        (&m + m.transpose()) * 0.5
    }

    /// `(u_e, u_p) = (-R_e^-1 B_e^T S dx, +R_p^-1 B_p^T S dx)`.
    pub fn policies(&self, dx: &DVector<f64>, t: f64) -> (DVector<f64>, DVector<f64>) {
        let sdx = self.s(t) * dx;
        let ue = -self
            .r_e
            .clone()
            .cholesky()
            .expect("validated PD")
            .solve(&self.b_e.tr_mul(&sdx));
        let up = self
            .r_p
            .clone()
            .cholesky()
            .expect("validated PD")
            .solve(&self.b_p.tr_mul(&sdx));
        (ue, up)
    }

    /// Evader and pursuer feedback gains `u = K dx` at `t`.
    pub fn gains(&self, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let s = self.s(t);
        let ke = -self
            .r_e
            .clone()
            .cholesky()
            .expect("validated PD")
            .solve(&self.b_e.tr_mul(&s));
        let kp = self
            .r_p
            .clone()
            .cholesky()
            .expect("validated PD")
            .solve(&self.b_p.tr_mul(&s));
        (ke, kp)
    }
}

/// Generic backward integration of
/// `-S' = A^T S + S A + Q - S B_e R_e^-1 B_e^T S + S B_p R_p^-1 B_p^T S`.
#[allow(clippy::too_many_arguments)]
pub fn solve_game_riccati<A, Q>(
    a_of: A,
    q_of: Q,
    q_f: &DMatrix<f64>,
    b_e: &DMatrix<f64>,
    b_p: &DMatrix<f64>,
    r_e: &DMatrix<f64>,
    r_p: &DMatrix<f64>,
    t0: f64,
    tf: f64,
    tol: &Tolerances,
) -> Result<RiccatiSolution>
where
    A: Fn(f64) -> Result<DMatrix<f64>>,
    Q: Fn(f64) -> DMatrix<f64>,
{
    let n = q_f.nrows();
    if !(tf > t0) {
        return Err(Error::Parameter("Riccati horizon must be positive".into()));
    }
    let re_chol = r_e
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("R_e not positive definite".into()))?;
    let rp_chol = r_p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("R_p not positive definite".into()))?;
    let ge = b_e * re_chol.solve(&b_e.transpose());
    let gp = b_p * rp_chol.solve(&b_p.transpose());
    let y_f = DVector::from_column_slice(q_f.as_slice());
    let trajectory = ode::propagate(
        |t, y, dy| {
            let m = DMatrix::from_column_slice(n, n, y);
            let s = (&m + m.transpose()) * 0.5;
            if !(s.amax() <= 1e12) {
                return Err(Error::ConjugatePoint { t });
            }
            let a = a_of(t)?;
            let sa = &s * &a;
            let rhs = sa.transpose() + &sa + q_of(t) - &s * &ge * &s + &s * &gp * &s;
            let rhs = (&rhs + rhs.transpose()) * 0.5;
            for (d, v) in dy.iter_mut().zip(rhs.iter()) {
                *d = -v;
            }
            Ok(())
        },
        &y_f,
        tf,
        t0,
        tol,
    )
    .map_err(|e| match e {
        Error::BlowUp { t, .. } => Error::ConjugatePoint { t },
        other => other,
    })?;
    Ok(RiccatiSolution {
        dim: n,
        trajectory,
        terminal: q_f.clone(),
        b_e: b_e.clone(),
        b_p: b_p.clone(),
        r_e: r_e.clone(),
        r_p: r_p.clone(),
    })
}

fn dyn3(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

/// Backward Riccati solve of the 12-dim LQ game on `[t0, tf]`.
pub fn solve_riccati(
    setup: &LqGameSetup,
    t0: f64,
    tf: f64,
    tol: &Tolerances,
) -> Result<RiccatiSolution> {
    setup.validate()?;
    let m = assemble_lq_matrices(setup, t0)?;
    let q = m.q.clone();
    solve_game_riccati(
        |t| setup.state_matrix(t),
        |_| q.clone(),
        &m.q_f,
        &m.b_e,
        &m.b_p,
        &dyn3(&setup.r_e),
        &dyn3(&setup.r_p),
        t0,
        tf,
        tol,
    )
}

/// Saddle-point controls for a 12-dim tracking error.
pub fn saddle_policies(
    sol: &RiccatiSolution,
    dx: &DVector<f64>,
    t: f64,
) -> (ThrustInput, ThrustInput) {
    let (ue, up) = sol.policies(dx, t);
    (
        ThrustInput(Vector3::new(ue[0], ue[1], ue[2])),
        ThrustInput(Vector3::new(up[0], up[1], up[2])),
    )
}

/// Stacked tracking error of both spacecraft against the reference at
/// `phase`.
pub fn tracking_error(x: &EngagementState, orbit: &PeriodicOrbit, phase: f64) -> DVector<f64> {
    let xd = orbit.sample_vector(phase);
    let mut dx = DVector::zeros(LQ_DIM);
    dx.rows_mut(0, 6).copy_from(&(x.evader.0 - xd));
    dx.rows_mut(6, 6).copy_from(&(x.pursuer.0 - xd));
    dx
}

/// Pursuit-mode and tracking-mode Riccati solutions over one horizon.
#[derive(Debug, Clone)]
pub struct LqPursuer {
    pub pursuit: Option<RiccatiSolution>,
    pub track: RiccatiSolution,
    /// Evasion weight scale actually used after conjugate-point retries.
    pub evasion_scale: f64,
    pub phase_offset: f64,
}

impl LqPursuer {
    /// Solves both modes on `[t0, tf]`. A conjugate point in pursuit mode
    /// halves the evasion weights once, then drops to tracking only.
    pub fn prepare(setup: &LqGameSetup, t0: f64, tf: f64, tol: &Tolerances) -> Result<Self> {
        let track = solve_riccati(
            &setup.with_evasion(Matrix3::zeros(), Matrix3::zeros()),
            t0,
            tf,
            tol,
        )?;
        let mut scale = 1.0;
        let mut pursuit = None;
        for _ in 0..2 {
            let s = setup.with_evasion(setup.m * scale, setup.m_f * scale);
            match solve_riccati(&s, t0, tf, tol) {
                Ok(sol) => {
                    pursuit = Some(sol);
                    break;
                }
                Err(Error::ConjugatePoint { .. }) => scale *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if pursuit.is_none() {
            scale = 0.0;
        }
        Ok(Self {
            pursuit,
            track,
            evasion_scale: scale,
            phase_offset: setup.phase_offset,
        })
    }
}

/// Pursuer thrust: pursuit saddle policy at or below the threshold
/// separation, LQ tracking above it. The phase rate is always 1.
pub fn lq_pursuer_policy(
    pursuer: &LqPursuer,
    x: &EngagementState,
    orbit: &PeriodicOrbit,
    t: f64,
    threshold: f64,
) -> ThrustInput {
    let dx = tracking_error(x, orbit, pursuer.phase_offset + t);
    let sol = match (&pursuer.pursuit, x.separation() <= threshold) {
        (Some(p), true) => p,
        _ => &pursuer.track,
    };
    saddle_policies(sol, &dx, t).1
}

/// The LQ game written as a DDP problem over the 12-dim tracking error.
#[derive(Debug, Clone)]
pub struct LqGameProblem {
    setup: LqGameSetup,
    b_e: DMatrix<f64>,
    b_p: DMatrix<f64>,
    q: DMatrix<f64>,
    q_f: DMatrix<f64>,
}

impl LqGameProblem {
    pub fn new(setup: LqGameSetup) -> Result<Self> {
        setup.validate()?;
        let m = assemble_lq_matrices(&setup, 0.0)?;
        Ok(Self {
            setup,
            b_e: m.b_e,
            b_p: m.b_p,
            q: m.q,
            q_f: m.q_f,
        })
    }
}

impl GameProblem for LqGameProblem {
    fn state_dim(&self) -> usize {
        LQ_DIM
    }

    fn evader_dim(&self) -> usize {
        3
    }

    fn pursuer_dim(&self) -> usize {
        3
    }

    fn dynamics(&self, t: f64, x: &[f64], we: &[f64], wp: &[f64], out: &mut [f64]) -> Result<()> {
        let a = self.setup.state_matrix(t)?;
        let rate = a * DVector::from_column_slice(x)
            + &self.b_e * DVector::from_column_slice(we)
            + &self.b_p * DVector::from_column_slice(wp);
        out.copy_from_slice(rate.as_slice());
        Ok(())
    }

    fn jacobians(&self, t: f64, _x: &[f64], _we: &[f64], _wp: &[f64]) -> Result<DynamicsJacobians> {
        Ok(DynamicsJacobians {
            f_x: self.setup.state_matrix(t)?,
            f_we: self.b_e.clone(),
            f_wp: self.b_p.clone(),
        })
    }

    fn running_cost(&self, _t: f64, x: &[f64], we: &[f64], wp: &[f64]) -> Result<f64> {
        let x = DVector::from_column_slice(x);
        let ue = Vector3::from_column_slice(we);
        let up = Vector3::from_column_slice(wp);
        Ok(
            x.dot(&(&self.q * &x)) + ue.dot(&(self.setup.r_e * ue))
                - up.dot(&(self.setup.r_p * up)),
        )
    }

    fn expansion(&self, t: f64, x: &[f64], we: &[f64], wp: &[f64]) -> Result<CostExpansion> {
        let xv = DVector::from_column_slice(x);
        let re = dyn3(&self.setup.r_e);
        let rp = dyn3(&self.setup.r_p);
        Ok(CostExpansion {
            l: self.running_cost(t, x, we, wp)?,
            l_x: &self.q * &xv * 2.0,
            l_xx: &self.q * 2.0,
            l_we: &re * DVector::from_column_slice(we) * 2.0,
            l_wewe: &re * 2.0,
            l_wp: &rp * DVector::from_column_slice(wp) * -2.0,
            l_wpwp: &rp * -2.0,
        })
    }

    fn terminal_cost(&self, x: &[f64]) -> Result<f64> {
        let x = DVector::from_column_slice(x);
        Ok(x.dot(&(&self.q_f * &x)))
    }

    fn terminal_expansion(&self, x: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let xv = DVector::from_column_slice(x);
        Ok((
            xv.dot(&(&self.q_f * &xv)),
            &self.q_f * &xv * 2.0,
            &self.q_f * 2.0,
        ))
    }
}

/// Serializable summary of a Riccati solve for inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiccatiSummary {
    pub t0: f64,
    pub tf: f64,
    pub s0_eigenvalues: Vec<f64>,
    pub evasion_scale: f64,
}

impl RiccatiSummary {
    pub fn of(sol: &RiccatiSolution, evasion_scale: f64) -> Self {
        let (t0, tf) = sol.span();
        let mut ev: Vec<f64> = sol.s(t0).symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        Self {
            t0,
            tf,
            s0_eigenvalues: ev,
            evasion_scale,
        }
    }
}
