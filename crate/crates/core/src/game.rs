//! Two-spacecraft engagement: 14-dim dynamics, zero-sum costs and the
//! derivatives consumed by the DDP solver.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::ddp::{CostExpansion, DynamicsJacobians, GameProblem};
use crate::dynamics::{field_raw, jacobian_raw, SpacecraftState, SystemParams, ThrustInput};
use crate::error::{Error, Result};
use crate::orbit::{ManifoldData, PeriodicOrbit};

/// Number of engagement states: two spacecraft plus two reference phases.
pub const STATE_DIM: usize = 14;
const IDX_CE: usize = 12;
const IDX_CP: usize = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementState {
    pub evader: SpacecraftState,
    pub pursuer: SpacecraftState,
    pub c_e: f64,
    pub c_p: f64,
}

impl EngagementState {
    pub fn new(evader: SpacecraftState, pursuer: SpacecraftState, c_e: f64, c_p: f64) -> Self {
        Self {
            evader,
            pursuer,
            c_e,
            c_p,
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(STATE_DIM);
        v.rows_mut(0, 6).copy_from(&self.evader.0);
        v.rows_mut(6, 6).copy_from(&self.pursuer.0);
        v[IDX_CE] = self.c_e;
        v[IDX_CP] = self.c_p;
        v
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            evader: SpacecraftState::from_slice(&s[0..6]),
            pursuer: SpacecraftState::from_slice(&s[6..12]),
            c_e: s[IDX_CE],
            c_p: s[IDX_CP],
        }
    }

    pub fn separation(&self) -> f64 {
        (self.evader.position() - self.pursuer.position()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.evader.is_finite()
            && self.pursuer.is_finite()
            && self.c_e.is_finite()
            && self.c_p.is_finite()
    }
}

/// One player's policy value: thrust in newtons and the phase rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlayerControl {
    pub thrust: ThrustInput,
    pub tau: f64,
}

impl PlayerControl {
    pub fn new(thrust: ThrustInput, tau: f64) -> Self {
        Self { thrust, tau }
    }

    /// Zero thrust with the nominal phase rate.
    pub fn nominal() -> Self {
        Self {
            thrust: ThrustInput::zero(),
            tau: 1.0,
        }
    }

    pub fn to_vec4(&self) -> [f64; 4] {
        [
            self.thrust.0[0],
            self.thrust.0[1],
            self.thrust.0[2],
            self.tau,
        ]
    }

    /// Three entries mean the phase channel is disabled (`tau = 1`).
    pub fn from_slice(s: &[f64]) -> Self {
        let tau = if s.len() > 3 { s[3] } else { 1.0 };
        Self {
            thrust: ThrustInput::new(s[0], s[1], s[2]),
            tau,
        }
    }
}

/// Cost weights of both players. `d0` is in normalized length units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameWeights {
    pub q_e0: Matrix6<f64>,
    pub q_p0: Matrix6<f64>,
    pub f_e0: Matrix6<f64>,
    pub f_p0: Matrix6<f64>,
    pub r_e: Matrix3<f64>,
    pub r_p: Matrix3<f64>,
    pub a_e: f64,
    pub a_p: f64,
    pub w: f64,
    pub p: f64,
    pub d0: f64,
    pub alpha_e: f64,
    pub alpha_p: f64,
    pub m_e: f64,
    pub m_p: f64,
}

fn is_pd(m: &Matrix6<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && m.clone().cholesky().is_some()
}

fn is_block_diagonal(m: &Matrix6<f64>) -> bool {
    let scale = m.amax().max(1.0);
    m.fixed_view::<3, 3>(0, 3).amax() <= 1e-12 * scale
        && m.fixed_view::<3, 3>(3, 0).amax() <= 1e-12 * scale
}

impl GameWeights {
    /// Engagement weights used in the NRHO experiments.
    pub fn nrho_defaults(params: &SystemParams) -> Self {
        Self {
            q_e0: Matrix6::identity() * 5.0,
            q_p0: Matrix6::identity() * 5.0,
            f_e0: Matrix6::identity() * 5.0,
            f_p0: Matrix6::identity() * 5.0,
            r_e: Matrix3::identity() * 0.025,
            r_p: Matrix3::identity() * 0.05,
            a_e: 0.005,
            a_p: 0.01,
            w: 2000.0,
            p: 2.1,
            d0: params.km_to_nd(660.0),
            alpha_e: 1.0,
            alpha_p: 1.0,
            m_e: 1000.0,
            m_p: 1000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("Q_e0", &self.q_e0),
            ("Q_p0", &self.q_p0),
            ("F_e0", &self.f_e0),
            ("F_p0", &self.f_p0),
        ] {
            if !is_pd(m) {
                return Err(Error::Config(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
            if !is_block_diagonal(m) {
                return Err(Error::Config(format!(
                    "{name} must be block diagonal in position and velocity"
                )));
            }
        }
        for (name, r) in [("R_e", &self.r_e), ("R_p", &self.r_p)] {
            if (r - r.transpose()).amax() > 1e-12 * r.amax().max(1.0)
                || r.clone().cholesky().is_none()
            {
                return Err(Error::Config(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        let positive = [
            ("a_e", self.a_e),
            ("a_p", self.a_p),
            ("w", self.w),
            ("d0", self.d0),
            ("m_e", self.m_e),
            ("m_p", self.m_p),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.p > 2.0 && self.p.is_finite()) {
            return Err(Error::Config(format!(
                "proximity exponent must exceed 2, got {}",
                self.p
            )));
        }
        for (name, a) in [("alpha_e", self.alpha_e), ("alpha_p", self.alpha_p)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {a}")));
            }
        }
        Ok(())
    }
}

/// Proximity penalty `S(d) = (w/p)(d0 - d)^p` inside `d0`, with its first
/// and second derivatives in `d`.
pub fn proximity_penalty(d: f64, w: f64, p: f64, d0: f64) -> (f64, f64, f64) {
    if d >= d0 {
        return (0.0, 0.0, 0.0);
    }
    let gap = d0 - d;
    let value = w / p * gap.powf(p);
    let first = -w * gap.powf(p - 1.0);
    let second = w * (p - 1.0) * gap.powf(p - 2.0);
    (value, first, second)
}

/// Proximity penalty as a function of the relative position `r = p_e - p_p`:
/// value, gradient and Hessian with respect to `r`.
fn proximity_in_position(
    r: &Vector3<f64>,
    weights: &GameWeights,
) -> (f64, Vector3<f64>, Matrix3<f64>) {
    let d = r.norm();
    let (s, s1, s2) = proximity_penalty(d, weights.w, weights.p, weights.d0);
    if s1 == 0.0 && s2 == 0.0 {
        return (s, Vector3::zeros(), Matrix3::zeros());
    }
    if d < 1e-14 {
        // direction undefined at coincidence; keep the curvature along all axes
        return (s, Vector3::zeros(), Matrix3::identity() * s2);
    }
    let n = r / d;
    let nn = n * n.transpose();
    let grad = n * s1;
    let hess = nn * s2 + (Matrix3::identity() - nn) * (s1 / d);
    (s, grad, hess)
}

fn sym_sqrt3(m: Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(m);
    let mut d = Matrix3::zeros();
    for i in 0..3 {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Principal square root of a block-diagonal PD matrix, blockwise.
pub fn block_sqrt(base: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    if !is_block_diagonal(base) {
        return Err(Error::Config(
            "shaping base weight must be block diagonal".into(),
        ));
    }
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&sym_sqrt3(base.fixed_view::<3, 3>(0, 0).into_owned()));
    out.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&sym_sqrt3(base.fixed_view::<3, 3>(3, 3).into_owned()));
    Ok(out)
}

fn blend(
    base: &Matrix6<f64>,
    root: &Matrix6<f64>,
    alpha: f64,
    projector: &Matrix6<f64>,
) -> Matrix6<f64> {
    let m = base * alpha + root * projector * root * (1.0 - alpha);
    (m + m.transpose()) * 0.5
}

/// `alpha Q0 + (1 - alpha) Q0^1/2 P_u(c) Q0^1/2`.
pub fn shaped_weight(
    base: &Matrix6<f64>,
    alpha: f64,
    data: &ManifoldData,
    phase: f64,
) -> Result<Matrix6<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "shaping blend must lie in [0, 1], got {alpha}"
        )));
    }
    let root = block_sqrt(base)?;
    if alpha == 1.0 {
        return Ok(*base);
    }
    Ok(blend(base, &root, alpha, &data.unstable_projector(phase)))
}

/// Tracking weights frozen at the current phases.
#[derive(Debug, Clone, Copy)]
struct PhaseWeights {
    evader: Matrix6<f64>,
    pursuer: Matrix6<f64>,
}

/// Engagement game on a shared periodic reference orbit.
#[derive(Debug, Clone)]
pub struct EngagementGame {
    params: SystemParams,
    orbit: Arc<PeriodicOrbit>,
    manifold: Option<Arc<ManifoldData>>,
    weights: GameWeights,
    phasing: bool,
    roots: [Matrix6<f64>; 4],
}

/// Reference state, its phase rate and phase acceleration.
struct ReferenceJet {
    state: Vector6<f64>,
    rate: Vector6<f64>,
    accel: Vector6<f64>,
}

impl EngagementGame {
    pub fn new(
        params: SystemParams,
        orbit: Arc<PeriodicOrbit>,
        manifold: Option<Arc<ManifoldData>>,
        weights: GameWeights,
        phasing: bool,
    ) -> Result<Self> {
        params.validate()?;
        weights.validate()?;
        if (weights.alpha_e < 1.0 || weights.alpha_p < 1.0) && manifold.is_none() {
            return Err(Error::Config("cost shaping requires manifold data".into()));
        }
        let roots = [
            block_sqrt(&weights.q_e0)?,
            block_sqrt(&weights.q_p0)?,
            block_sqrt(&weights.f_e0)?,
            block_sqrt(&weights.f_p0)?,
        ];
        Ok(Self {
            params,
            orbit,
            manifold,
            weights,
            phasing,
            roots,
        })
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn orbit(&self) -> &PeriodicOrbit {
        &self.orbit
    }

    pub fn weights(&self) -> &GameWeights {
        &self.weights
    }

    pub fn phasing_enabled(&self) -> bool {
        self.phasing
    }

    /// Same game with new shaping blends.
    pub fn with_alphas(&self, alpha_e: f64, alpha_p: f64) -> Result<Self> {
        let mut weights = self.weights.clone();
        weights.alpha_e = alpha_e;
        weights.alpha_p = alpha_p;
        Self::new(
            self.params.clone(),
            self.orbit.clone(),
            self.manifold.clone(),
            weights,
            self.phasing,
        )
    }

    fn control_dim(&self) -> usize {
        if self.phasing {
            4
        } else {
            3
        }
    }

    fn shaped(&self, which: usize, alpha: f64, phase: f64) -> Matrix6<f64> {
        let base = match which {
            0 => &self.weights.q_e0,
            1 => &self.weights.q_p0,
            2 => &self.weights.f_e0,
            _ => &self.weights.f_p0,
        };
        match (&self.manifold, alpha < 1.0) {
            (Some(data), true) => blend(
                base,
                &self.roots[which],
                alpha,
                &data.unstable_projector(phase),
            ),
            _ => *base,
        }
    }

    fn running_weights(&self, c_e: f64, c_p: f64) -> PhaseWeights {
        PhaseWeights {
            evader: self.shaped(0, self.weights.alpha_e, c_e),
            pursuer: self.shaped(1, self.weights.alpha_p, c_p),
        }
    }

    fn terminal_weights(&self, c_e: f64, c_p: f64) -> PhaseWeights {
        PhaseWeights {
            evader: self.shaped(2, self.weights.alpha_e, c_e),
            pursuer: self.shaped(3, self.weights.alpha_p, c_p),
        }
    }

    fn reference_jet(&self, phase: f64) -> Result<ReferenceJet> {
        let state = self.orbit.sample_vector(phase);
        let rate = field_raw(&state, self.params.mu)?;
        let accel = jacobian_raw(&state, self.params.mu)? * rate;
        Ok(ReferenceJet { state, rate, accel })
    }

    /// `F(x, w_e, w_p)` for the 14-dim engagement state.
    pub fn vector_field(
        &self,
        x: &EngagementState,
        we: &PlayerControl,
        wp: &PlayerControl,
    ) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(STATE_DIM);
        let xs = x.to_vector();
        self.field_into(
            xs.as_slice(),
            &we.to_vec4(),
            &wp.to_vec4(),
            out.as_mut_slice(),
        )?;
        Ok(out)
    }

    fn field_into(&self, x: &[f64], we: &[f64], wp: &[f64], out: &mut [f64]) -> Result<()> {
        let mu = self.params.mu;
        let scale = self.params.thrust_scale();
        for (offset, w, mass) in [(0usize, we, self.weights.m_e), (6, wp, self.weights.m_p)] {
            let s = Vector6::from_column_slice(&x[offset..offset + 6]);
            let f = field_raw(&s, mu)?;
            let gain = scale / mass;
            for i in 0..6 {
                out[offset + i] = f[i];
            }
            for i in 0..3 {
                out[offset + 3 + i] += gain * w[i];
            }
        }
        let tau = |w: &[f64]| {
            if self.phasing && w.len() > 3 {
                w[3]
            } else {
                1.0
            }
        };
        out[IDX_CE] = tau(we);
        out[IDX_CP] = tau(wp);
        Ok(())
    }

    /// Running cost `L` with the shaping weights evaluated at the current phases.
    pub fn running_cost(
        &self,
        x: &EngagementState,
        we: &PlayerControl,
        wp: &PlayerControl,
    ) -> Result<f64> {
        let xs = x.to_vector();
        let pw = self.running_weights(x.c_e, x.c_p);
        self.running_cost_with(xs.as_slice(), &we.to_vec4(), &wp.to_vec4(), &pw)
    }

    fn control_cost(&self, w: &[f64], r: &Matrix3<f64>, a: f64) -> f64 {
        let u = Vector3::new(w[0], w[1], w[2]);
        let tau = if self.phasing && w.len() > 3 {
            w[3]
        } else {
            1.0
        };
        (u.transpose() * r * u)[0] + a * (tau - 1.0) * (tau - 1.0)
    }

    fn tracking_cost(&self, x: &[f64], pw: &PhaseWeights) -> f64 {
        let de = Vector6::from_column_slice(&x[0..6]) - self.orbit.sample_vector(x[IDX_CE]);
        let dp = Vector6::from_column_slice(&x[6..12]) - self.orbit.sample_vector(x[IDX_CP]);
        (de.transpose() * pw.evader * de)[0] - (dp.transpose() * pw.pursuer * dp)[0]
    }

    fn proximity(&self, x: &[f64]) -> f64 {
        let r = Vector3::new(x[0] - x[6], x[1] - x[7], x[2] - x[8]);
        proximity_penalty(r.norm(), self.weights.w, self.weights.p, self.weights.d0).0
    }

    fn running_cost_with(
        &self,
        x: &[f64],
        we: &[f64],
        wp: &[f64],
        pw: &PhaseWeights,
    ) -> Result<f64> {
        let wts = &self.weights;
        Ok(
            self.tracking_cost(x, pw) + self.control_cost(we, &wts.r_e, wts.a_e)
                - self.control_cost(wp, &wts.r_p, wts.a_p)
                + self.proximity(x),
        )
    }

    /// Terminal cost `phi` with the terminal weights shaped at the final phases.
    pub fn terminal_cost(&self, x: &EngagementState) -> Result<f64> {
        let xs = x.to_vector();
        let pw = self.terminal_weights(x.c_e, x.c_p);
        Ok(self.tracking_cost(xs.as_slice(), &pw) + self.proximity(xs.as_slice()))
    }

    /// Gradient and Hessian in `x` of the state-dependent part of the cost,
    /// with the tracking weights frozen at the current phases.
    fn state_expansion(
        &self,
        x: &[f64],
        pw: &PhaseWeights,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let mut g = DVector::zeros(STATE_DIM);
        let mut h = DMatrix::zeros(STATE_DIM, STATE_DIM);
        let mut value = 0.0;
        for (offset, ic, q, sign) in [
            (0usize, IDX_CE, &pw.evader, 1.0),
            (6usize, IDX_CP, &pw.pursuer, -1.0),
        ] {
            let jet = self.reference_jet(x[ic])?;
            let dx = Vector6::from_column_slice(&x[offset..offset + 6]) - jet.state;
            let qdx = q * dx;
            let qrate = q * jet.rate;
            value += sign * dx.dot(&qdx);
            for i in 0..6 {
                g[offset + i] += sign * 2.0 * qdx[i];
            }
            g[ic] += -sign * 2.0 * jet.rate.dot(&qdx);
            for i in 0..6 {
                for j in 0..6 {
                    h[(offset + i, offset + j)] += sign * 2.0 * q[(i, j)];
                }
                h[(offset + i, ic)] += -sign * 2.0 * qrate[i];
                h[(ic, offset + i)] += -sign * 2.0 * qrate[i];
            }
            h[(ic, ic)] += sign * (2.0 * jet.rate.dot(&qrate) - 2.0 * qdx.dot(&jet.accel));
        }
        let r = Vector3::new(x[0] - x[6], x[1] - x[7], x[2] - x[8]);
        let (s, sg, sh) = proximity_in_position(&r, &self.weights);
        value += s;
        for i in 0..3 {
            g[i] += sg[i];
            g[6 + i] -= sg[i];
            for j in 0..3 {
                h[(i, j)] += sh[(i, j)];
                h[(6 + i, 6 + j)] += sh[(i, j)];
                h[(i, 6 + j)] -= sh[(i, j)];
                h[(6 + i, j)] -= sh[(i, j)];
            }
        }
        Ok((value, g, h))
    }

    fn control_expansion(
        &self,
        w: &[f64],
        r: &Matrix3<f64>,
        a: f64,
        sign: f64,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.control_dim();
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        let u = Vector3::new(w[0], w[1], w[2]);
        let ru = r * u;
        for i in 0..3 {
            g[i] = sign * 2.0 * ru[i];
            for j in 0..3 {
                h[(i, j)] = sign * 2.0 * r[(i, j)];
            }
        }
        if self.phasing {
            g[3] = sign * 2.0 * a * (w[3] - 1.0);
            h[(3, 3)] = sign * 2.0 * a;
        }
        (g, h)
    }

    /// Analytic first and second derivatives of `L` (shaping frozen in phase).
    pub fn cost_derivatives(
        &self,
        x: &EngagementState,
        we: &PlayerControl,
        wp: &PlayerControl,
    ) -> Result<CostExpansion> {
        let xs = x.to_vector();
        let m = self.control_dim();
        self.expansion(0.0, xs.as_slice(), &we.to_vec4()[..m], &wp.to_vec4()[..m])
    }

    /// `F_x`, `F_we`, `F_wp` at the given point.
    pub fn dynamics_derivatives(&self, x: &EngagementState) -> Result<DynamicsJacobians> {
        let xs = x.to_vector();
        self.jacobians_at(xs.as_slice())
    }

    fn jacobians_at(&self, x: &[f64]) -> Result<DynamicsJacobians> {
        let mu = self.params.mu;
        let m = self.control_dim();
        let mut f_x = DMatrix::zeros(STATE_DIM, STATE_DIM);
        for offset in [0usize, 6] {
            let a = jacobian_raw(&Vector6::from_column_slice(&x[offset..offset + 6]), mu)?;
            f_x.view_mut((offset, offset), (6, 6)).copy_from(&a);
        }
        let scale = self.params.thrust_scale();
        let mut f_we = DMatrix::zeros(STATE_DIM, m);
        let mut f_wp = DMatrix::zeros(STATE_DIM, m);
        for i in 0..3 {
            f_we[(3 + i, i)] = scale / self.weights.m_e;
            f_wp[(9 + i, i)] = scale / self.weights.m_p;
        }
        if self.phasing {
            f_we[(IDX_CE, 3)] = 1.0;
            f_wp[(IDX_CP, 3)] = 1.0;
        }
        Ok(DynamicsJacobians { f_x, f_we, f_wp })
    }
}

impl GameProblem for EngagementGame {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn evader_dim(&self) -> usize {
        self.control_dim()
    }

    fn pursuer_dim(&self) -> usize {
        self.control_dim()
    }

    fn dynamics(&self, _t: f64, x: &[f64], we: &[f64], wp: &[f64], out: &mut [f64]) -> Result<()> {
        self.field_into(x, we, wp, out)
    }

    fn jacobians(&self, _t: f64, x: &[f64], _we: &[f64], _wp: &[f64]) -> Result<DynamicsJacobians> {
        self.jacobians_at(x)
    }

    fn running_cost(&self, _t: f64, x: &[f64], we: &[f64], wp: &[f64]) -> Result<f64> {
        let pw = self.running_weights(x[IDX_CE], x[IDX_CP]);
        self.running_cost_with(x, we, wp, &pw)
    }

    fn expansion(&self, _t: f64, x: &[f64], we: &[f64], wp: &[f64]) -> Result<CostExpansion> {
        let pw = self.running_weights(x[IDX_CE], x[IDX_CP]);
        let (_, l_x, l_xx) = self.state_expansion(x, &pw)?;
        let wts = &self.weights;
        let (l_we, l_wewe) = self.control_expansion(we, &wts.r_e, wts.a_e, 1.0);
        let (l_wp, l_wpwp) = self.control_expansion(wp, &wts.r_p, wts.a_p, -1.0);
        Ok(CostExpansion {
            l: self.running_cost_with(x, we, wp, &pw)?,
            l_x,
            l_xx,
            l_we,
            l_wewe,
            l_wp,
            l_wpwp,
        })
    }

    fn terminal_cost(&self, x: &[f64]) -> Result<f64> {
        let pw = self.terminal_weights(x[IDX_CE], x[IDX_CP]);
        Ok(self.tracking_cost(x, &pw) + self.proximity(x))
    }

    fn terminal_expansion(&self, x: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let pw = self.terminal_weights(x[IDX_CE], x[IDX_CP]);
        self.state_expansion(x, &pw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::Tolerances;
    use crate::orbit::{monodromy, southern_nrho};
    use std::sync::OnceLock;

    fn setup() -> &'static (Arc<PeriodicOrbit>, Arc<ManifoldData>) {
        static CELL: OnceLock<(Arc<PeriodicOrbit>, Arc<ManifoldData>)> = OnceLock::new();
        CELL.get_or_init(|| {
            let tol = Tolerances::new(1e-12, 1e-12);
            let orbit = southern_nrho(&SystemParams::earth_moon(), &tol).unwrap();
            let data = monodromy(&orbit, &tol).unwrap();
            (Arc::new(orbit), Arc::new(data))
        })
    }

    fn game(alpha: f64, phasing: bool) -> EngagementGame {
        let (orbit, data) = setup();
        let params = SystemParams::earth_moon();
        let mut w = GameWeights::nrho_defaults(&params);
        w.alpha_e = alpha;
        w.alpha_p = alpha;
        EngagementGame::new(params, orbit.clone(), Some(data.clone()), w, phasing).unwrap()
    }

    /// Deterministic pseudo-random sample points near the orbit with the
    /// spacecraft inside the proximity radius.
    fn sample_point(k: usize, g: &EngagementGame) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let r = |i: usize| ((k * 31 + i * 17) as f64 * 0.61803).sin();
        let c_e = 0.3 + 0.9 * r(1).abs();
        let c_p = c_e - 0.001 + 0.0005 * r(2);
        let mut x = vec![0.0; STATE_DIM];
        let xe = g.orbit().sample_vector(c_e);
        for i in 0..6 {
            x[i] = xe[i] + 1e-3 * r(3 + i);
            x[6 + i] = xe[i] + 1e-3 * r(10 + i);
        }
        // pursuer close enough to feel the proximity penalty
        for i in 0..3 {
            x[6 + i] = x[i] + 0.4 * g.weights().d0 * r(20 + i) / 3f64.sqrt();
        }
        x[IDX_CE] = c_e;
        x[IDX_CP] = c_p;
        let we = vec![0.2 * r(30), -0.1 * r(31), 0.05 * r(32), 1.0 + 0.1 * r(33)];
        let wp = vec![0.1 * r(40), 0.3 * r(41), -0.2 * r(42), 1.0 + 0.1 * r(43)];
        (x, we, wp)
    }

    fn rel_close(a: f64, b: f64, tol: f64, scale: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(scale)
    }

    #[test]
    fn state_derivatives_match_frozen_weight_differences() {
        for alpha in [1.0, 0.3] {
            let g = game(alpha, true);
            for k in 0..50 {
                let (x, we, wp) = sample_point(k, &g);
                let pw = g.running_weights(x[IDX_CE], x[IDX_CP]);
                let (_, gx, hx) = g.state_expansion(&x, &pw).unwrap();
                let cost = |y: &[f64]| g.running_cost_with(y, &we, &wp, &pw).unwrap();
                let grad_at = |y: &[f64]| g.state_expansion(y, &pw).unwrap().1;
                let scale = gx.amax().max(1e-6);
                for i in 0..STATE_DIM {
                    let h = 1e-6;
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (cost(&xp) - cost(&xm)) / (2.0 * h);
                    assert!(
                        rel_close(gx[i], fd, 1e-5, scale),
                        "L_x[{i}] {} vs {fd} (alpha {alpha})",
                        gx[i]
                    );
                    let gd = (grad_at(&xp) - grad_at(&xm)) / (2.0 * h);
                    let hscale = hx.amax();
                    for j in 0..STATE_DIM {
                        assert!(
                            rel_close(hx[(j, i)], gd[j], 1e-5, hscale),
                            "L_xx[{j},{i}] {} vs {}",
                            hx[(j, i)],
                            gd[j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn control_derivatives_match_differences() {
        let g = game(1.0, true);
        for k in 0..50 {
            let (x, we, wp) = sample_point(k, &g);
            let e = g.expansion(0.0, &x, &we, &wp).unwrap();
            for (which, grad, hess) in [(0, &e.l_we, &e.l_wewe), (1, &e.l_wp, &e.l_wpwp)] {
                for i in 0..4 {
                    let h = 1e-6;
                    let shift = |d: f64| {
                        let (mut a, mut b) = (we.clone(), wp.clone());
                        if which == 0 {
                            a[i] += d;
                        } else {
                            b[i] += d;
                        }
                        GameProblem::running_cost(&g, 0.0, &x, &a, &b).unwrap()
                    };
                    let fd = (shift(h) - shift(-h)) / (2.0 * h);
                    assert!(rel_close(grad[i], fd, 1e-5, 1e-6), "{} vs {fd}", grad[i]);
                    // exactly quadratic in the controls, so a wide stencil is exact
                    let h2 = 1e-2;
                    let fd2 = (shift(h2) - 2.0 * shift(0.0) + shift(-h2)) / (h2 * h2);
                    assert!(
                        rel_close(hess[(i, i)], fd2, 1e-5, 1e-3),
                        "{} vs {fd2}",
                        hess[(i, i)]
                    );
                }
            }
        }
    }

    #[test]
    fn control_hessians_are_closed_form() {
        let g = game(1.0, true);
        let (x, we, wp) = sample_point(3, &g);
        let e = g.expansion(0.0, &x, &we, &wp).unwrap();
        let w = g.weights();
        let mut expect_e = DMatrix::zeros(4, 4);
        let mut expect_p = DMatrix::zeros(4, 4);
        for i in 0..3 {
            for j in 0..3 {
                expect_e[(i, j)] = 2.0 * w.r_e[(i, j)];
                expect_p[(i, j)] = -2.0 * w.r_p[(i, j)];
            }
        }
        expect_e[(3, 3)] = 2.0 * w.a_e;
        expect_p[(3, 3)] = -2.0 * w.a_p;
        assert_eq!(e.l_wewe, expect_e);
        assert_eq!(e.l_wpwp, expect_p);
    }

    #[test]
    fn jacobian_matches_differences_and_structure() {
        let g = game(1.0, true);
        for k in 0..20 {
            let (x, we, wp) = sample_point(k, &g);
            let jac = g.jacobians_at(&x).unwrap();
            let field = |y: &[f64], a: &[f64], b: &[f64]| {
                let mut out = vec![0.0; STATE_DIM];
                g.field_into(y, a, b, &mut out).unwrap();
                DVector::from_vec(out)
            };
            for i in 0..STATE_DIM {
                let h = 1e-7;
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (field(&xp, &we, &wp) - field(&xm, &we, &wp)) / (2.0 * h);
                for j in 0..STATE_DIM {
                    assert!(rel_close(jac.f_x[(j, i)], fd[j], 1e-6, 1.0), "F_x[{j},{i}]");
                }
            }
            for i in 0..4 {
                let mut a = we.clone();
                a[i] += 1.0;
                let d = field(&x, &a, &wp) - field(&x, &we, &wp);
                for j in 0..STATE_DIM {
                    assert!((jac.f_we[(j, i)] - d[j]).abs() < 1e-9);
                }
            }
            for r in [IDX_CE, IDX_CP] {
                assert!(jac.f_x.row(r).iter().all(|v| *v == 0.0));
                assert!(jac.f_x.column(r).iter().all(|v| *v == 0.0));
            }
            assert_eq!(jac.f_we[(IDX_CE, 3)], 1.0);
            assert_eq!(jac.f_wp[(IDX_CP, 3)], 1.0);
        }
    }

    #[test]
    fn proximity_vanishes_beyond_radius() {
        let g = game(1.0, true);
        let (mut x, _, _) = sample_point(5, &g);
        for i in 0..3 {
            x[6 + i] = x[i] + 2.0 * g.weights().d0 / 3f64.sqrt();
        }
        let pw = g.running_weights(x[IDX_CE], x[IDX_CP]);
        let (_, gx, hx) = g.state_expansion(&x, &pw).unwrap();
        let r = Vector3::new(x[0] - x[6], x[1] - x[7], x[2] - x[8]);
        let (s, sg, sh) = proximity_in_position(&r, g.weights());
        assert_eq!(s, 0.0);
        assert_eq!(sg, Vector3::zeros());
        assert_eq!(sh, Matrix3::zeros());
        assert!(gx.iter().all(|v| v.is_finite()) && hx.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn penalty_is_c2_across_radius() {
        let g = game(1.0, true);
        let w = g.weights();
        for e in [1e-6, 1e-8] {
            let inside = proximity_penalty(w.d0 * (1.0 - e), w.w, w.p, w.d0);
            let outside = proximity_penalty(w.d0 * (1.0 + e), w.w, w.p, w.d0);
            assert!((inside.0 - outside.0).abs() < 1e-9);
            assert!((inside.1 - outside.1).abs() < 1e-4);
        }
        // curvature decays to zero at the boundary (Hoelder exponent p - 2)
        let mut last = f64::INFINITY;
        for e in [1e-3, 1e-6, 1e-9, 1e-12] {
            let s2 = proximity_penalty(w.d0 * (1.0 - e), w.w, w.p, w.d0).2;
            assert!(s2 > 0.0 && s2 < last);
            last = s2;
        }
        assert!(last < 0.1 * proximity_penalty(0.0, w.w, w.p, w.d0).2);
        assert_eq!(proximity_penalty(w.d0, w.w, w.p, w.d0), (0.0, 0.0, 0.0));
        let (s0, _, _) = proximity_penalty(0.0, w.w, w.p, w.d0);
        assert!((s0 - w.w / w.p * w.d0.powf(w.p)).abs() < 1e-15);
    }
}
