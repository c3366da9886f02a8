//! Periodic reference orbits and their Floquet (monodromy) structure.

use nalgebra::{Complex, DVector, Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{field_raw, jacobian_raw, SpacecraftState, SystemParams};
use crate::error::{Error, Result};
use crate::ode::{self, DenseTrajectory, Tolerances};

/// Largest periodicity residual accepted by [`PeriodicOrbit::load`].
pub const MAX_PERIODICITY_RESIDUAL: f64 = 1e-6;

/// Propagates the state together with its 6x6 state transition matrix
/// (column-major after the six state components).
pub fn propagate_with_stm(
    state: &SpacecraftState,
    params: &SystemParams,
    t0: f64,
    tf: f64,
    tol: &Tolerances,
) -> Result<DenseTrajectory> {
    let mu = params.mu;
    let mut y0 = DVector::zeros(42);
    y0.rows_mut(0, 6).copy_from(&state.0);
    for i in 0..6 {
        y0[6 + i * 6 + i] = 1.0;
    }
    ode::propagate(
        |_, y, dy| {
            let s = Vector6::from_column_slice(&y[..6]);
            let f = field_raw(&s, mu)?;
            let a = jacobian_raw(&s, mu)?;
            let phi = Matrix6::from_column_slice(&y[6..42]);
            let dphi = a * phi;
            dy[..6].copy_from_slice(f.as_slice());
            dy[6..].copy_from_slice(dphi.as_slice());
            Ok(())
        },
        &y0,
        t0,
        tf,
        tol,
    )
}

fn stm_from(y: &[f64]) -> Matrix6<f64> {
    Matrix6::from_column_slice(&y[6..42])
}

/// Validated periodic solution of the uncontrolled dynamics, sampled by
/// phase with wraparound.
#[derive(Debug, Clone)]
pub struct PeriodicOrbit {
    initial_state: SpacecraftState,
    period: f64,
    params: SystemParams,
    trajectory: DenseTrajectory,
    periodicity_residual: f64,
}

impl PeriodicOrbit {
    /// Propagates `initial_state` over one `period` and checks it closes.
    pub fn load(
        initial_state: SpacecraftState,
        period: f64,
        params: &SystemParams,
        tol: &Tolerances,
    ) -> Result<Self> {
        params.validate()?;
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::Parameter(format!(
                "orbit period must be positive, got {period}"
            )));
        }
        let trajectory =
            crate::dynamics::propagate_state(&initial_state, params, 0.0, period, tol)?;
        let end = trajectory.final_state();
        let residual = (Vector6::from_column_slice(end.as_slice()) - initial_state.0).norm();
        if !(residual <= MAX_PERIODICITY_RESIDUAL) {
            return Err(Error::Periodicity { residual });
        }
        Ok(Self {
            initial_state,
            period,
            params: params.clone(),
            trajectory,
            periodicity_residual: residual,
        })
    }

    pub fn initial_state(&self) -> &SpacecraftState {
        &self.initial_state
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn periodicity_residual(&self) -> f64 {
        self.periodicity_residual
    }

    pub fn trajectory(&self) -> &DenseTrajectory {
        &self.trajectory
    }

    /// Phase reduced into `[0, T)`.
    pub fn wrap_phase(&self, phase: f64) -> f64 {
        let w = phase.rem_euclid(self.period);
        if w >= self.period {
            0.0
        } else {
            w
        }
    }

    /// Reference state `x_d(c)` at an arbitrary real phase.
    pub fn sample(&self, phase: f64) -> SpacecraftState {
        SpacecraftState(self.sample_vector(phase))
    }

    pub(crate) fn sample_vector(&self, phase: f64) -> Vector6<f64> {
        let mut out = [0.0; 6];
        self.trajectory.eval_into(self.wrap_phase(phase), &mut out);
        Vector6::from_column_slice(&out)
    }

    /// `d x_d / dc`, the orbit's own vector field at that phase.
    pub fn phase_rate(&self, phase: f64) -> Vector6<f64> {
        field_raw(&self.sample_vector(phase), self.params.mu).unwrap_or_else(|_| Vector6::zeros())
    }

    /// Distance to the smaller primary at `n` uniform phases, returned as
    /// (min, max) with the phases where they occur.
    pub fn secondary_distance_extrema(&self, n: usize) -> ((f64, f64), (f64, f64)) {
        let moon = self.params.smaller_primary();
        let mut lo = (f64::INFINITY, 0.0);
        let mut hi = (f64::NEG_INFINITY, 0.0);
        for i in 0..n {
            let c = self.period * i as f64 / n as f64;
            let r = (self.sample(c).position() - moon).norm();
            if r < lo.0 {
                lo = (r, c);
            }
            if r > hi.0 {
                hi = (r, c);
            }
        }
        (lo, hi)
    }
}

/// Which coordinate stays fixed during single shooting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// Vary (z0, vy0, T/2).
    FixedX,
    /// Vary (x0, vy0, T/2).
    FixedZ,
    /// Vary (x0, z0, vy0) with the period held at the guess.
    FixedPeriod,
}

/// Residual threshold on the half-period crossing conditions.
pub const CORRECTION_TOLERANCE: f64 = 1e-10;
const CORRECTION_MAX_ITERATIONS: usize = 50;

/// Single-shooting corrector for orbits symmetric about the x-z plane.
///
/// The guess must start on `y = 0` with velocity perpendicular to that
/// plane; the corrector enforces `y = vx = vz = 0` at the half period.
pub fn differential_correct(
    guess: &SpacecraftState,
    guess_period: f64,
    params: &SystemParams,
    mode: CorrectionMode,
) -> Result<(SpacecraftState, f64)> {
    params.validate()?;
    let tol = Tolerances::new(1e-13, 1e-14);
    let mut x0 = guess.0[0];
    let mut z0 = guess.0[2];
    let mut vy0 = guess.0[4];
    let mut half = 0.5 * guess_period;
    let mut residual = f64::INFINITY;

    for _ in 0..CORRECTION_MAX_ITERATIONS {
        let state = SpacecraftState::new(x0, 0.0, z0, 0.0, vy0, 0.0);
        let traj = propagate_with_stm(&state, params, 0.0, half, &tol)?;
        let end = traj.final_state();
        let s = Vector6::from_column_slice(&end.as_slice()[..6]);
        let phi = stm_from(end.as_slice());
        let g = Vector3::new(s[1], s[3], s[5]);
        residual = g.amax();
        if residual < CORRECTION_TOLERANCE {
            return Ok((state, 2.0 * half));
        }
        let f = field_raw(&s, params.mu)?;
        // rows y, vx, vz of the STM and of the field
        let rows = [1usize, 3, 5];
        let col = |c: usize| Vector3::new(phi[(rows[0], c)], phi[(rows[1], c)], phi[(rows[2], c)]);
        let time_col = Vector3::new(f[1], f[3], f[5]);
        let jac = match mode {
            CorrectionMode::FixedX => Matrix3::from_columns(&[col(2), col(4), time_col]),
            CorrectionMode::FixedZ => Matrix3::from_columns(&[col(0), col(4), time_col]),
            CorrectionMode::FixedPeriod => Matrix3::from_columns(&[col(0), col(2), col(4)]),
        };
        let step = jac
            .lu()
            .solve(&(-g))
            .ok_or_else(|| Error::CorrectionFailure {
                iterations: 0,
                residual,
            })?;
        // keep Newton steps local
        let scale = (0.05 / step.amax()).min(1.0);
        let step = step * scale;
        match mode {
            CorrectionMode::FixedX => {
                z0 += step[0];
                vy0 += step[1];
                half += step[2];
            }
            CorrectionMode::FixedZ => {
                x0 += step[0];
                vy0 += step[1];
                half += step[2];
            }
            CorrectionMode::FixedPeriod => {
                x0 += step[0];
                z0 += step[1];
                vy0 += step[2];
            }
        }
        if !(half > 0.0) {
            return Err(Error::CorrectionFailure {
                iterations: 0,
                residual,
            });
        }
    }
    Err(Error::CorrectionFailure {
        iterations: CORRECTION_MAX_ITERATIONS,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    Stable,
    Unstable,
}

/// Monodromy matrix, its hyperbolic eigenpair and the dense state
/// transition matrix over one period.
#[derive(Debug, Clone)]
pub struct ManifoldData {
    period: f64,
    monodromy: Matrix6<f64>,
    eigenvalues: Vec<Complex<f64>>,
    unstable_eigenvalue: f64,
    stable_eigenvalue: f64,
    e_u0: Vector6<f64>,
    e_s0: Vector6<f64>,
    stm: Option<DenseTrajectory>,
}

fn normalize_sign(mut v: Vector6<f64>) -> Vector6<f64> {
    v /= v.norm();
    if let Some(first) = v.iter().find(|c| c.abs() > 1e-8) {
        if *first < 0.0 {
            v = -v;
        }
    }
    v
}

/// Unit eigenvector of a real eigenvalue via the smallest singular vector
/// of `M - lambda I`.
fn real_eigenvector(m: &Matrix6<f64>, lambda: f64) -> Vector6<f64> {
    let shifted = m - Matrix6::identity() * lambda;
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (imin, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc },
            );
    let mut v: Vector6<f64> = v_t.row(imin).transpose();
    // a few inverse-iteration sweeps sharpen the direction
    let perturbed = m - Matrix6::identity() * (lambda * (1.0 + 1e-10));
    if let Some(lu) = Some(perturbed.lu()) {
        for _ in 0..3 {
            if let Some(next) = lu.solve(&v) {
                let n = next.norm();
                if n.is_finite() && n > 0.0 {
                    v = next / n;
                }
            }
        }
    }
    v
}

impl ManifoldData {
    /// Eigen-analysis of a monodromy matrix without time evolution data.
    pub fn from_monodromy(monodromy: Matrix6<f64>, period: f64) -> Result<Self> {
        let eigenvalues: Vec<Complex<f64>> =
            monodromy.complex_eigenvalues().iter().copied().collect();
        let threshold = 1.0 + 1e-6;
        let mut best: Option<f64> = None;
        for ev in &eigenvalues {
            let real = ev.im.abs() <= 1e-9 * ev.norm().max(1.0);
            if real && ev.re.abs() > threshold && best.map_or(true, |b| ev.re.abs() > b.abs()) {
                best = Some(ev.re);
            }
        }
        let largest_complex = eigenvalues
            .iter()
            .filter(|e| e.im.abs() > 1e-9 * e.norm().max(1.0) && e.norm() > threshold)
            .map(|e| e.norm())
            .fold(0.0, f64::max);
        let lambda_u = match best {
            Some(l) if l.abs() >= largest_complex => l,
            Some(_) => {
                return Err(Error::OrbitStability(
                    "dominant unstable eigenvalues form a complex pair".into(),
                ))
            }
            None => {
                return Err(Error::OrbitStability(format!(
                    "no real eigenvalue with magnitude above {threshold}"
                )))
            }
        };
        // reciprocal partner: closest real eigenvalue to 1/lambda_u
        let target = 1.0 / lambda_u;
        let lambda_s = eigenvalues
            .iter()
            .filter(|e| e.im.abs() <= 1e-9 * e.norm().max(1.0))
            .map(|e| e.re)
            .min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()))
            .unwrap_or(target);
        let e_u0 = normalize_sign(real_eigenvector(&monodromy, lambda_u));
        let e_s0 = normalize_sign(real_eigenvector(&monodromy, lambda_s));
        Ok(Self {
            period,
            monodromy,
            eigenvalues,
            unstable_eigenvalue: lambda_u,
            stable_eigenvalue: lambda_s,
            e_u0,
            e_s0,
            stm: None,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn monodromy(&self) -> &Matrix6<f64> {
        &self.monodromy
    }

    pub fn eigenvalues(&self) -> &[Complex<f64>] {
        &self.eigenvalues
    }

    pub fn unstable_eigenvalue(&self) -> f64 {
        self.unstable_eigenvalue
    }

    pub fn stable_eigenvalue(&self) -> f64 {
        self.stable_eigenvalue
    }

    pub fn e_u0(&self) -> &Vector6<f64> {
        &self.e_u0
    }

    pub fn e_s0(&self) -> &Vector6<f64> {
        &self.e_s0
    }

    /// State transition matrix `Phi(t, 0)` for `t` in `[0, T]`.
    pub fn stm(&self, t: f64) -> Matrix6<f64> {
        match &self.stm {
            Some(traj) => {
                let mut buf = [0.0; 42];
                traj.eval_into(t, &mut buf);
                stm_from(&buf)
            }
            None => Matrix6::identity(),
        }
    }

    /// Unit stable/unstable direction at phase `t`, extended beyond one
    /// period through the eigenvalue: `Phi(s + kT, 0) e0 = lambda^k Phi(s, 0) e0`.
    pub fn direction(&self, which: ManifoldKind, t: f64) -> Vector6<f64> {
        let (e0, lambda) = match which {
            ManifoldKind::Stable => (&self.e_s0, self.stable_eigenvalue),
            ManifoldKind::Unstable => (&self.e_u0, self.unstable_eigenvalue),
        };
        let k = (t / self.period).floor();
        let s = (t - k * self.period).clamp(0.0, self.period);
        if s == 0.0 && k == 0.0 {
            return *e0;
        }
        let v = self.stm(s) * e0;
        let v = v / v.norm();
        // lambda^k only contributes its sign after normalization
        let odd = (k.abs() as i64) % 2 == 1;
        if lambda < 0.0 && odd {
            -v
        } else {
            v
        }
    }

    /// Rank-one projector `e_u(t) e_u(t)^T` onto the unstable direction.
    pub fn unstable_projector(&self, t: f64) -> Matrix6<f64> {
        let e = self.direction(ManifoldKind::Unstable, t);
        e * e.transpose()
    }
}

/// Integrates the variational equations over one period and extracts the
/// hyperbolic eigenpair of the monodromy matrix.
pub fn monodromy(orbit: &PeriodicOrbit, tol: &Tolerances) -> Result<ManifoldData> {
    let traj = propagate_with_stm(
        orbit.initial_state(),
        orbit.params(),
        0.0,
        orbit.period(),
        tol,
    )?;
    let phi_t = stm_from(traj.final_state().as_slice());
    let mut data = ManifoldData::from_monodromy(phi_t, orbit.period())?;
    data.stm = Some(traj);
    Ok(data)
}

/// Free-function form of [`ManifoldData::direction`].
pub fn manifold_direction(data: &ManifoldData, which: ManifoldKind, t: f64) -> Vector6<f64> {
    data.direction(which, t)
}

/// Free-function form of [`ManifoldData::unstable_projector`].
pub fn unstable_projector(data: &ManifoldData, t: f64) -> Matrix6<f64> {
    data.unstable_projector(t)
}

/// Secant continuation along the fixed-z family until the corrected
/// period matches `target_period`.
pub fn correct_to_period(
    seed: &SpacecraftState,
    seed_period: f64,
    target_period: f64,
    params: &SystemParams,
) -> Result<(SpacecraftState, f64)> {
    if !(target_period > 0.0) {
        return Err(Error::Parameter(format!(
            "target period must be positive, got {target_period}"
        )));
    }
    let (mut sa, mut ta) = differential_correct(seed, seed_period, params, CorrectionMode::FixedZ)?;
    if (ta - target_period).abs() < 1e-12 {
        return Ok((sa, ta));
    }
    let mut guess = sa.clone();
    guess.0[2] *= 1.0 + 0.01 * (target_period - ta).signum() * -sa.0[2].signum();
    let (mut sb, mut tb) = differential_correct(&guess, ta, params, CorrectionMode::FixedZ)?;
    for _ in 0..40 {
        if (tb - target_period).abs() < 1e-11 {
            return Ok((sb, tb));
        }
        let dz = (target_period - tb) * (sb.0[2] - sa.0[2]) / (tb - ta);
        if !dz.is_finite() || dz.abs() < 1e-15 {
            return Ok((sb, tb));
        }
        let mut guess = sb.clone();
        guess.0[2] += dz.clamp(-0.01, 0.01);
        let (sn, tn) = differential_correct(&guess, tb, params, CorrectionMode::FixedZ)?;
        sa = sb;
        ta = tb;
        sb = sn;
        tb = tn;
    }
    Err(Error::CorrectionFailure {
        iterations: 40,
        residual: (tb - target_period).abs(),
    })
}

/// Period of the reference near-rectilinear halo orbit (about 6.4 days).
pub const NRHO_PERIOD_ND: f64 = 1.466695;

/// Corrects [`nrho_seed`] onto the southern halo with [`NRHO_PERIOD_ND`]
/// and loads it.
pub fn southern_nrho(params: &SystemParams, tol: &Tolerances) -> Result<PeriodicOrbit> {
    let (state, _) = correct_to_period(&nrho_seed(), 1.5, NRHO_PERIOD_ND, params)?;
    PeriodicOrbit::load(state, NRHO_PERIOD_ND, params, tol)
}

/// Southern L2 near-rectilinear halo orbit seed (apolune crossing) for the
/// Earth-Moon system. Good starting point for [`differential_correct`].
pub fn nrho_seed() -> SpacecraftState {
    SpacecraftState::new(1.0221, 0.0, -0.1821, 0.0, -0.1033, 0.0)
}
