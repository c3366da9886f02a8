//! Normalized CR3BP vector field, its Jacobian and equilibrium points.
//!
//! Coordinates are barycentric and rotating with the primaries: the larger
//! primary sits at `(-mu, 0, 0)` and the smaller at `(1 - mu, 0, 0)`.

use nalgebra::{DVector, Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{self, DenseTrajectory, Tolerances};

/// Closest allowed approach to either primary, in normalized distance.
pub const SINGULARITY_GUARD: f64 = 1e-6;

/// Physical scaling of a primary/secondary system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub mu: f64,
    /// Kilometres per normalized distance unit.
    pub length_unit_km: f64,
    /// Seconds per normalized time unit.
    pub time_unit_s: f64,
    #[serde(default)]
    pub name: String,
}

impl SystemParams {
    pub fn new(
        mu: f64,
        length_unit_km: f64,
        time_unit_s: f64,
        name: impl Into<String>,
    ) -> Result<Self> {
        let p = Self {
            mu,
            length_unit_km,
            time_unit_s,
            name: name.into(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn earth_moon() -> Self {
        Self {
            mu: 0.012_150_585_6,
            length_unit_km: 384_400.0,
            time_unit_s: 375_190.0,
            name: "earth-moon".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 0.5) && self.mu != 0.5 {
            return Err(Error::Parameter(format!(
                "mass ratio {} outside (0, 0.5]",
                self.mu
            )));
        }
        if !(self.length_unit_km > 0.0 && self.length_unit_km.is_finite()) {
            return Err(Error::Parameter("length unit must be positive".into()));
        }
        if !(self.time_unit_s > 0.0 && self.time_unit_s.is_finite()) {
            return Err(Error::Parameter("time unit must be positive".into()));
        }
        Ok(())
    }

    /// Normalized acceleration produced by 1 N acting on 1 kg: TU^2 / LU[m].
    pub fn thrust_scale(&self) -> f64 {
        self.time_unit_s * self.time_unit_s / (self.length_unit_km * 1000.0)
    }

    pub fn km_to_nd(&self, km: f64) -> f64 {
        km / self.length_unit_km
    }

    pub fn nd_to_km(&self, nd: f64) -> f64 {
        nd * self.length_unit_km
    }

    pub fn nd_to_days(&self, t: f64) -> f64 {
        t * self.time_unit_s / 86_400.0
    }

    pub fn days_to_nd(&self, days: f64) -> f64 {
        days * 86_400.0 / self.time_unit_s
    }

    pub fn larger_primary(&self) -> Vector3<f64> {
        Vector3::new(-self.mu, 0.0, 0.0)
    }

    pub fn smaller_primary(&self) -> Vector3<f64> {
        Vector3::new(1.0 - self.mu, 0.0, 0.0)
    }
}

impl Default for SystemParams {
    fn default() -> Self {
        Self::earth_moon()
    }
}

/// Position and velocity of one spacecraft, `[x, y, z, vx, vy, vz]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpacecraftState(pub Vector6<f64>);

impl SpacecraftState {
    pub fn new(x: f64, y: f64, z: f64, vx: f64, vy: f64, vz: f64) -> Self {
        Self(Vector6::new(x, y, z, vx, vy, vz))
    }

    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self::new(position.x, position.y, position.z, 0.0, 0.0, 0.0)
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self(Vector6::from_column_slice(&s[..6]))
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.0.as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Distances to the larger and smaller primary.
    pub fn primary_distances(&self, mu: f64) -> (f64, f64) {
        let v = &self.0;
        let r_e = ((v[0] + mu).powi(2) + v[1] * v[1] + v[2] * v[2]).sqrt();
        let r_m = ((v[0] - 1.0 + mu).powi(2) + v[1] * v[1] + v[2] * v[2]).sqrt();
        (r_e, r_m)
    }
}

impl From<Vector6<f64>> for SpacecraftState {
    fn from(v: Vector6<f64>) -> Self {
        Self(v)
    }
}

/// Thrust vector in newtons.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThrustInput(pub Vector3<f64>);

impl ThrustInput {
    pub fn new(ux: f64, uy: f64, uz: f64) -> Self {
        Self(Vector3::new(ux, uy, uz))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }
}

fn guarded_distances(state: &Vector6<f64>, mu: f64) -> Result<(f64, f64)> {
    if !state.iter().all(|v| v.is_finite()) {
        return Err(Error::Parameter("state has non-finite components".into()));
    }
    let (r_e, r_m) = SpacecraftState(*state).primary_distances(mu);
    let closest = r_e.min(r_m);
    if closest < SINGULARITY_GUARD {
        return Err(Error::SingularState { distance: closest });
    }
    Ok((r_e, r_m))
}

/// Gradient of the effective potential, i.e. the acceleration rows without
/// the Coriolis terms.
fn potential_gradient(state: &Vector6<f64>, mu: f64, r_e: f64, r_m: f64) -> Vector3<f64> {
    let (x, y, z) = (state[0], state[1], state[2]);
    let a = (1.0 - mu) / r_e.powi(3);
    let b = mu / r_m.powi(3);
    Vector3::new(
        x - a * (x + mu) - b * (x - 1.0 + mu),
        y - a * y - b * y,
        -a * z - b * z,
    )
}

/// Uncontrolled CR3BP vector field `f(x)`.
pub fn cr3bp_vector_field(state: &SpacecraftState, params: &SystemParams) -> Result<Vector6<f64>> {
    field_raw(&state.0, params.mu)
}

pub(crate) fn field_raw(s: &Vector6<f64>, mu: f64) -> Result<Vector6<f64>> {
    let (r_e, r_m) = guarded_distances(s, mu)?;
    let g = potential_gradient(s, mu, r_e, r_m);
    Ok(Vector6::new(
        s[3],
        s[4],
        s[5],
        2.0 * s[4] + g.x,
        -2.0 * s[3] + g.y,
        g.z,
    ))
}

/// `f(x) + B u` with thrust in newtons acting on a spacecraft of `mass_kg`.
pub fn controlled_vector_field(
    state: &SpacecraftState,
    thrust: &ThrustInput,
    mass_kg: f64,
    params: &SystemParams,
) -> Result<Vector6<f64>> {
    if !(mass_kg > 0.0 && mass_kg.is_finite()) {
        return Err(Error::Parameter(format!(
            "spacecraft mass must be positive, got {mass_kg}"
        )));
    }
    if !thrust.0.iter().all(|v| v.is_finite()) {
        return Err(Error::Parameter("thrust has non-finite components".into()));
    }
    let mut f = field_raw(&state.0, params.mu)?;
    let gain = params.thrust_scale() / mass_kg;
    for i in 0..3 {
        f[3 + i] += gain * thrust.0[i];
    }
    Ok(f)
}

/// Symmetric gravity-gradient block (second derivatives of the effective
/// potential).
pub(crate) fn gravity_gradient(s: &Vector6<f64>, mu: f64) -> Result<Matrix3<f64>> {
    let (r_e, r_m) = guarded_distances(s, mu)?;
    let (x, y, z) = (s[0], s[1], s[2]);
    let (xe, xm) = (x + mu, x - 1.0 + mu);
    let one_mu = 1.0 - mu;
    let re3 = r_e.powi(3);
    let rm3 = r_m.powi(3);
    let re5 = r_e.powi(5);
    let rm5 = r_m.powi(5);
    let common = -one_mu / re3 - mu / rm3;

    let uxx = 1.0 + common + 3.0 * one_mu * xe * xe / re5 + 3.0 * mu * xm * xm / rm5;
    let uyy = 1.0 + common + 3.0 * one_mu * y * y / re5 + 3.0 * mu * y * y / rm5;
    let uzz = common + 3.0 * one_mu * z * z / re5 + 3.0 * mu * z * z / rm5;
    let uxy = 3.0 * one_mu * xe * y / re5 + 3.0 * mu * xm * y / rm5;
    let uxz = 3.0 * one_mu * xe * z / re5 + 3.0 * mu * xm * z / rm5;
    let uyz = 3.0 * one_mu * y * z / re5 + 3.0 * mu * y * z / rm5;
    Ok(Matrix3::new(uxx, uxy, uxz, uxy, uyy, uyz, uxz, uyz, uzz))
}

/// Analytic Jacobian `df/dx` of the uncontrolled field.
pub fn cr3bp_jacobian(state: &SpacecraftState, params: &SystemParams) -> Result<Matrix6<f64>> {
    jacobian_raw(&state.0, params.mu)
}

pub(crate) fn jacobian_raw(s: &Vector6<f64>, mu: f64) -> Result<Matrix6<f64>> {
    let g = gravity_gradient(s, mu)?;
    let mut a = Matrix6::zeros();
    a.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&g);
    a[(3, 4)] = 2.0;
    a[(4, 3)] = -2.0;
    Ok(a)
}

/// Jacobi integral `C = x^2 + y^2 + 2(1-mu)/r_e + 2 mu/r_m - |v|^2`.
pub fn jacobi_constant(state: &SpacecraftState, params: &SystemParams) -> Result<f64> {
    let s = &state.0;
    let mu = params.mu;
    let (r_e, r_m) = guarded_distances(s, mu)?;
    let v2 = s[3] * s[3] + s[4] * s[4] + s[5] * s[5];
    Ok(s[0] * s[0] + s[1] * s[1] + 2.0 * (1.0 - mu) / r_e + 2.0 * mu / r_m - v2)
}

/// x-axis force balance whose roots are the collinear points.
fn collinear_balance(x: f64, mu: f64) -> f64 {
    let de = x + mu;
    let dm = x - 1.0 + mu;
    x - (1.0 - mu) * de / de.abs().powi(3) - mu * dm / dm.abs().powi(3)
}

fn bisect(mut lo: f64, mut hi: f64, mu: f64) -> Result<f64> {
    let mut f_lo = collinear_balance(lo, mu);
    let f_hi = collinear_balance(hi, mu);
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::Bracketing(format!("no sign change on [{lo}, {hi}]")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f_mid = collinear_balance(mid, mu);
        if f_mid == 0.0 || (hi - lo) < 1e-16 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Newton polish of a bracketed root, staying inside the bracket.
fn polish(x: f64, mu: f64) -> f64 {
    let mut x = x;
    for _ in 0..5 {
        let h = 1e-7 * x.abs().max(1e-3);
        let d = (collinear_balance(x + h, mu) - collinear_balance(x - h, mu)) / (2.0 * h);
        let f = collinear_balance(x, mu);
        if d == 0.0 || f == 0.0 {
            break;
        }
        let next = x - f / d;
        if (next - x).abs() > 1e-9 {
            break;
        }
        x = next;
    }
    x
}

/// The five equilibrium points L1..L5, in order.
pub fn lagrange_points(params: &SystemParams) -> Result<[Vector3<f64>; 5]> {
    params.validate()?;
    let mu = params.mu;
    let eps = 1e-9;
    let earth = -mu;
    let moon = 1.0 - mu;
    let l1 = polish(bisect(earth + eps, moon - eps, mu)?, mu);
    let l2 = polish(bisect(moon + eps, 2.0, mu)?, mu);
    let l3 = polish(bisect(-2.0, earth - eps, mu)?, mu);
    let x45 = 0.5 - mu;
    let y45 = 3f64.sqrt() / 2.0;
    Ok([
        Vector3::new(l1, 0.0, 0.0),
        Vector3::new(l2, 0.0, 0.0),
        Vector3::new(l3, 0.0, 0.0),
        Vector3::new(x45, y45, 0.0),
        Vector3::new(x45, -y45, 0.0),
    ])
}

/// Propagates one uncontrolled spacecraft.
pub fn propagate_state(
    state: &SpacecraftState,
    params: &SystemParams,
    t0: f64,
    tf: f64,
    tol: &Tolerances,
) -> Result<DenseTrajectory> {
    let mu = params.mu;
    ode::propagate(
        |_, y, dy| {
            let f = field_raw(&Vector6::from_column_slice(y), mu)?;
            dy.copy_from_slice(f.as_slice());
            Ok(())
        },
        &state.to_dvector(),
        t0,
        tf,
        tol,
    )
}
