//! Adaptive Runge-Kutta propagation with continuous (dense) output.
//!
//! The stepper is Verner's efficient 6(5) pair with a 5th order continuous
//! extension that needs one extra stage per accepted step. The last main
//! stage is evaluated at the propagated solution, so it doubles as the first
//! stage of the next step.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STAGES: usize = 9;
const DENSE_STAGES: usize = 10;
const DENSE_ORDER: usize = 6;

const A: [[f64; STAGES]; STAGES] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.6e-1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        1.923_996_296_296_296_2e-2,
        7.669_337_037_037_037e-2,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [0.35975e-1, 0.0, 0.107925, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        1.318_683_415_233_148_4,
        0.0,
        -5.042_058_063_628_562,
        4.220_674_648_395_414,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        -41.872_591_664_327_516,
        0.0,
        159.432_562_163_137_5,
        -122.119_213_565_010_03,
        5.531_743_066_200_054,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        -54.430_156_935_316_504,
        0.0,
        207.067_251_365_018_48,
        -158.610_813_784_59,
        6.991_816_585_950_242,
        -1.859_723_106_220_323_4e-2,
        0.0,
        0.0,
        0.0,
    ],
    [
        -54.663_741_787_281_98,
        0.0,
        207.952_806_255_389_36,
        -159.288_957_474_499_5,
        7.018_743_740_796_944,
        -1.833_878_590_504_572_2e-2,
        -5.119_484_997_882_099e-4,
        0.0,
        0.0,
    ],
    [
        3.438_957_868_357_036e-2,
        0.0,
        0.0,
        0.258_262_455_563_350_3,
        0.420_937_118_967_353_7,
        4.405_396_469_669_31,
        -176.483_119_024_298_65,
        172.364_133_401_415_07,
        0.0,
    ],
];

const B_HIGH: [f64; STAGES] = A[8];

const B_LOW: [f64; STAGES] = [
    4.909_967_648_382_49e-2,
    0.0,
    0.0,
    0.225_111_222_951_652_42,
    0.469_468_225_302_956_2,
    0.806_579_224_998_886_8,
    0.0,
    -0.607_119_489_177_796,
    5.686_113_944_047_569_6e-2,
];

const C: [f64; STAGES] = [
    0.0,
    0.6e-1,
    9.593_333_333_333_333e-2,
    0.1439,
    0.4973,
    0.9725,
    0.9995,
    1.0,
    1.0,
];

const A_DENSE: [f64; DENSE_STAGES] = [
    1.652_415_901_357_280_6e-2,
    0.0,
    0.0,
    0.305_312_818_751_417_9,
    0.207_120_093_820_197_9,
    -1.293_879_140_655_123,
    57.119_884_115_881_49,
    -55.879_792_075_109_32,
    2.483_002_829_776_601_4e-2,
    0.0,
];

const C_DENSE: f64 = 0.5;

const B_DENSE: [[f64; DENSE_ORDER]; DENSE_STAGES] = [
    [
        1.0,
        -5.308_169_607_103_577,
        10.181_680_448_958_68,
        -7.520_036_991_611_715,
        0.934_048_536_863_116_1,
        0.746_867_191_577_065,
    ],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        0.0,
        6.272_050_253_212_501,
        -16.026_181_474_677_46,
        12.844_356_324_519_618,
        -1.148_794_504_476_759_1,
        -1.683_168_143_014_549_8,
    ],
    [
        0.0,
        6.876_491_702_846_304,
        -24.635_767_260_846_333,
        33.210_786_483_797_17,
        -17.494_615_282_636_44,
        2.464_041_475_806_649_6,
    ],
    [
        0.0,
        -35.544_451_710_599_6,
        165.701_617_019_024_2,
        -385.463_539_549_114_3,
        442.432_413_701_570_17,
        -182.720_642_991_211_2,
    ],
    [
        0.0,
        1_918.654_856_698_011_4,
        -9_268.121_508_966_042,
        20_858.337_028_772_55,
        -22_645.827_671_584_81,
        8_960.474_176_055_992,
    ],
    [
        0.0,
        -1_883.069_802_132_718_2,
        9_101.025_187_200_634,
        -20_473.188_551_959_534,
        22_209.765_551_256_532,
        -8_782.168_250_963_5,
    ],
    [
        0.0,
        0.119_024_796_351_236_43,
        -0.125_026_967_050_393_76,
        1.779_956_919_394_999_1,
        -4.660_932_123_043_763,
        2.886_977_374_347_921,
    ],
    [0.0, -8.0, 32.0, -40.0, 16.0, 0.0],
];

/// Step-size control settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
    /// Upper bound on |h|; `f64::INFINITY` disables it (`null` in JSON).
    #[serde(with = "unbounded", default = "unbounded::none")]
    pub max_step: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    2_000_000
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn none() -> f64 {
        f64::INFINITY
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Tolerances {
    pub fn new(rel: f64, abs: f64) -> Self {
        Self {
            rel,
            abs,
            max_step: f64::INFINITY,
            max_steps: default_max_steps(),
        }
    }

    pub fn with_max_step(mut self, max_step: f64) -> Self {
        self.max_step = max_step;
        self
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Self::new(1e-10, 1e-12)
    }
}

/// Solution of an initial value problem, queryable anywhere inside its span.
///
/// Each accepted step keeps its start state and all stage derivatives, which
/// is exactly what the continuous extension needs.
#[derive(Debug, Clone)]
pub struct DenseTrajectory {
    dim: usize,
    t0: f64,
    tf: f64,
    /// Step start times in integration order.
    times: Vec<f64>,
    /// Signed step sizes.
    steps: Vec<f64>,
    /// Start state of each step, `dim` values each.
    states: Vec<f64>,
    /// Stage derivatives, `DENSE_STAGES * dim` values per step.
    stages: Vec<f64>,
    final_state: Vec<f64>,
    evaluations: usize,
}

impl DenseTrajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Lower and upper bound of the covered time interval.
    pub fn span(&self) -> (f64, f64) {
        (self.t0.min(self.tf), self.t0.max(self.tf))
    }

    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.states[..self.dim])
    }

    pub fn final_state(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.final_state)
    }

    /// Natural output points of the integrator (step boundaries), in
    /// integration order and including both endpoints.
    pub fn knots(&self) -> Vec<f64> {
        let mut out = self.times.clone();
        out.push(self.tf);
        out
    }

    fn locate(&self, t: f64) -> usize {
        let n = self.steps.len();
        let forward = self.tf >= self.t0;
        // first index whose start time is past t, minus one
        let idx = self
            .times
            .partition_point(|&ti| if forward { ti <= t } else { ti >= t });
        idx.saturating_sub(1).min(n - 1)
    }

    /// State at `t`. Times outside the span are clamped to the nearest end.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        self.eval_into(t, out.as_mut_slice());
        out
    }

    /// Allocation-free variant of [`DenseTrajectory::eval`].
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let (lo, hi) = self.span();
        let t = t.clamp(lo, hi);
        if t == self.tf {
            out.copy_from_slice(&self.final_state);
            return;
        }
        let i = self.locate(t);
        let h = self.steps[i];
        let s = ((t - self.times[i]) / h).clamp(0.0, 1.0);
        let mut weights = [0.0; DENSE_STAGES];
        for (w, row) in weights.iter_mut().zip(B_DENSE.iter()) {
            let mut acc = row[DENSE_ORDER - 1];
            for j in (0..DENSE_ORDER - 1).rev() {
                acc = acc * s + row[j];
            }
            *w = acc * s * h;
        }
        let d = self.dim;
        out.copy_from_slice(&self.states[i * d..(i + 1) * d]);
        let base = i * DENSE_STAGES * d;
        for (j, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let k = &self.stages[base + j * d..base + (j + 1) * d];
            for (o, kv) in out.iter_mut().zip(k) {
                *o += w * kv;
            }
        }
    }

    /// `n` uniformly spaced samples over the span, endpoints included.
    pub fn sample_uniform(&self, n: usize) -> Vec<(f64, DVector<f64>)> {
        let n = n.max(2);
        (0..n)
            .map(|i| {
                let t = self.t0 + (self.tf - self.t0) * i as f64 / (n - 1) as f64;
                (t, self.eval(t))
            })
            .collect()
    }
}

fn axpy(out: &mut [f64], base: &[f64], h: f64, coeffs: &[f64], k: &[Vec<f64>]) {
    out.copy_from_slice(base);
    for (c, kj) in coeffs.iter().zip(k) {
        if *c == 0.0 {
            continue;
        }
        let w = c * h;
        for (o, v) in out.iter_mut().zip(kj) {
            *o += w * v;
        }
    }
}

/// Integrates `dy/dt = field(t, y)` from `t0` to `tf` (either direction).
///
/// The field writes the derivative into its third argument. Any error it
/// returns aborts the integration unchanged. Step-size underflow or a
/// non-finite state is reported as [`Error::BlowUp`] carrying the time
/// reached.
pub fn propagate<F>(
    mut field: F,
    initial: &DVector<f64>,
    t0: f64,
    tf: f64,
    tol: &Tolerances,
) -> Result<DenseTrajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if tf == t0 || !tf.is_finite() || !t0.is_finite() {
        return Err(Error::Parameter(format!(
            "empty or invalid time span [{t0}, {tf}]"
        )));
    }
    if !(tol.rel > 0.0 && tol.abs > 0.0) {
        return Err(Error::Parameter("tolerances must be positive".into()));
    }
    let dim = initial.len();
    let dir = (tf - t0).signum();
    let span = (tf - t0).abs();

    let mut y: Vec<f64> = initial.as_slice().to_vec();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("initial state is not finite".into()));
    }
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; dim]; DENSE_STAGES];
    let mut stage = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];
    let mut evaluations = 0usize;

    field(t0, &y, &mut k[0])?;
    evaluations += 1;

    let mut h = initial_step(&mut field, t0, &y, &k[0], dir, span, tol, &mut evaluations)?;

    let mut traj = DenseTrajectory {
        dim,
        t0,
        tf,
        times: Vec::new(),
        steps: Vec::new(),
        states: Vec::new(),
        stages: Vec::new(),
        final_state: Vec::new(),
        evaluations: 0,
    };

    let mut t = t0;
    let mut rejected_in_row = 0usize;
    let mut accepted = 0usize;
    loop {
        let remaining = (tf - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        let mut last = false;
        if h.abs() >= remaining {
            h = remaining * dir;
            last = true;
        } else if h.abs() > 0.5 * remaining && h.abs() < remaining {
            // avoid leaving a sliver for the final step
            h = 0.5 * remaining * dir;
        }
        if h.abs() <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::BlowUp {
                t,
                reason: "step size underflow".into(),
            });
        }
        if accepted >= tol.max_steps {
            return Err(Error::BlowUp {
                t,
                reason: format!("exceeded {} steps", tol.max_steps),
            });
        }

        for i in 1..STAGES {
            axpy(&mut stage, &y, h, &A[i][..i], &k[..i]);
            let (head, tail) = k.split_at_mut(i);
            let _ = head;
            field(t + C[i] * h, &stage, &mut tail[0])?;
            evaluations += 1;
        }
        // stage 9 sits at the propagated solution
        y_new.copy_from_slice(&stage);

        let mut err = 0.0f64;
        for r in 0..dim {
            let mut e = 0.0;
            for j in 0..STAGES {
                e += (B_HIGH[j] - B_LOW[j]) * k[j][r];
            }
            let scale = tol.abs + tol.rel * y[r].abs().max(y_new[r].abs());
            let ratio = (e * h / scale).abs();
            err = if ratio.is_nan() {
                f64::INFINITY
            } else {
                err.max(ratio)
            };
        }
        let finite = y_new.iter().all(|v| v.is_finite());
        if !finite {
            err = f64::INFINITY;
        }

        if err <= 1.0 {
            // continuous extension stage
            axpy(&mut stage, &y, h, &A_DENSE[..STAGES], &k[..STAGES]);
            field(t + C_DENSE * h, &stage, &mut k[STAGES])?;
            evaluations += 1;

            traj.times.push(t);
            traj.steps.push(h);
            traj.states.extend_from_slice(&y);
            for kj in &k {
                traj.stages.extend_from_slice(kj);
            }
            accepted += 1;
            rejected_in_row = 0;

            t = if last { tf } else { t + h };
            std::mem::swap(&mut y, &mut y_new);
            // first-same-as-last
            let (first, rest) = k.split_at_mut(1);
            first[0].copy_from_slice(&rest[STAGES - 2]);

            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-1.0 / 6.0)).clamp(0.2, 5.0)
            };
            h *= factor;
        } else {
            rejected_in_row += 1;
            if rejected_in_row > 60 {
                return Err(Error::BlowUp {
                    t,
                    reason: "repeated step rejection".into(),
                });
            }
            let factor = if err.is_finite() {
                (0.9 * err.powf(-1.0 / 6.0)).clamp(0.1, 0.9)
            } else {
                0.25
            };
            h *= factor;
        }
        if h.abs() > tol.max_step {
            h = tol.max_step * dir;
        }
    }

    traj.final_state = y;
    traj.evaluations = evaluations;
    Ok(traj)
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    field: &mut F,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    dir: f64,
    span: f64,
    tol: &Tolerances,
    evaluations: &mut usize,
) -> Result<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let dim = y0.len();
    let scale: Vec<f64> = y0.iter().map(|v| tol.abs + tol.rel * v.abs()).collect();
    let rms = |v: &[f64]| -> f64 {
        (v.iter()
            .zip(&scale)
            .map(|(a, s)| (a / s).powi(2))
            .sum::<f64>()
            / dim.max(1) as f64)
            .sqrt()
    };
    let d0 = rms(y0);
    let d1 = rms(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span).min(tol.max_step);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + dir * h0 * f).collect();
    let mut f1 = vec![0.0; dim];
    field(t0 + dir * h0, &y1, &mut f1)?;
    *evaluations += 1;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 6.0)
    };
    Ok(dir * (100.0 * h0).min(h1).min(span).min(tol.max_step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harmonic(_t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        dy[0] = y[1];
        dy[1] = -y[0];
        Ok(())
    }

    #[test]
    fn constant_derivative_is_exact() {
        let d = [0.5, -2.0, 3.0];
        let y0 = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let traj = propagate(
            |_, _, dy: &mut [f64]| {
                dy.copy_from_slice(&d);
                Ok(())
            },
            &y0,
            0.0,
            1.0,
            &Tolerances::new(1e-10, 1e-10),
        )
        .unwrap();
        let yf = traj.final_state();
        for i in 0..3 {
            assert!((yf[i] - (y0[i] + d[i])).abs() < 1e-10);
        }
        let mid = traj.eval(0.37);
        for i in 0..3 {
            assert!((mid[i] - (y0[i] + 0.37 * d[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn harmonic_oscillator_accuracy_and_dense_output() {
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let traj = propagate(harmonic, &y0, 0.0, 10.0, &Tolerances::new(1e-12, 1e-12)).unwrap();
        let yf = traj.final_state();
        assert!((yf[0] - 10f64.cos()).abs() < 1e-10);
        assert!((yf[1] + 10f64.sin()).abs() < 1e-10);
        for i in 0..200 {
            let t = 10.0 * i as f64 / 199.0 + 0.013;
            let t = t.min(10.0);
            let y = traj.eval(t);
            assert!((y[0] - t.cos()).abs() < 1e-9, "t={t}");
            assert!((y[1] + t.sin()).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn backward_integration_and_round_trip() {
        let y0 = DVector::from_vec(vec![0.3, -0.7]);
        let tol = Tolerances::new(1e-12, 1e-12);
        let fwd = propagate(harmonic, &y0, 0.0, 3.0, &tol).unwrap();
        let back = propagate(harmonic, &fwd.final_state(), 3.0, 0.0, &tol).unwrap();
        let y = back.final_state();
        assert!((y[0] - 0.3).abs() < 1e-11);
        assert!((y[1] + 0.7).abs() < 1e-11);
        // dense output of the backward solution agrees with the forward one
        let a = fwd.eval(1.234);
        let b = back.eval(1.234);
        assert!((a - b).norm() < 1e-10);
    }

    #[test]
    fn fixed_step_convergence_order_is_at_least_five() {
        // force fixed steps via loose tolerance and max_step, compare errors
        let run = |h: f64| {
            let tol = Tolerances {
                rel: 1.0,
                abs: 1.0,
                max_step: h,
                max_steps: 1_000_000,
            };
            let traj =
                propagate(harmonic, &DVector::from_vec(vec![1.0, 0.0]), 0.0, 8.0, &tol).unwrap();
            (traj.final_state()[0] - 8f64.cos()).abs()
        };
        let e1 = run(1.0);
        let e2 = run(0.5);
        let order = (e1 / e2).log2();
        assert!(order > 5.5, "observed order {order} ({e1:e} vs {e2:e})");
    }

    #[test]
    fn dense_output_order() {
        // interpolation error inside a single large step
        let tol = Tolerances {
            rel: 1.0,
            abs: 1.0,
            max_step: 0.4,
            max_steps: 100,
        };
        let err = |h: f64| {
            let tol = Tolerances { max_step: h, ..tol };
            let traj =
                propagate(harmonic, &DVector::from_vec(vec![1.0, 0.0]), 0.0, h, &tol).unwrap();
            let t = 0.37 * h;
            (traj.eval(t)[0] - t.cos()).abs()
        };
        let order = (err(0.4) / err(0.2)).log2();
        assert!(order > 5.0, "dense local order {order}");
    }

    #[test]
    fn rejects_empty_span_and_bad_tolerances() {
        let y0 = DVector::from_vec(vec![1.0]);
        let f = |_: f64, _: &[f64], dy: &mut [f64]| {
            dy[0] = 0.0;
            Ok(())
        };
        assert!(propagate(f, &y0, 1.0, 1.0, &Tolerances::default()).is_err());
        assert!(propagate(f, &y0, 0.0, 1.0, &Tolerances::new(0.0, 1e-9)).is_err());
    }

    #[test]
    fn finite_time_escape_reports_blow_up() {
        // y' = y^2, y(0) = 1 escapes at t = 1
        let f = |_: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[0] * y[0];
            Ok(())
        };
        let err = propagate(
            f,
            &DVector::from_vec(vec![1.0]),
            0.0,
            2.0,
            &Tolerances::default(),
        )
        .unwrap_err();
        match err {
            Error::BlowUp { t, .. } => assert!(t > 0.9 && t <= 1.0 + 1e-9, "t = {t}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
