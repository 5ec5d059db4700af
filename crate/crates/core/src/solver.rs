//! Time integrators for `y' = f(t, y)`.
//!
//! * [`Method::Rk4`]: classical fixed-step Runge–Kutta.
//! * [`Method::Dopri5`]: adaptive Dormand–Prince 5(4).
//! * [`Method::Radau5`]: three-stage Radau IIA (order 5), implicit and
//!   L-stable, with simplified Newton iterations on a finite-difference
//!   Jacobian. Adaptive or fixed step.
//! * [`Method::Split`]: placeholder for systems that supply their own
//!   step through [`OdeSystem::split_step`].
//!
//! The driver integrates between consecutive stop times, landing exactly on
//! each one. Stops mark output samples and discontinuities of the forcing.
//! Between two stops the system sees a constant `segment` time so that
//! piecewise forcing is evaluated from the correct side.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, SolverError};

/// Right-hand side provider.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    /// Evaluates `dy = f(t, y)`. `segment` is a time strictly inside the
    /// current inter-stop interval, used to select piecewise forcing.
    fn rhs(&self, t: f64, segment: f64, y: &[f64], dy: &mut [f64]) -> Result<(), ModelError>;

    /// Components with index `>= quadrature_start()` are running integrals
    /// that never feed back into `f`. They are excluded from error control.
    fn quadrature_start(&self) -> usize {
        self.dim()
    }

    /// One step of a problem-specific splitting scheme.
    fn split_step(&self, _t: f64, _segment: f64, _y: &mut [f64], _h: f64) -> Result<(), ModelError> {
        Err(ModelError::Unsupported("splitting integrator"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk4,
    Dopri5,
    Radau5,
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub method: Method,
    /// Fixed step, or initial step of an adaptive run (s).
    pub step: f64,
    /// Radau5 only: control the step from the embedded error estimate.
    #[serde(default = "default_true")]
    pub adaptive: bool,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    /// Absolute tolerance per component; the system's defaults fill in
    /// when empty.
    #[serde(default)]
    pub atol: Vec<f64>,
    #[serde(default = "default_h_min")]
    pub h_min: f64,
    /// Upper bound on adaptive steps (s); zero means unbounded.
    #[serde(default)]
    pub h_max: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_true() -> bool {
    true
}
fn default_rtol() -> f64 {
    1e-8
}
fn default_h_min() -> f64 {
    1e-14
}
fn default_max_steps() -> usize {
    50_000_000
}

impl SolverSettings {
    pub fn fixed(method: Method, step: f64) -> Self {
        Self {
            method,
            step,
            adaptive: false,
            rtol: default_rtol(),
            atol: Vec::new(),
            h_min: default_h_min(),
            h_max: 0.0,
            max_steps: default_max_steps(),
        }
    }

    pub fn adaptive(method: Method, rtol: f64, atol: Vec<f64>) -> Self {
        Self {
            method,
            step: 1e-6,
            adaptive: true,
            rtol,
            atol,
            h_min: default_h_min(),
            h_max: 0.0,
            max_steps: default_max_steps(),
        }
    }

    pub fn is_fixed_step(&self) -> bool {
        match self.method {
            Method::Rk4 | Method::Split => true,
            Method::Dopri5 => false,
            Method::Radau5 => !self.adaptive,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::Settings(m.to_string()));
        if !(self.step.is_finite() && self.step > 0.0) {
            return bad("step must be positive");
        }
        if !self.is_fixed_step() {
            if !(self.rtol.is_finite() && self.rtol > 0.0) {
                return bad("rtol must be positive");
            }
            if self.atol.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                return bad("atol entries must be positive");
            }
        }
        if !(self.h_min >= 0.0 && self.h_max >= 0.0) {
            return bad("step bounds must be non-negative");
        }
        Ok(())
    }
}

/// A point where integration must land exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stop {
    pub t: f64,
    /// Forcing is discontinuous here; adaptive methods restart their
    /// history.
    pub discontinuity: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    pub jacobians: usize,
    pub factorizations: usize,
}

/// Integrates from `(t0, y)` through every stop in order, calling `on_stop`
/// with the stop index after landing on it. The callback may modify
/// quadrature components (to reset them).
pub fn integrate<S, F>(
    sys: &S,
    settings: &SolverSettings,
    t0: f64,
    y: &mut [f64],
    stops: &[Stop],
    mut on_stop: F,
) -> Result<SolverStats, SolverError>
where
    S: OdeSystem,
    F: FnMut(usize, f64, &mut [f64]) -> Result<(), SolverError>,
{
    settings.validate()?;
    if y.len() != sys.dim() {
        return Err(SolverError::Settings(format!("state has {} entries, system {}", y.len(), sys.dim())));
    }
    let mut stepper: Box<dyn Stepper<S>> = match settings.method {
        Method::Rk4 => Box::new(Rk4::new(sys.dim())),
        Method::Split => Box::new(SplitStepper),
        Method::Dopri5 => Box::new(Dopri5::new(sys, settings)),
        Method::Radau5 => Box::new(Radau5::new(sys, settings)),
    };
    let fixed = settings.is_fixed_step();
    let mut stats = SolverStats::default();
    let mut t = t0;
    let mut h_prop = settings.step;
    let mut fresh = true;
    for (k, stop) in stops.iter().enumerate() {
        if stop.t < t {
            return Err(SolverError::Settings(format!("stop {} at {} precedes {}", k, stop.t, t)));
        }
        let seg_start = t;
        let span = stop.t - t;
        let segment = t + 0.5 * span;
        if span > 0.0 {
            if fixed {
                let m = ((span / settings.step).round() as usize).max(1);
                let h = span / m as f64;
                for i in 0..m {
                    let ti = seg_start + i as f64 * h;
                    stepper.step(sys, ti, segment, y, h, &mut stats)?;
                    stats.accepted += 1;
                    if stats.accepted > settings.max_steps {
                        return Err(SolverError::TooManySteps { t: ti, max_steps: settings.max_steps });
                    }
                    check_finite(y, ti + h)?;
                }
                t = stop.t;
            } else {
                while t < stop.t {
                    let remaining = stop.t - t;
                    let mut h = h_prop;
                    if settings.h_max > 0.0 {
                        h = h.min(settings.h_max);
                    }
                    let landing = h >= remaining * (1.0 - 1e-10) || remaining - h < settings.h_min;
                    if landing {
                        h = remaining;
                    }
                    if h < settings.h_min && !landing {
                        return Err(SolverError::StepUnderflow { t, h });
                    }
                    let outcome = match stepper.attempt(sys, t, segment, y, h, fresh, &mut stats) {
                        // A trial stage outside the model's domain rejects the
                        // step; only a step that cannot shrink further fails.
                        Err(e) if e.is_validity() && 0.25 * h >= settings.h_min => {
                            stepper.reset();
                            fresh = true;
                            Attempt::Rejected { h_next: 0.25 * h }
                        }
                        other => other?,
                    };
                    match outcome {
                        Attempt::Accepted { h_next } => {
                            stats.accepted += 1;
                            fresh = false;
                            t = if landing { stop.t } else { t + h };
                            check_finite(y, t)?;
                            if !landing || h_next < h_prop {
                                h_prop = h_next;
                            } else {
                                h_prop = h_prop.max(h_next);
                            }
                        }
                        Attempt::Rejected { h_next } => {
                            stats.rejected += 1;
                            if h_next < settings.h_min {
                                return Err(SolverError::StepUnderflow { t, h: h_next });
                            }
                            h_prop = h_next;
                        }
                    }
                    if stats.accepted + stats.rejected > settings.max_steps {
                        return Err(SolverError::TooManySteps { t, max_steps: settings.max_steps });
                    }
                }
            }
        }
        on_stop(k, stop.t, y)?;
        if stop.discontinuity {
            fresh = true;
            stepper.reset();
        }
    }
    Ok(stats)
}

fn check_finite(y: &[f64], t: f64) -> Result<(), SolverError> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SolverError::NonFinite { t })
    }
}

fn eval<S: OdeSystem>(
    sys: &S,
    t: f64,
    segment: f64,
    y: &[f64],
    dy: &mut [f64],
    stats: &mut SolverStats,
) -> Result<(), SolverError> {
    stats.rhs_evals += 1;
    sys.rhs(t, segment, y, dy).map_err(|source| SolverError::Validity { t, source })
}

enum Attempt {
    Accepted { h_next: f64 },
    Rejected { h_next: f64 },
}

trait Stepper<S: OdeSystem> {
    /// Fixed step of exactly `h`.
    fn step(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &mut [f64],
        h: f64,
        stats: &mut SolverStats,
    ) -> Result<(), SolverError>;

    /// Adaptive attempt; on acceptance `y` holds the new state.
    #[allow(clippy::too_many_arguments)]
    fn attempt(
        &mut self,
        _sys: &S,
        _t: f64,
        _segment: f64,
        _y: &mut [f64],
        _h: f64,
        _fresh: bool,
        _stats: &mut SolverStats,
    ) -> Result<Attempt, SolverError> {
        Err(SolverError::Settings("method is fixed-step".into()))
    }

    fn reset(&mut self) {}
}

struct SplitStepper;

impl<S: OdeSystem> Stepper<S> for SplitStepper {
    fn step(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &mut [f64],
        h: f64,
        stats: &mut SolverStats,
    ) -> Result<(), SolverError> {
        stats.rhs_evals += 1;
        sys.split_step(t, segment, y, h).map_err(|source| SolverError::Validity { t, source })
    }
}

struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n] }
    }
}

impl<S: OdeSystem> Stepper<S> for Rk4 {
    fn step(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &mut [f64],
        h: f64,
        stats: &mut SolverStats,
    ) -> Result<(), SolverError> {
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        eval(sys, t, segment, y, k1, stats)?;
        for i in 0..y.len() {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        eval(sys, t + 0.5 * h, segment, tmp, k2, stats)?;
        for i in 0..y.len() {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        eval(sys, t + 0.5 * h, segment, tmp, k3, stats)?;
        for i in 0..y.len() {
            tmp[i] = y[i] + h * k3[i];
        }
        eval(sys, t + h, segment, tmp, k4, stats)?;
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        Ok(())
    }
}

fn error_weights(y0: &[f64], y1: &[f64], rtol: f64, atol: &[f64], out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] = atol[i] + rtol * y0[i].abs().max(y1[i].abs());
    }
}

fn rms(v: &[f64], w: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let s: f64 = (0..n).map(|i| (v[i] / w[i]).powi(2)).sum();
    (s / n as f64).sqrt()
}

fn resolve_atol(settings: &SolverSettings, n: usize) -> Vec<f64> {
    match settings.atol.len() {
        0 => vec![settings.rtol; n],
        1 => vec![settings.atol[0]; n],
        _ => {
            let mut a = settings.atol.clone();
            a.resize(n, *settings.atol.last().unwrap_or(&settings.rtol));
            a
        }
    }
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct Dopri5 {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    err: Vec<f64>,
    w: Vec<f64>,
    atol: Vec<f64>,
    rtol: f64,
    n_ctrl: usize,
    fsal_valid: bool,
    err_prev: f64,
}

impl Dopri5 {
    fn new<S: OdeSystem>(sys: &S, settings: &SolverSettings) -> Self {
        let n = sys.dim();
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            err: vec![0.0; n],
            w: vec![0.0; n],
            atol: resolve_atol(settings, n),
            rtol: settings.rtol,
            n_ctrl: sys.quadrature_start(),
            fsal_valid: false,
            err_prev: 1e-4,
        }
    }
}

impl<S: OdeSystem> Stepper<S> for Dopri5 {
    fn step(
        &mut self,
        _sys: &S,
        _t: f64,
        _segment: f64,
        _y: &mut [f64],
        _h: f64,
        _stats: &mut SolverStats,
    ) -> Result<(), SolverError> {
        Err(SolverError::Settings("dopri5 is adaptive only".into()))
    }

    fn attempt(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &mut [f64],
        h: f64,
        fresh: bool,
        stats: &mut SolverStats,
    ) -> Result<Attempt, SolverError> {
        let n = y.len();
        if fresh || !self.fsal_valid {
            let (k0, _) = self.k.split_at_mut(1);
            eval(sys, t, segment, y, &mut k0[0], stats)?;
            self.fsal_valid = true;
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += DP_A[s][j] * self.k[j][i];
                }
                self.tmp[i] = y[i] + h * acc;
            }
            let (_, rest) = self.k.split_at_mut(s);
            eval(sys, t + DP_C[s] * h, segment, &self.tmp, &mut rest[0], stats)?;
        }
        // tmp now holds the 5th-order solution (stage 7 is FSAL).
        for i in 0..n {
            let mut e = 0.0;
            for s in 0..7 {
                e += DP_E[s] * self.k[s][i];
            }
            self.err[i] = h * e;
        }
        error_weights(y, &self.tmp, self.rtol, &self.atol, &mut self.w);
        let err = rms(&self.err, &self.w, self.n_ctrl).max(1e-16);
        if !err.is_finite() {
            return Ok(Attempt::Rejected { h_next: 0.25 * h });
        }
        if err <= 1.0 {
            // PI controller (Hairer–Wanner, beta = 0.04).
            let fac = 0.9 * err.powf(-0.7 / 5.0) * self.err_prev.powf(0.04);
            let fac = fac.clamp(0.2, 5.0);
            self.err_prev = err.max(1e-4);
            y.copy_from_slice(&self.tmp);
            self.k.swap(0, 6);
            Ok(Attempt::Accepted { h_next: h * fac })
        } else {
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            Ok(Attempt::Rejected { h_next: h * fac })
        }
    }

    fn reset(&mut self) {
        self.fsal_valid = false;
    }
}

// Radau IIA (s = 3) constants after the transformation to block-diagonal
// form of the inverse coefficient matrix.
const SQ6: f64 = 2.449_489_742_783_178;
const RC: [f64; 3] = [(4.0 - SQ6) / 10.0, (4.0 + SQ6) / 10.0, 1.0];
const ALPHA: f64 = 2.681_082_873_627_752_1;
const BETA: f64 = 3.050_430_199_247_410_6;
const GAMMA: f64 = 3.637_834_252_744_495_7;
const E0: f64 = -2.762_305_454_748_599_4;
const E1: f64 = 0.379_935_598_252_728_88;
const E2: f64 = -0.091_629_609_865_225_789;
const MU1: f64 = 0.155_051_025_721_682_19;
const MU2: f64 = 0.644_948_974_278_317_81;
const MU3: f64 = -0.844_948_974_278_317_81;
const MU4: f64 = -0.355_051_025_721_682_19;
const MU5: f64 = -0.489_897_948_556_635_62;
const T: [[f64; 3]; 3] = [
    [9.123_239_487_089_294_3e-2, -0.141_255_295_020_954_21, -3.002_919_410_514_742_4e-2],
    [0.241_717_932_707_107_02, 0.204_129_352_293_799_93, 0.382_942_112_757_261_94],
    [0.966_048_182_615_092_94, 1.0, 0.0],
];
const TI: [[f64; 3]; 3] = [
    [4.325_579_890_063_155_4, 0.339_199_251_815_809_87, 0.541_770_539_935_874_87],
    [-4.178_718_591_551_904_7, -0.327_682_820_761_062_39, 0.476_623_554_500_550_45],
    [-0.502_872_634_945_786_88, 2.571_926_949_855_605_4, -0.596_039_204_828_224_92],
];

const NEWTON_MAX: usize = 7;
const THETA_MAX: f64 = 0.001;
const MAX_SUBDIVISIONS: usize = 10;
/// Newton increment norm accepted in fixed-step mode once the iteration
/// stops contracting.
const FIXED_NEWTON_FLOOR: f64 = 1e-5;

struct Radau5 {
    n: usize,
    n_ctrl: usize,
    rtol: f64,
    atol: Vec<f64>,
    tol_newton: f64,
    adaptive: bool,
    jac: DMatrix<f64>,
    jac_valid: bool,
    lu_real: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    lu_comp: Option<nalgebra::LU<Complex<f64>, nalgebra::Dyn, nalgebra::Dyn>>,
    lu_h: f64,
    f0: Vec<f64>,
    f0_valid: bool,
    z: [Vec<f64>; 3],
    w: [Vec<f64>; 3],
    k: [Vec<f64>; 3],
    v: Vec<f64>,
    scal: Vec<f64>,
    yc: [Vec<f64>; 3],
    have_history: bool,
    h_prev: f64,
    err_prev: f64,
    eta: f64,
    theta: f64,
    after_reject: bool,
    accepted: usize,
}

impl Radau5 {
    fn new<S: OdeSystem>(sys: &S, settings: &SolverSettings) -> Self {
        let n = sys.dim();
        // Tolerances are transformed as in Hairer–Wanner's RADAU5.
        let rtol = 0.1 * settings.rtol.powf(2.0 / 3.0);
        let atol: Vec<f64> =
            resolve_atol(settings, n).iter().map(|a| a / settings.rtol * rtol).collect();
        let tol_newton = (10.0 * f64::EPSILON / rtol).max(0.03f64.min(rtol.sqrt()));
        let zeros = || vec![0.0; n];
        Self {
            n,
            n_ctrl: sys.quadrature_start(),
            rtol,
            atol,
            tol_newton: if settings.adaptive { tol_newton } else { 1e-9 },
            adaptive: settings.adaptive,
            jac: DMatrix::zeros(n, n),
            jac_valid: false,
            lu_real: None,
            lu_comp: None,
            lu_h: 0.0,
            f0: zeros(),
            f0_valid: false,
            z: std::array::from_fn(|_| zeros()),
            w: std::array::from_fn(|_| zeros()),
            k: std::array::from_fn(|_| zeros()),
            v: zeros(),
            scal: zeros(),
            yc: std::array::from_fn(|_| zeros()),
            have_history: false,
            h_prev: 0.0,
            err_prev: 1e-2,
            eta: 1.0,
            theta: 1.0,
            after_reject: false,
            accepted: 0,
        }
    }

    fn jacobian<S: OdeSystem>(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &[f64],
        stats: &mut SolverStats,
    ) -> Result<(), SolverError> {
        let n = self.n;
        let mut yp = y.to_vec();
        let mut fp = vec![0.0; n];
        for j in 0..n {
            let delta = (f64::EPSILON * y[j].abs().max(1e-5)).sqrt() * 10.0;
            let delta = if self.scal[j] > 0.0 { delta.max(1e-3 * self.scal[j]).min(delta * 1e3) } else { delta };
            yp[j] = y[j] + delta;
            let delta = yp[j] - y[j];
            eval(sys, t, segment, &yp, &mut fp, stats)?;
            for i in 0..n {
                self.jac[(i, j)] = (fp[i] - self.f0[i]) / delta;
            }
            yp[j] = y[j];
        }
        stats.jacobians += 1;
        self.jac_valid = true;
        Ok(())
    }

    fn factorize(&mut self, h: f64, stats: &mut SolverStats) -> Result<(), SolverError> {
        let n = self.n;
        let mut er = -self.jac.clone();
        let mut ec = DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| Complex::new(-self.jac[(i, j)], 0.0));
        let (g, a, b) = (GAMMA / h, ALPHA / h, BETA / h);
        for i in 0..n {
            er[(i, i)] += g;
            ec[(i, i)] += Complex::new(a, b);
        }
        self.lu_real = Some(er.lu());
        self.lu_comp = Some(ec.lu());
        self.lu_h = h;
        stats.factorizations += 1;
        Ok(())
    }

    fn set_scale(&mut self, y: &[f64]) {
        for i in 0..self.n {
            self.scal[i] = self.atol[i] + self.rtol * y[i].abs();
        }
    }

    fn newton_norm(&self, dw: &[Vec<f64>; 3]) -> f64 {
        let m = self.n_ctrl.max(1);
        let mut s = 0.0;
        for i in 0..self.n_ctrl {
            for d in dw {
                s += (d[i] / self.scal[i]).powi(2);
            }
        }
        (s / (3 * m) as f64).sqrt()
    }

    /// Solves the collocation equations. Returns the number of Newton
    /// iterations, or `None` when the iteration diverges (with a suggested
    /// step factor).
    fn collocate<S: OdeSystem>(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &[f64],
        h: f64,
        stats: &mut SolverStats,
    ) -> Result<Result<usize, f64>, SolverError> {
        let n = self.n;
        if self.have_history && self.h_prev > 0.0 {
            let c3q = h / self.h_prev;
            let cq = [MU1 * c3q, MU2 * c3q, c3q];
            for i in 0..n {
                for s in 0..3 {
                    let c = cq[s];
                    self.z[s][i] = c * (self.yc[0][i] + (c - MU4) * (self.yc[1][i] + (c - MU3) * self.yc[2][i]));
                }
            }
        } else {
            for s in 0..3 {
                self.z[s].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for i in 0..n {
            for r in 0..3 {
                self.w[r][i] = TI[r][0] * self.z[0][i] + TI[r][1] * self.z[1][i] + TI[r][2] * self.z[2][i];
            }
        }
        let (g, a, b) = (GAMMA / h, ALPHA / h, BETA / h);
        self.eta = self.eta.max(f64::EPSILON).powf(0.8);
        self.theta = THETA_MAX;
        let mut norm_old = 0.0;
        let mut thq_old = 0.0;
        let mut dw: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
        let mut rhs_r = DVector::<f64>::zeros(n);
        let mut rhs_c = DVector::<Complex<f64>>::zeros(n);
        for iter in 1..=NEWTON_MAX {
            for s in 0..3 {
                for i in 0..n {
                    self.v[i] = y[i] + self.z[s][i];
                }
                let (v, k) = (&self.v, &mut self.k[s]);
                eval(sys, t + RC[s] * h, segment, v, k, stats)?;
            }
            for i in 0..n {
                let tk = |r: usize| TI[r][0] * self.k[0][i] + TI[r][1] * self.k[1][i] + TI[r][2] * self.k[2][i];
                rhs_r[i] = tk(0) - g * self.w[0][i];
                let re = tk(1) - a * self.w[1][i] + b * self.w[2][i];
                let im = tk(2) - b * self.w[1][i] - a * self.w[2][i];
                rhs_c[i] = Complex::new(re, im);
            }
            let lu_r = self.lu_real.as_ref().expect("factorized");
            let lu_c = self.lu_comp.as_ref().expect("factorized");
            if !lu_r.solve_mut(&mut rhs_r) || !lu_c.solve_mut(&mut rhs_c) {
                return Ok(Err(0.5));
            }
            for i in 0..n {
                dw[0][i] = rhs_r[i];
                dw[1][i] = rhs_c[i].re;
                dw[2][i] = rhs_c[i].im;
                for r in 0..3 {
                    self.w[r][i] += dw[r][i];
                }
                for s in 0..3 {
                    self.z[s][i] = T[s][0] * self.w[0][i] + T[s][1] * self.w[1][i] + T[s][2] * self.w[2][i];
                }
            }
            let norm = self.newton_norm(&dw);
            if !norm.is_finite() {
                return Ok(Err(0.5));
            }
            if iter > 1 && iter < NEWTON_MAX {
                let thq = norm / norm_old;
                self.theta = if iter == 2 { thq } else { (thq * thq_old).sqrt() };
                thq_old = thq;
                if self.theta < 0.99 {
                    self.eta = self.theta / (1.0 - self.theta);
                    let expo = (NEWTON_MAX - 1 - iter) as f64;
                    let rel = self.eta * norm * self.theta.powf(expo) / self.tol_newton;
                    if self.adaptive && rel >= 1.0 {
                        let q = rel.clamp(1e-4, 20.0);
                        let den = (4 + NEWTON_MAX - 1 - iter) as f64;
                        return Ok(Err(0.8 * q.powf(-1.0 / den)));
                    }
                } else if !self.adaptive && norm <= FIXED_NEWTON_FLOOR {
                    // Stalled at roundoff level.
                    self.theta = THETA_MAX;
                    return Ok(Ok(iter));
                } else {
                    return Ok(Err(0.5));
                }
            }
            norm_old = norm;
            if self.eta * norm <= self.tol_newton || norm == 0.0 {
                return Ok(Ok(iter));
            }
        }
        if !self.adaptive && norm_old <= FIXED_NEWTON_FLOOR {
            self.theta = THETA_MAX;
            return Ok(Ok(NEWTON_MAX));
        }
        Ok(Err(0.5))
    }

    fn error_estimate<S: OdeSystem>(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &[f64],
        h: f64,
        stats: &mut SolverStats,
    ) -> Result<f64, SolverError> {
        let n = self.n;
        let g = GAMMA / h;
        let mut ez = vec![0.0; n];
        let mut rhs = DVector::<f64>::zeros(n);
        for i in 0..n {
            ez[i] = g * (E0 * self.z[0][i] + E1 * self.z[1][i] + E2 * self.z[2][i]);
            rhs[i] = ez[i] + self.f0[i];
        }
        let lu = self.lu_real.as_ref().expect("factorized");
        lu.solve_mut(&mut rhs);
        let mut err = rms(rhs.as_slice(), &self.scal, self.n_ctrl);
        if err >= 1.0 && (self.accepted == 0 || self.after_reject) {
            let ype: Vec<f64> = (0..n).map(|i| y[i] + rhs[i]).collect();
            let mut fpe = vec![0.0; n];
            eval(sys, t, segment, &ype, &mut fpe, stats)?;
            for i in 0..n {
                rhs[i] = ez[i] + fpe[i];
            }
            lu.solve_mut(&mut rhs);
            err = rms(rhs.as_slice(), &self.scal, self.n_ctrl);
        }
        Ok(err.max(1e-10))
    }

    fn commit(&mut self, y: &mut [f64], h: f64) {
        for i in 0..self.n {
            y[i] += self.z[2][i];
            self.yc[0][i] = (self.z[1][i] - self.z[2][i]) / MU4;
            self.yc[1][i] = ((self.z[0][i] - self.z[1][i]) / MU5 - self.yc[0][i]) / MU3;
            self.yc[2][i] = self.yc[1][i] - ((self.z[0][i] - self.z[1][i]) / MU5 - self.z[0][i] / MU1) / MU2;
        }
        self.have_history = true;
        self.h_prev = h;
        self.accepted += 1;
        self.f0_valid = false;
    }

    /// Fixed step of `h`, halved recursively when the stage equations do
    /// not converge.
    #[allow(clippy::too_many_arguments)]
    fn step_subdivided<S: OdeSystem>(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &mut [f64],
        h: f64,
        depth: usize,
        stats: &mut SolverStats,
    ) -> Result<(), SolverError> {
        for attempt in 0..2 {
            self.prepare(sys, t, segment, y, h, stats)?;
            if self.collocate(sys, t, segment, y, h, stats)?.is_ok() {
                self.commit(y, h);
                return Ok(());
            }
            if attempt == 0 {
                self.jac_valid = false;
                self.have_history = false;
                self.theta = 1.0;
            }
        }
        if depth >= MAX_SUBDIVISIONS {
            return Err(SolverError::NewtonFailure { t });
        }
        self.step_subdivided(sys, t, segment, y, 0.5 * h, depth + 1, stats)?;
        self.step_subdivided(sys, t + 0.5 * h, segment, y, 0.5 * h, depth + 1, stats)
    }

    fn prepare<S: OdeSystem>(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &[f64],
        h: f64,
        stats: &mut SolverStats,
    ) -> Result<(), SolverError> {
        self.set_scale(y);
        if !self.f0_valid {
            let mut f0 = std::mem::take(&mut self.f0);
            let r = eval(sys, t, segment, y, &mut f0, stats);
            self.f0 = f0;
            r?;
            self.f0_valid = true;
        }
        let reuse_jac = self.jac_valid && self.theta <= THETA_MAX;
        if !reuse_jac {
            self.jacobian(sys, t, segment, y, stats)?;
        }
        if !reuse_jac || self.lu_real.is_none() || self.lu_h != h {
            self.factorize(h, stats)?;
        }
        Ok(())
    }
}

impl<S: OdeSystem> Stepper<S> for Radau5 {
    fn step(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &mut [f64],
        h: f64,
        stats: &mut SolverStats,
    ) -> Result<(), SolverError> {
        self.step_subdivided(sys, t, segment, y, h, 0, stats)
    }

    fn attempt(
        &mut self,
        sys: &S,
        t: f64,
        segment: f64,
        y: &mut [f64],
        h: f64,
        fresh: bool,
        stats: &mut SolverStats,
    ) -> Result<Attempt, SolverError> {
        debug_assert!(self.adaptive);
        if fresh {
            self.have_history = false;
            self.f0_valid = false;
        }
        self.prepare(sys, t, segment, y, h, stats)?;
        let iters = match self.collocate(sys, t, segment, y, h, stats)? {
            Ok(k) => k,
            Err(fac) => {
                self.jac_valid = false;
                self.theta = 1.0;
                self.after_reject = true;
                return Ok(Attempt::Rejected { h_next: h * fac });
            }
        };
        let err = self.error_estimate(sys, t, segment, y, h, stats)?;
        let safety: f64 = 0.9;
        let fac = safety.min(safety * (1 + 2 * NEWTON_MAX) as f64 / (iters + 2 * NEWTON_MAX) as f64);
        let quot = (err.powf(0.25) / fac).clamp(1.0 / 8.0, 5.0);
        let mut h_next = h / quot;
        if err < 1.0 {
            if self.accepted > 0 && !self.after_reject {
                let facgus = (self.h_prev / h) * (err * err / self.err_prev).powf(0.25) / safety;
                let facgus = facgus.clamp(1.0 / 8.0, 5.0);
                h_next = h / quot.max(facgus);
            }
            self.err_prev = err.max(1e-2);
            self.after_reject = false;
            self.commit(y, h);
            let ratio = h_next / h;
            if self.theta <= THETA_MAX && (1.0..=1.2).contains(&ratio) {
                h_next = h;
            }
            Ok(Attempt::Accepted { h_next })
        } else {
            self.after_reject = true;
            Ok(Attempt::Rejected { h_next: if self.accepted == 0 { h * 0.1 } else { h_next } })
        }
    }

    fn reset(&mut self) {
        self.have_history = false;
        self.f0_valid = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Linear test problem with one slow and one very stiff mode plus a
    /// quadrature of the first component.
    struct Stiff {
        lambda: f64,
    }

    impl OdeSystem for Stiff {
        fn dim(&self) -> usize {
            3
        }
        fn quadrature_start(&self) -> usize {
            2
        }
        fn rhs(&self, t: f64, _segment: f64, y: &[f64], dy: &mut [f64]) -> Result<(), ModelError> {
            dy[0] = -y[0];
            dy[1] = self.lambda * (y[1] - t.cos()) - t.sin();
            dy[2] = y[0];
            Ok(())
        }
    }

    fn run(settings: &SolverSettings, lambda: f64) -> Vec<f64> {
        let sys = Stiff { lambda };
        let mut y = vec![1.0, 1.0, 0.0];
        let stops = [Stop { t: 0.5, discontinuity: false }, Stop { t: 1.0, discontinuity: false }];
        integrate(&sys, settings, 0.0, &mut y, &stops, |_, _, _| Ok(())).unwrap();
        y
    }

    fn exact() -> [f64; 3] {
        let e = (-1.0f64).exp();
        [e, 1.0f64.cos(), 1.0 - e]
    }

    #[test]
    fn rk4_is_fourth_order() {
        let errs: Vec<f64> = [0.02, 0.01]
            .iter()
            .map(|&h| (run(&SolverSettings::fixed(Method::Rk4, h), -1.0)[0] - exact()[0]).abs())
            .collect();
        let order = (errs[0] / errs[1]).log2();
        assert!(order > 3.8 && order < 4.2, "order {order}");
    }

    #[test]
    fn dopri5_meets_tolerance() {
        let y = run(&SolverSettings::adaptive(Method::Dopri5, 1e-10, vec![1e-12]), -1.0);
        for (a, b) in y.iter().zip(exact()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn radau5_handles_stiffness() {
        let y = run(&SolverSettings::adaptive(Method::Radau5, 1e-9, vec![1e-12]), -1e9);
        for (a, b) in y.iter().zip(exact()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn fixed_radau5_is_high_order_and_stable() {
        let e = |h: f64| {
            let y = run(&SolverSettings::fixed(Method::Radau5, h), -1e9);
            (y[0] - exact()[0]).abs() + (y[2] - exact()[2]).abs()
        };
        let (e1, e2) = (e(0.1), e(0.05));
        assert!(e1 < 1e-6);
        assert!((e1 / e2).log2() > 4.5, "{e1} {e2}");
    }

    #[test]
    fn lands_on_stops_exactly() {
        let sys = Stiff { lambda: -1.0 };
        let mut y = vec![1.0, 1.0, 0.0];
        let stops: Vec<Stop> = (1..=7).map(|k| Stop { t: k as f64 / 7.0, discontinuity: k == 3 }).collect();
        let mut seen = Vec::new();
        integrate(
            &sys,
            &SolverSettings::adaptive(Method::Dopri5, 1e-6, vec![1e-9]),
            0.0,
            &mut y,
            &stops,
            |k, t, _| {
                seen.push((k, t));
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen.len(), 7);
        for (k, t) in seen {
            assert_eq!(t, stops[k].t);
        }
    }

    #[test]
    fn quadrature_can_be_reset_at_stops() {
        let sys = Stiff { lambda: -1.0 };
        let mut y = vec![1.0, 1.0, 0.0];
        let stops = [Stop { t: 0.5, discontinuity: false }, Stop { t: 1.0, discontinuity: false }];
        let mut parts = Vec::new();
        integrate(&sys, &SolverSettings::fixed(Method::Rk4, 1e-3), 0.0, &mut y, &stops, |_, _, y| {
            parts.push(y[2]);
            y[2] = 0.0;
            Ok(())
        })
        .unwrap();
        let total: f64 = parts.iter().sum();
        assert!((total - exact()[2]).abs() < 1e-12);
    }

    /// `y' = 1`, defined only for `y <= 1`.
    struct Bounded;

    impl OdeSystem for Bounded {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, _segment: f64, y: &[f64], dy: &mut [f64]) -> Result<(), ModelError> {
            if y[0] > 1.0 {
                return Err(ModelError::Unsupported("y above one"));
            }
            dy[0] = 1.0;
            Ok(())
        }
    }

    #[test]
    fn leaving_the_domain_is_an_error_not_a_panic() {
        let stops = [Stop { t: 2.0, discontinuity: false }];
        for method in [Method::Radau5, Method::Dopri5] {
            for y0 in [0.0, 1.5] {
                let mut y = vec![y0];
                let s = SolverSettings::adaptive(method, 1e-8, vec![1e-10]);
                let e = integrate(&Bounded, &s, 0.0, &mut y, &stops, |_, _, _| Ok(())).unwrap_err();
                assert!(e.is_validity(), "{e}");
            }
        }
    }

    #[test]
    fn rejects_bad_settings() {
        let sys = Stiff { lambda: -1.0 };
        let mut y = vec![0.0; 3];
        let s = SolverSettings::fixed(Method::Rk4, -1.0);
        assert!(integrate(&sys, &s, 0.0, &mut y, &[], |_, _, _| Ok(())).is_err());
        let mut y = vec![0.0; 2];
        let s = SolverSettings::fixed(Method::Rk4, 0.1);
        assert!(integrate(&sys, &s, 0.0, &mut y, &[], |_, _, _| Ok(())).is_err());
    }
}
