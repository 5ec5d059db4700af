//! IDA-PBC position control with structure-preserving integral action.
//!
//! The desired closed loop is `x' = (J_d - R_d) grad H_d` with
//!
//! ```text
//!            [  0     0     J13    0    a1 ]
//!            [  0     0     J23    0    a2 ]
//! J_d - R_d = [ -J13  -J23  -r33   J43  a3 ]
//!            [  0     0    -J43    0    a4 ]
//!            [ -a1   -a2   -a3    -a4  -r55]
//! ```
//!
//! and `H_d` quadratic about the target `x*`. Only the charge row is
//! actuated, so the voltage `beta(x)` is the least-squares solution of the
//! charge row; the remaining rows hold by the choice of `J13, J23, r33, J43`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    Disturbance, DisturbanceSample, PhModel, Recorder, Sample, TimeGrid, Trajectory,
};
use crate::error::{ControlError, ModelError, SolverError};
use crate::geometry;
use crate::hamiltonian::{State, BLOCKS};
use crate::solver::{self, OdeSystem, SolverSettings};

/// Shaping, damping and integral gains. Every matrix is diagonal and
/// stored as its diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub kb_tilde: Vec<f64>,
    pub k_tilde: Vec<f64>,
    pub kphi_tilde: Vec<f64>,
    pub kq_tilde: Vec<f64>,
    pub r55: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub alpha3: Vec<f64>,
    pub alpha4: Vec<f64>,
    /// Row vector of the integral action.
    pub k_int: Vec<f64>,
    pub ia_enabled: bool,
}

impl ControllerGains {
    /// Uniform gains with `alpha1 = alpha3 = I`, `alpha2 = alpha4 = 0` and
    /// unit `K~`, `K~_phi`.
    pub fn uniform(n: usize, kb_tilde: f64, kq_tilde: f64, r55: f64) -> Self {
        Self {
            kb_tilde: vec![kb_tilde; n],
            k_tilde: vec![1.0; n],
            kphi_tilde: vec![1.0; n],
            kq_tilde: vec![kq_tilde; n],
            r55: vec![r55; n],
            alpha1: vec![1.0; n],
            alpha2: vec![0.0; n],
            alpha3: vec![1.0; n],
            alpha4: vec![0.0; n],
            k_int: vec![0.0; n],
            ia_enabled: false,
        }
    }

    /// Closed-loop gains of the disturbance-rejection experiment:
    /// `K~_b = 10`, `K~_Q = 1000`, `r55 = 0.1 I`, `K_int = [0.5 11 1.2 0.5]`.
    pub fn disturbance_rejection() -> Self {
        let mut g = Self::uniform(4, 10.0, 1000.0, 0.1);
        g.k_int = vec![0.5, 11.0, 1.2, 0.5];
        g.ia_enabled = true;
        g
    }

    pub fn with_integral_action(mut self, k_int: Vec<f64>) -> Self {
        self.k_int = k_int;
        self.ia_enabled = true;
        self
    }

    pub fn validate(&self, n: usize) -> Result<(), ControlError> {
        let all = [
            ("kb_tilde", &self.kb_tilde),
            ("k_tilde", &self.k_tilde),
            ("kphi_tilde", &self.kphi_tilde),
            ("kq_tilde", &self.kq_tilde),
            ("r55", &self.r55),
            ("alpha1", &self.alpha1),
            ("alpha2", &self.alpha2),
            ("alpha3", &self.alpha3),
            ("alpha4", &self.alpha4),
            ("k_int", &self.k_int),
        ];
        for (name, v) in all {
            if v.len() != n {
                return Err(ControlError::Gains(format!("{name} has {} entries, expected {n}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ControlError::Gains(format!("{name} must be finite")));
            }
        }
        for (name, v) in [("kb_tilde", &self.kb_tilde), ("kq_tilde", &self.kq_tilde), ("r55", &self.r55)] {
            if v.iter().any(|x| *x <= 0.0) {
                return Err(ControlError::Gains(format!("{name} entries must be positive")));
            }
        }
        for (name, v) in [("k_tilde", &self.k_tilde), ("kphi_tilde", &self.kphi_tilde)] {
            if v.iter().any(|x| *x < 0.0) {
                return Err(ControlError::Gains(format!("{name} entries must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Equilibrium `x* = (theta*, l_p*, 0, phi*, Q*)` holding the endpoint at
/// `h_star` under the constant voltage `u_star`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumTarget {
    pub h_star: f64,
    pub theta_star: Vec<f64>,
    pub lp_star: Vec<f64>,
    pub q_star: Vec<f64>,
    pub phi_star: Vec<f64>,
    pub u_star: f64,
}

impl EquilibriumTarget {
    pub fn state(&self) -> State {
        State {
            theta: self.theta_star.clone(),
            lp: self.lp_star.clone(),
            p: vec![0.0; self.theta_star.len()],
            phi: self.phi_star.clone(),
            q: self.q_star.clone(),
        }
    }
}

/// Integral-action state (charge units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaState {
    pub x_c: Vec<f64>,
}

impl IaState {
    pub fn zeros(n: usize) -> Self {
        Self { x_c: vec![0.0; n] }
    }

    /// Integrator state that makes `u_int` vanish at `x`.
    pub fn matched(x: &State) -> Self {
        Self { x_c: x.q.clone() }
    }
}

const NEWTON_MAX_ITER: usize = 50;
const NEWTON_TOL: f64 = 1e-12;
const KINEMATIC_STEPS: usize = 1000;

/// Equal-angle bend that places the endpoint at `h_star`, by Newton's
/// method on `h(theta * 1) = h_star`.
pub fn equal_angle_for_endpoint(h_star: f64, model: &PhModel) -> Result<f64, ControlError> {
    let p = model.params();
    let n = p.n as f64;
    let l = p.link_length();
    let limit = n * l;
    if !(h_star.is_finite() && h_star.abs() < limit) {
        return Err(ControlError::Unreachable { h_star, limit });
    }
    if h_star == 0.0 {
        return Ok(0.0);
    }
    let h = |t: f64| l * (1..=p.n).map(|i| (i as f64 * t).sin()).sum::<f64>();
    let dh = |t: f64| l * (1..=p.n).map(|i| i as f64 * (i as f64 * t).cos()).sum::<f64>();
    let mut t = h_star / (0.5 * n * (n + 1.0) * l);
    for _ in 0..NEWTON_MAX_ITER {
        let r = h(t) - h_star;
        let slope = dh(t);
        if slope.abs() < f64::MIN_POSITIVE {
            break;
        }
        let step = r / slope;
        t -= step;
        if !t.is_finite() {
            break;
        }
        if step.abs() <= NEWTON_TOL * t.abs().max(1e-3) && (h(t) - h_star).abs() <= 1e-12 {
            return Ok(t);
        }
    }
    Err(ControlError::NewtonDiverged { iterations: NEWTON_MAX_ITER })
}

/// Top-film length reached from rest along the kinematic constraint
/// `dl_p/dtheta = 2 A_s / l_p`, integrated with RK4 in 1000 steps.
pub fn kinematic_film_length(theta: f64, model: &PhModel) -> Result<f64, ControlError> {
    let p = model.params();
    let f = |t: f64, lp: f64| -> Result<f64, ControlError> {
        let s = geometry::shell_area(t, lp, p)
            .map_err(|source| ControlError::Model(ModelError::Geometry { index: 0, source }))?;
        Ok(2.0 * s.area / lp)
    };
    let h = theta / KINEMATIC_STEPS as f64;
    let mut lp = p.lp_rest;
    for k in 0..KINEMATIC_STEPS {
        let t = k as f64 * h;
        let k1 = f(t, lp)?;
        let k2 = f(t + 0.5 * h, lp + 0.5 * h * k1)?;
        let k3 = f(t + 0.5 * h, lp + 0.5 * h * k2)?;
        let k4 = f(t + h, lp + h * k3)?;
        lp += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    Ok(lp)
}

/// Steady state reaching the endpoint `h_star`.
pub fn equilibrium_from_setpoint(h_star: f64, model: &PhModel) -> Result<EquilibriumTarget, ControlError> {
    let p = model.params();
    let n = p.n;
    let theta_bar = equal_angle_for_endpoint(h_star, model)?;
    let lp_bar = kinematic_film_length(theta_bar, model)?;
    let theta_star = vec![theta_bar; n];
    let lp_star = vec![lp_bar; n];
    let grav = crate::hamiltonian::gravity_gradient(&theta_star, p);
    let mut q_star = vec![0.0; n];
    let mut phi_star = vec![0.0; n];
    let mut v_star = vec![0.0; n];
    for i in 0..n {
        let s = geometry::evaluate(theta_star[i], lp_star[i], model.area_total(), p)
            .map_err(|source| ModelError::Geometry { index: i, source })?;
        let d = 2.0 * s.shell_area / lp_star[i];
        // grad_theta H + d grad_lp H = 0 solved for V^2 = (Q/C)^2.
        let spring = p.torsion_kb[i] * theta_star[i] + grav[i] + d * 0.5 * p.spring_k[i] * (lp_star[i] - p.lp_rest);
        let slope = s.partials.dcs_dtheta + d * s.partials.dcs_dlp;
        let v2 = if spring == 0.0 { 0.0 } else { 2.0 * spring / slope };
        if !(v2.is_finite() && v2 >= 0.0) {
            let c = s.capacitance.total;
            return Err(ControlError::NoChargeRoot { index: i, q_squared: v2 * c * c });
        }
        let v = v2.sqrt();
        v_star[i] = v;
        q_star[i] = v * s.capacitance.total;
        // phi' = -r_L L^-1 phi + V = 0.
        let il = model.inverse_inductance()[i];
        if il > 0.0 {
            if p.r_l[i] > 0.0 {
                phi_star[i] = v / (p.r_l[i] * il);
            } else if v != 0.0 {
                return Err(ControlError::NoChargeRoot { index: i, q_squared: q_star[i] * q_star[i] });
            }
        }
    }
    // Q' = -L^-1 phi - R^-1 V + R^-1 ga U = 0 in the least-squares sense.
    let ga = crate::hamiltonian::input_gain(&theta_star, p);
    let g = model.conductance();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let vi = g[i] * ga[i];
        num += vi * (phi_star[i] * model.inverse_inductance()[i] + g[i] * v_star[i]);
        den += vi * vi;
    }
    let u_star = if num == 0.0 {
        0.0
    } else if den > 0.0 {
        num / den
    } else {
        return Err(ControlError::ZeroInputGain { norm_sq: den });
    };
    Ok(EquilibriumTarget { h_star, theta_star, lp_star, q_star, phi_star, u_star })
}

/// Largest open-loop rate at `x*` under `U*`, each row divided by the
/// largest magnitude among the terms that make it up.
pub fn equilibrium_residual(target: &EquilibriumTarget, model: &PhModel) -> Result<f64, ControlError> {
    let x = target.state();
    let n = model.n();
    let flat = x.to_flat();
    let mut dx = vec![0.0; flat.len()];
    model.rates(&flat, target.u_star, 0.0, &[], &mut dx)?;
    let p = model.params();
    let shapes = model.shapes(&x)?;
    let ga = crate::hamiltonian::input_gain(&x.theta, p);
    let mut worst = 0.0f64;
    for i in 0..n {
        let s = &shapes[i];
        let v = x.q[i] / s.capacitance.total;
        let d = 2.0 * s.shell_area / x.lp[i];
        let il = x.phi[i] * model.inverse_inductance()[i];
        let g = model.conductance()[i];
        let torque_terms = [
            p.torsion_kb[i] * x.theta[i],
            0.5 * v * v * s.partials.dcs_dtheta,
            d * 0.5 * p.spring_k[i] * (x.lp[i] - p.lp_rest),
            d * 0.5 * v * v * s.partials.dcs_dlp,
        ];
        let rows = [
            (dx[2 * n + i], max_abs(&torque_terms)),
            (dx[3 * n + i], max_abs(&[p.r_l[i] * il, v])),
            (dx[4 * n + i], max_abs(&[il, g * v, g * ga[i] * target.u_star])),
            (dx[i], 0.0),
            (dx[n + i], 0.0),
        ];
        for (rate, scale) in rows {
            let r = if scale > 0.0 { rate.abs() / scale } else { rate.abs() };
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Quantities of the control law evaluated once per state.
struct LawTerms {
    /// `R^-1 ga`.
    v: Vec<f64>,
    /// `M^-1 p`.
    omega: Vec<f64>,
    /// `L^-1 phi`.
    i_l: Vec<f64>,
    /// `C^-1 Q`.
    volt: Vec<f64>,
}

fn law_terms(x: &[f64], model: &PhModel) -> Result<LawTerms, ModelError> {
    let n = model.n();
    let p = model.params();
    let mut t = LawTerms { v: vec![0.0; n], omega: vec![0.0; n], i_l: vec![0.0; n], volt: vec![0.0; n] };
    for i in 0..n {
        let (theta, lp) = (x[i], x[n + i]);
        let s = geometry::evaluate(theta, lp, model.area_total(), p)
            .map_err(|source| ModelError::Geometry { index: i, source })?;
        t.v[i] = model.conductance()[i] * p.gamma1 * (p.gamma2 * theta).cos();
        t.omega[i] = x[2 * n + i] / model.inertia()[i];
        t.i_l[i] = x[3 * n + i] * model.inverse_inductance()[i];
        t.volt[i] = x[4 * n + i] / s.capacitance.total;
    }
    Ok(t)
}

fn beta_flat(
    x: &[f64],
    target: &EquilibriumTarget,
    gains: &ControllerGains,
    model: &PhModel,
) -> Result<f64, ControlError> {
    let n = model.n();
    let t = law_terms(x, model)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let e_theta = x[i] - target.theta_star[i];
        let e_lp = x[n + i] - target.lp_star[i];
        let e_phi = x[3 * n + i] - target.phi_star[i];
        let e_q = x[4 * n + i] - target.q_star[i];
        // Desired charge rate (last row of J_d - R_d) minus the drift of
        // the uncontrolled charge row.
        let desired = -gains.alpha1[i] * gains.kb_tilde[i] * e_theta
            - gains.alpha2[i] * gains.k_tilde[i] * e_lp
            - gains.alpha3[i] * t.omega[i]
            - gains.alpha4[i] * gains.kphi_tilde[i] * e_phi
            - gains.r55[i] * gains.kq_tilde[i] * e_q;
        let w = desired + t.i_l[i] + model.conductance()[i] * t.volt[i];
        num += t.v[i] * w;
        den += t.v[i] * t.v[i];
    }
    if !(den > f64::MIN_POSITIVE) {
        return Err(ControlError::ZeroInputGain { norm_sq: den });
    }
    Ok(num / den)
}

/// IDA-PBC voltage
/// `beta = (R ga)^+ (-K~_b (theta - theta*) - M^-1 p - r55 K~_Q (Q - Q*) + L^-1 phi + R^-1 C^-1 Q)`
/// (shown for `alpha1 = alpha3 = I`, `alpha2 = alpha4 = 0`; the other
/// design terms enter the same way).
pub fn ida_pbc_control(
    x: &State,
    target: &EquilibriumTarget,
    gains: &ControllerGains,
    model: &PhModel,
) -> Result<f64, ControlError> {
    x.check(model.n())?;
    gains.validate(model.n())?;
    beta_flat(&x.to_flat(), target, gains, model)
}

/// Desired closed-loop energy
/// `H_d = 1/2 [e_theta' K~_b e_theta + e_lp' K~ e_lp + p' M^-1 p + e_phi' K~_phi e_phi + e_Q' K~_Q e_Q]`,
/// whose gradient is the co-energy column of the design.
pub fn desired_energy(x: &State, target: &EquilibriumTarget, gains: &ControllerGains, model: &PhModel) -> f64 {
    let mut h = 0.0;
    for i in 0..model.n() {
        let et = x.theta[i] - target.theta_star[i];
        let el = x.lp[i] - target.lp_star[i];
        let ep = x.phi[i] - target.phi_star[i];
        let eq = x.q[i] - target.q_star[i];
        h += gains.kb_tilde[i] * et * et
            + gains.k_tilde[i] * el * el
            + x.p[i] * x.p[i] / model.inertia()[i]
            + gains.kphi_tilde[i] * ep * ep
            + gains.kq_tilde[i] * eq * eq;
    }
    0.5 * h
}

/// `grad H_d` stacked as `[theta, l_p, p, phi, Q]`.
pub fn desired_gradient(x: &State, target: &EquilibriumTarget, gains: &ControllerGains, model: &PhModel) -> Vec<f64> {
    let n = model.n();
    let mut g = vec![0.0; BLOCKS * n];
    for i in 0..n {
        g[i] = gains.kb_tilde[i] * (x.theta[i] - target.theta_star[i]);
        g[n + i] = gains.k_tilde[i] * (x.lp[i] - target.lp_star[i]);
        g[2 * n + i] = x.p[i] / model.inertia()[i];
        g[3 * n + i] = gains.kphi_tilde[i] * (x.phi[i] - target.phi_star[i]);
        g[4 * n + i] = gains.kq_tilde[i] * (x.q[i] - target.q_star[i]);
    }
    g
}

/// State-dependent entries of `J_d - R_d`, one value per subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingEntries {
    pub j13: Vec<f64>,
    pub j23: Vec<f64>,
    pub r33: Vec<f64>,
    pub j43: Vec<f64>,
}

/// Default lower bound on `|M^-1 p|` for [`matching_entries`].
pub const MOMENTUM_THRESHOLD: f64 = 1e-12;

/// Solves the matching equation for `J13, J23, r33, J43`.
pub fn matching_entries(
    x: &State,
    target: &EquilibriumTarget,
    gains: &ControllerGains,
    model: &PhModel,
    threshold: f64,
) -> Result<MatchingEntries, ControlError> {
    let n = model.n();
    x.check(n)?;
    let grad = model.gradient(x)?;
    let d = crate::hamiltonian::coupling_d(&x.theta, &x.lp, model.params())?;
    let p = model.params();
    let mut m = MatchingEntries { j13: vec![0.0; n], j23: vec![0.0; n], r33: vec![0.0; n], j43: vec![0.0; n] };
    for i in 0..n {
        let omega = grad.d_p[i];
        if !(omega.abs() >= threshold) {
            return Err(ControlError::SingularMomentum { index: i, value: omega });
        }
        let kq_eq = gains.kq_tilde[i] * (x.q[i] - target.q_star[i]);
        let kb_et = gains.kb_tilde[i] * (x.theta[i] - target.theta_star[i]);
        let k_el = gains.k_tilde[i] * (x.lp[i] - target.lp_star[i]);
        let kphi_ep = gains.kphi_tilde[i] * (x.phi[i] - target.phi_star[i]);
        let j13 = (omega - gains.alpha1[i] * kq_eq) / omega;
        let j23 = (d[i] * omega - gains.alpha2[i] * kq_eq) / omega;
        let j43 = (p.r_l[i] * grad.d_phi[i] - grad.d_q[i] + gains.alpha4[i] * kq_eq) / omega;
        let r33 = (grad.d_theta[i] + d[i] * grad.d_lp[i] + p.damping_b[i] * omega + gains.alpha3[i] * kq_eq
            - j13 * kb_et
            - j23 * k_el
            + j43 * kphi_ep)
            / omega;
        m.j13[i] = j13;
        m.j23[i] = j23;
        m.r33[i] = r33;
        m.j43[i] = j43;
    }
    Ok(m)
}

/// `g_perp [(J - R) grad H + g beta] - g_perp [(J_d - R_d) grad H_d]` on the
/// four unactuated blocks, each entry divided by the largest magnitude
/// among the terms of its row.
pub fn matching_residual(
    x: &State,
    target: &EquilibriumTarget,
    gains: &ControllerGains,
    model: &PhModel,
) -> Result<Vec<f64>, ControlError> {
    let n = model.n();
    gains.validate(n)?;
    let m = matching_entries(x, target, gains, model, MOMENTUM_THRESHOLD)?;
    let structure = model.structure(x)?;
    let grad = model.gradient(x)?;
    let beta = ida_pbc_control(x, target, gains, model)?;
    let e = DVector::from_vec(grad.to_flat());
    let plant_jr = (&structure.j - &structure.r) * &e;
    let plant = &plant_jr + &structure.g * beta;
    let hd = desired_gradient(x, target, gains, model);
    let mut out = Vec::with_capacity(4 * n);
    for block in 0..4 {
        for i in 0..n {
            let row = block * n + i;
            let (a1, a2, a3, a4) = (gains.alpha1[i], gains.alpha2[i], gains.alpha3[i], gains.alpha4[i]);
            let (g_t, g_l, g_p, g_f, g_q) = (hd[i], hd[n + i], hd[2 * n + i], hd[3 * n + i], hd[4 * n + i]);
            let terms: Vec<f64> = match block {
                0 => vec![m.j13[i] * g_p, a1 * g_q],
                1 => vec![m.j23[i] * g_p, a2 * g_q],
                2 => vec![-m.j13[i] * g_t, -m.j23[i] * g_l, -m.r33[i] * g_p, m.j43[i] * g_f, a3 * g_q],
                _ => vec![-m.j43[i] * g_p, a4 * g_q],
            };
            let desired: f64 = terms.iter().sum();
            let plant_terms: Vec<f64> = (0..BLOCKS * n)
                .map(|k| (structure.j[(row, k)] - structure.r[(row, k)]) * e[k])
                .filter(|v| *v != 0.0)
                .collect();
            let scale = max_abs(&terms).max(max_abs(&plant_terms));
            let diff = plant[row] - desired;
            out.push(if scale > 0.0 { diff / scale } else { diff });
        }
    }
    Ok(out)
}

/// Integral action: `u_int = -K_int r55 (Q - x_c)` (a scalar) and
/// `x_c' = -(alpha1 K~_b (theta - theta*) + alpha3 M^-1 p)`.
pub fn ia_step(
    x: &State,
    ia: &IaState,
    target: &EquilibriumTarget,
    gains: &ControllerGains,
    model: &PhModel,
) -> (f64, Vec<f64>) {
    let n = model.n();
    let mut u_int = 0.0;
    let mut dxc = vec![0.0; n];
    for i in 0..n {
        u_int -= gains.k_int[i] * gains.r55[i] * (x.q[i] - ia.x_c[i]);
        dxc[i] = -(gains.alpha1[i] * gains.kb_tilde[i] * (x.theta[i] - target.theta_star[i])
            + gains.alpha3[i] * x.p[i] / model.inertia()[i]);
    }
    (u_int, dxc)
}

/// Setpoints switching at given times; the first entry starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSchedule {
    pub entries: Vec<(f64, EquilibriumTarget)>,
}

impl TargetSchedule {
    pub fn constant(target: EquilibriumTarget) -> Self {
        Self { entries: vec![(0.0, target)] }
    }

    pub fn at(&self, t: f64) -> &EquilibriumTarget {
        let mut current = &self.entries[0].1;
        for (start, target) in &self.entries {
            if *start <= t {
                current = target;
            }
        }
        current
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.entries.iter().skip(1).map(|(t, _)| *t).collect()
    }
}

/// Closed-loop run description.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub grid: TimeGrid,
    pub solver: SolverSettings,
    pub disturbances: Vec<Disturbance>,
    /// Magnitude above which the applied voltage is reported (V).
    pub voltage_ceiling: f64,
}

struct ClosedLoopSystem<'a> {
    model: &'a PhModel,
    schedule: &'a TargetSchedule,
    gains: &'a ControllerGains,
    disturbances: &'a [Disturbance],
}

struct Voltages {
    beta: f64,
    u_int: f64,
}

impl ClosedLoopSystem<'_> {
    fn voltages(&self, segment: f64, y: &[f64]) -> Result<Voltages, ModelError> {
        let n = self.model.n();
        let m = BLOCKS * n;
        let target = self.schedule.at(segment);
        let beta = beta_flat(&y[..m], target, self.gains, self.model).map_err(|e| match e {
            ControlError::Model(m) => m,
            _ => ModelError::Unsupported("control law with vanishing input gain"),
        })?;
        let mut u_int = 0.0;
        if self.gains.ia_enabled {
            for i in 0..n {
                u_int -= self.gains.k_int[i] * self.gains.r55[i] * (y[4 * n + i] - y[m + i]);
            }
        }
        Ok(Voltages { beta, u_int })
    }
}

impl OdeSystem for ClosedLoopSystem<'_> {
    fn dim(&self) -> usize {
        (BLOCKS + 1) * self.model.n() + 2
    }

    fn quadrature_start(&self) -> usize {
        (BLOCKS + 1) * self.model.n()
    }

    fn rhs(&self, _t: f64, segment: f64, y: &[f64], dy: &mut [f64]) -> Result<(), ModelError> {
        let n = self.model.n();
        let m = BLOCKS * n;
        let u = self.voltages(segment, y)?;
        let dist = DisturbanceSample::at(self.disturbances, segment, n);
        let flow = self.model.rates(&y[..m], u.beta + u.u_int, dist.d_a, &dist.d_u, &mut dy[..m])?;
        let target = self.schedule.at(segment);
        for i in 0..n {
            dy[m + i] = if self.gains.ia_enabled {
                -(self.gains.alpha1[i] * self.gains.kb_tilde[i] * (y[i] - target.theta_star[i])
                    + self.gains.alpha3[i] * y[2 * n + i] / self.model.inertia()[i])
            } else {
                0.0
            };
        }
        dy[m + n] = flow.supply();
        dy[m + n + 1] = flow.dissipation();
        Ok(())
    }
}

/// Integrates the plant under `U = beta(x) + u_int`.
pub fn closed_loop_simulate(
    model: &PhModel,
    x0: &State,
    ia0: &IaState,
    schedule: &TargetSchedule,
    gains: &ControllerGains,
    run: &ClosedLoopRun,
) -> Result<Trajectory, SolverError> {
    let n = model.n();
    x0.check(n).map_err(|source| SolverError::Validity { t: 0.0, source })?;
    gains.validate(n).map_err(|e| SolverError::Settings(e.to_string()))?;
    run.grid.validate().map_err(SolverError::Settings)?;
    if ia0.x_c.len() != n {
        return Err(SolverError::Settings(format!("x_c has {} entries, expected {n}", ia0.x_c.len())));
    }
    if schedule.entries.is_empty() || schedule.entries[0].0 != 0.0 {
        return Err(SolverError::Settings("setpoint schedule must start at t = 0".into()));
    }
    for d in &run.disturbances {
        d.validate(n).map_err(SolverError::Settings)?;
    }
    let sys = ClosedLoopSystem { model, schedule, gains, disturbances: &run.disturbances };
    let mut settings = run.solver.clone();
    if settings.atol.is_empty() {
        settings.atol = model.default_atol();
        settings.atol.extend(std::iter::repeat_n(1e-16, n));
    }
    let mut breakpoints = schedule.breakpoints();
    for d in &run.disturbances {
        breakpoints.extend([d.start, d.stop]);
    }
    let (stops, is_sample) = run.grid.stops(&breakpoints);
    let m = BLOCKS * n;
    let mut y = x0.to_flat();
    y.extend_from_slice(&ia0.x_c);
    y.extend([0.0, 0.0]);
    let mut rec = Recorder::new(model, stops.len() + 1);
    let mut over_ceiling: Option<(f64, f64)> = None;
    let mut record = |rec: &mut Recorder, t: f64, y: &[f64], supplied: f64, dissipated: f64| -> Result<(), SolverError> {
        let validity = |source| SolverError::Validity { t, source };
        let v = sys.voltages(t, y).map_err(validity)?;
        let u = v.beta + v.u_int;
        if u.abs() > run.voltage_ceiling && over_ceiling.is_none_or(|(_, peak)| u.abs() > peak) {
            over_ceiling = Some((t, u.abs()));
        }
        rec.push(Sample {
            t,
            state: &y[..m],
            u,
            u_beta: v.beta,
            u_int: v.u_int,
            x_c: Some(&y[m..m + n]),
            supplied,
            dissipated,
        })
        .map_err(validity)
    };
    record(&mut rec, 0.0, &y, 0.0, 0.0)?;
    let stats = solver::integrate(&sys, &settings, 0.0, &mut y, &stops, |k, t, y| {
        if !is_sample[k] {
            return Ok(());
        }
        record(&mut rec, t, y, y[m + n], y[m + n + 1])?;
        y[m + n] = 0.0;
        y[m + n + 1] = 0.0;
        Ok(())
    })?;
    let mut traj = rec.traj;
    traj.stats = stats;
    if let Some((t, peak)) = over_ceiling {
        traj.warnings.push(format!(
            "applied voltage reached {peak:.1} V at t = {t} s, above the {:.0} V ceiling",
            run.voltage_ceiling
        ));
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ActuatorParams;

    fn model() -> PhModel {
        PhModel::new(ActuatorParams::nominal()).unwrap()
    }

    #[test]
    fn rest_setpoint_is_rest_state() {
        let m = model();
        let t = equilibrium_from_setpoint(0.0, &m).unwrap();
        assert_eq!(t.theta_star, vec![0.0; 4]);
        assert_eq!(t.lp_star, vec![0.015; 4]);
        assert_eq!(t.q_star, vec![0.0; 4]);
        assert_eq!(t.phi_star, vec![0.0; 4]);
        assert_eq!(t.u_star, 0.0);
        let beta = ida_pbc_control(&State::rest(m.params()), &t, &ControllerGains::uniform(4, 10.0, 1000.0, 0.1), &m)
            .unwrap();
        assert_eq!(beta, 0.0);
    }

    #[test]
    fn two_centimetre_setpoint() {
        let m = model();
        let t = equilibrium_from_setpoint(0.02, &m).unwrap();
        assert!((t.theta_star[0] - 0.067_170_291_211_500_04).abs() < 1e-12);
        assert!((m.endpoint(&t.state()) - 0.02).abs() < 1e-9);
        assert!(equilibrium_residual(&t, &m).unwrap() < 1e-8);
        let gains = ControllerGains::uniform(4, 10.0, 1000.0, 0.1);
        let beta = ida_pbc_control(&t.state(), &t, &gains, &m).unwrap();
        assert!((beta - t.u_star).abs() <= 1e-10 * t.u_star.abs());
    }

    #[test]
    fn unreachable_setpoint_is_rejected() {
        let m = model();
        assert!(matches!(equilibrium_from_setpoint(0.2, &m), Err(ControlError::Unreachable { .. })));
    }

    #[test]
    fn beta_is_linear_in_kb_tilde() {
        let m = model();
        let t = equilibrium_from_setpoint(0.02, &m).unwrap();
        let mut x = t.state();
        x.theta[1] += 0.01;
        let g1 = ControllerGains::uniform(4, 10.0, 1000.0, 0.1);
        let g3 = ControllerGains::uniform(4, 30.0, 1000.0, 0.1);
        let g0 = ControllerGains { kb_tilde: vec![1e-300; 4], ..g1.clone() };
        let b0 = ida_pbc_control(&x, &t, &g0, &m).unwrap();
        let b1 = ida_pbc_control(&x, &t, &g1, &m).unwrap() - b0;
        let b3 = ida_pbc_control(&x, &t, &g3, &m).unwrap() - b0;
        assert!((b3 - 3.0 * b1).abs() < 1e-13 * (b0.abs() + b3.abs()));
    }

    #[test]
    fn integral_action_vanishes_on_matched_state() {
        let m = model();
        let t = equilibrium_from_setpoint(0.02, &m).unwrap();
        let x = t.state();
        let (u, dxc) = ia_step(&x, &IaState::matched(&x), &t, &ControllerGains::disturbance_rejection(), &m);
        assert_eq!(u, 0.0);
        assert!(dxc.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn singular_momentum_is_reported() {
        let m = model();
        let t = equilibrium_from_setpoint(0.02, &m).unwrap();
        let mut x = t.state();
        x.p = vec![1e-6, 0.0, 1e-6, 1e-6];
        let r = matching_residual(&x, &t, &ControllerGains::uniform(4, 10.0, 1000.0, 0.1), &m);
        assert!(matches!(r, Err(ControlError::SingularMomentum { index: 1, .. })));
    }
}
