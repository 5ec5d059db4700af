//! Stored energy of the actuator and its gradient.
//!
//! The state of each subsystem is `(theta, l_p, p, phi, Q)`: bend angle,
//! top-film length, angular momentum, flux linkage of the drift inductor and
//! electrode charge. The capacitance is diagonal, so the electrostatic force
//! of subsystem `i` only depends on `(theta_i, l_p_i, Q_i)`.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::geometry::{self, SubsystemShape};
use crate::params::ActuatorParams;

/// Number of state blocks per subsystem.
pub const BLOCKS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub theta: Vec<f64>,
    pub lp: Vec<f64>,
    pub p: Vec<f64>,
    pub phi: Vec<f64>,
    pub q: Vec<f64>,
}

impl State {
    /// Straight, uncharged configuration with the top film at rest length.
    pub fn rest(params: &ActuatorParams) -> Self {
        let n = params.n;
        Self {
            theta: vec![0.0; n],
            lp: vec![params.lp_rest; n],
            p: vec![0.0; n],
            phi: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    /// Checks that all blocks have length `n` and the top film is positive.
    pub fn check(&self, n: usize) -> Result<(), ModelError> {
        for block in [&self.theta, &self.lp, &self.p, &self.phi, &self.q] {
            if block.len() != n {
                return Err(ModelError::Dimension { expected: n, found: block.len() });
            }
        }
        Ok(())
    }

    /// Stacks the blocks as `[theta, l_p, p, phi, Q]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(BLOCKS * self.n());
        for block in [&self.theta, &self.lp, &self.p, &self.phi, &self.q] {
            v.extend_from_slice(block);
        }
        v
    }

    pub fn from_flat(flat: &[f64], n: usize) -> Self {
        assert!(flat.len() >= BLOCKS * n, "flat state too short");
        let block = |k: usize| flat[k * n..(k + 1) * n].to_vec();
        Self { theta: block(0), lp: block(1), p: block(2), phi: block(3), q: block(4) }
    }
}

/// Individual energy terms in joules.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub h_theta: f64,
    pub h_lp: f64,
    pub h_g: f64,
    pub h_p: f64,
    pub h_phi: f64,
    pub h_q: f64,
    pub h_total: f64,
}

/// Co-energy variables: torque, film tension, angular rate, inductor current
/// and capacitor voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub d_theta: Vec<f64>,
    pub d_lp: Vec<f64>,
    pub d_p: Vec<f64>,
    pub d_phi: Vec<f64>,
    pub d_q: Vec<f64>,
}

impl Gradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(BLOCKS * self.d_theta.len());
        for block in [&self.d_theta, &self.d_lp, &self.d_p, &self.d_phi, &self.d_q] {
            v.extend_from_slice(block);
        }
        v
    }
}

/// Evaluates the geometry of every subsystem.
pub fn shapes(
    theta: &[f64],
    lp: &[f64],
    area_total: f64,
    params: &ActuatorParams,
) -> Result<Vec<SubsystemShape>, ModelError> {
    theta
        .iter()
        .zip(lp)
        .enumerate()
        .map(|(index, (&t, &l))| {
            geometry::evaluate(t, l, area_total, params).map_err(|source| ModelError::Geometry { index, source })
        })
        .collect()
}

fn gravity_energy(theta: &[f64], params: &ActuatorParams) -> f64 {
    if !params.gravity_enabled {
        return 0.0;
    }
    let com = geometry::center_of_mass_heights(theta, params);
    params.link_mass() * params.g_acc * com.z.iter().sum::<f64>()
}

/// Gradient of the gravity energy with respect to the joint angles.
pub fn gravity_gradient(theta: &[f64], params: &ActuatorParams) -> Vec<f64> {
    let n = theta.len();
    if !params.gravity_enabled {
        return vec![0.0; n];
    }
    let com = geometry::center_of_mass_heights(theta, params);
    let w = params.link_mass() * params.g_acc;
    (0..n).map(|j| w * com.dz.iter().map(|row| row[j]).sum::<f64>()).collect()
}

/// Total stored energy split by physical origin.
pub fn total_energy(x: &State, params: &ActuatorParams, area_total: f64) -> Result<EnergyBreakdown, ModelError> {
    x.check(params.n)?;
    let shapes = shapes(&x.theta, &x.lp, area_total, params)?;
    Ok(energy_from_shapes(x, &shapes, params))
}

pub(crate) fn energy_from_shapes(x: &State, shapes: &[SubsystemShape], params: &ActuatorParams) -> EnergyBreakdown {
    let inertia = params.inertia_diag();
    let inv_l = params.inverse_inductance();
    let mut e = EnergyBreakdown::default();
    for i in 0..params.n {
        let dl = x.lp[i] - params.lp_rest;
        e.h_theta += 0.5 * params.torsion_kb[i] * x.theta[i] * x.theta[i];
        e.h_lp += 0.25 * params.spring_k[i] * dl * dl;
        e.h_p += 0.5 * x.p[i] * x.p[i] / inertia[i];
        e.h_phi += 0.5 * x.phi[i] * x.phi[i] * inv_l[i];
        e.h_q += 0.5 * x.q[i] * x.q[i] / shapes[i].capacitance.total;
    }
    e.h_g = gravity_energy(&x.theta, params);
    e.h_total = e.h_theta + e.h_lp + e.h_g + e.h_p + e.h_phi + e.h_q;
    e
}

/// Gradient of the total energy.
pub fn grad_energy(x: &State, params: &ActuatorParams, area_total: f64) -> Result<Gradient, ModelError> {
    x.check(params.n)?;
    let shapes = shapes(&x.theta, &x.lp, area_total, params)?;
    Ok(gradient_from_shapes(x, &shapes, params))
}

pub(crate) fn gradient_from_shapes(x: &State, shapes: &[SubsystemShape], params: &ActuatorParams) -> Gradient {
    let n = params.n;
    let inertia = params.inertia_diag();
    let inv_l = params.inverse_inductance();
    let mut d_theta = gravity_gradient(&x.theta, params);
    let mut d_lp = vec![0.0; n];
    let mut d_p = vec![0.0; n];
    let mut d_phi = vec![0.0; n];
    let mut d_q = vec![0.0; n];
    for i in 0..n {
        let c = shapes[i].capacitance.total;
        let v = x.q[i] / c;
        // d(Q^2 / 2C)/dC = -V^2 / 2
        let half_v2 = 0.5 * v * v;
        d_theta[i] += params.torsion_kb[i] * x.theta[i] - half_v2 * shapes[i].partials.dcs_dtheta;
        d_lp[i] = 0.5 * params.spring_k[i] * (x.lp[i] - params.lp_rest) - half_v2 * shapes[i].partials.dcs_dlp;
        d_p[i] = x.p[i] / inertia[i];
        d_phi[i] = x.phi[i] * inv_l[i];
        d_q[i] = v;
    }
    Gradient { d_theta, d_lp, d_p, d_phi, d_q }
}

/// Angle-dependent input gain `gamma1 cos(gamma2 theta_i)`.
pub fn input_gain(theta: &[f64], params: &ActuatorParams) -> Vec<f64> {
    theta.iter().map(|t| params.gamma1 * (params.gamma2 * t).cos()).collect()
}

/// Diagonal of the volume coupling `2 A_s / l_p` between angular rate and
/// top-film elongation rate (m).
pub fn coupling_d(theta: &[f64], lp: &[f64], params: &ActuatorParams) -> Result<Vec<f64>, ModelError> {
    theta
        .iter()
        .zip(lp)
        .enumerate()
        .map(|(index, (&t, &l))| {
            geometry::shell_area(t, l, params)
                .map(|s| 2.0 * s.area / l)
                .map_err(|source| ModelError::Geometry { index, source })
        })
        .collect()
}

/// `H(x1) - H(x0)` evaluated term by term from differences, so that large
/// but slowly varying terms (the inductor flux) do not swamp the increment
/// with cancellation error.
pub fn energy_increment(
    x0: &State,
    x1: &State,
    params: &ActuatorParams,
    area_total: f64,
) -> Result<f64, ModelError> {
    let s0 = shapes(&x0.theta, &x0.lp, area_total, params)?;
    let s1 = shapes(&x1.theta, &x1.lp, area_total, params)?;
    Ok(energy_increment_with_shapes(x0, x1, &s0, &s1, params))
}

pub(crate) fn energy_increment_with_shapes(
    x0: &State,
    x1: &State,
    s0: &[SubsystemShape],
    s1: &[SubsystemShape],
    params: &ActuatorParams,
) -> f64 {
    let inertia = params.inertia_diag();
    let inv_l = params.inverse_inductance();
    let diff_sq = |a: f64, b: f64| (b - a) * (b + a);
    let mut dh = 0.0;
    for i in 0..params.n {
        dh += 0.5 * params.torsion_kb[i] * diff_sq(x0.theta[i], x1.theta[i]);
        let (e0, e1) = (x0.lp[i] - params.lp_rest, x1.lp[i] - params.lp_rest);
        dh += 0.25 * params.spring_k[i] * diff_sq(e0, e1);
        dh += 0.5 * diff_sq(x0.p[i], x1.p[i]) / inertia[i];
        dh += 0.5 * diff_sq(x0.phi[i], x1.phi[i]) * inv_l[i];
        let (c0, c1) = (s0[i].capacitance.total, s1[i].capacitance.total);
        dh += 0.5 * (diff_sq(x0.q[i], x1.q[i]) / c1 + x0.q[i] * x0.q[i] * (c0 - c1) / (c0 * c1));
    }
    dh + gravity_energy(&x1.theta, params) - gravity_energy(&x0.theta, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rest_area_total;

    fn setup() -> (ActuatorParams, f64) {
        let p = ActuatorParams::nominal();
        let at = rest_area_total(&p).unwrap();
        (p, at)
    }

    #[test]
    fn rest_state_has_zero_energy() {
        let (p, at) = setup();
        let e = total_energy(&State::rest(&p), &p, at).unwrap();
        assert_eq!(e.h_total, 0.0);
    }

    #[test]
    fn zero_state_energy_without_gravity() {
        // All-zero vectors except a positive film length at its rest value.
        let (p, at) = setup();
        let mut x = State::rest(&p);
        x.theta = vec![0.1; 4];
        let e = total_energy(&x, &p, at).unwrap();
        assert!((e.h_theta - 4.04e-3).abs() < 1e-15);
        assert_eq!(e.h_lp, 0.0);
        assert_eq!(e.h_q, 0.0);
    }

    #[test]
    fn gradient_without_charge_is_elastic() {
        let (p, at) = setup();
        let mut x = State::rest(&p);
        x.theta = vec![0.1, 0.2, 0.05, 0.3];
        x.lp = vec![0.0151, 0.0152, 0.01505, 0.0155];
        let g = grad_energy(&x, &p, at).unwrap();
        for i in 0..4 {
            assert!((g.d_theta[i] - 0.202 * x.theta[i]).abs() < 1e-16);
            assert!((g.d_lp[i] - 200.0 * (x.lp[i] - 0.015)).abs() < 1e-14);
        }
    }

    #[test]
    fn momentum_gradient_uses_diagonal_inertia() {
        let (p, at) = setup();
        let mut x = State::rest(&p);
        x.p[0] = 0.001;
        let g = grad_energy(&x, &p, at).unwrap();
        let inertia = p.inertia_diag();
        assert_eq!(g.d_p, vec![0.001 / inertia[0], 0.0, 0.0, 0.0]);
    }

    #[test]
    fn input_gain_examples() {
        let p = ActuatorParams::nominal();
        assert_eq!(input_gain(&[0.0], &p), vec![104.33]);
        let zero = std::f64::consts::PI / (2.0 * 7.67);
        assert!(input_gain(&[zero], &p)[0].abs() < 1e-12);
        assert!((input_gain(&[0.1], &p)[0] - 75.117_166_153_984_86).abs() < 1e-10);
    }

    #[test]
    fn coupling_examples() {
        let p = ActuatorParams::nominal();
        assert_eq!(coupling_d(&[0.0], &[0.015], &p).unwrap(), vec![0.0]);
        let d = coupling_d(&[0.1], &[0.015], &p).unwrap();
        assert!((d[0] - 7.487_506_248_512_111e-4).abs() < 1e-15);
        let d = coupling_d(&[0.0, 0.4, 1.2, 1.5], &[0.015, 0.0151, 0.016, 0.017], &p).unwrap();
        assert!(d.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn charge_energy_is_quadratic() {
        let (p, at) = setup();
        let mut x = State::rest(&p);
        x.theta = vec![0.1; 4];
        x.lp = vec![0.0151; 4];
        x.q = vec![1e-7, 2e-7, 3e-7, 4e-7];
        let e1 = total_energy(&x, &p, at).unwrap().h_q;
        x.q.iter_mut().for_each(|q| *q *= 2.0);
        let e2 = total_energy(&x, &p, at).unwrap().h_q;
        assert!((e2 / e1 - 4.0).abs() < 1e-14);
    }

    #[test]
    fn increment_matches_direct_difference() {
        let (p, at) = setup();
        let mut a = State::rest(&p);
        a.theta = vec![0.1, 0.12, 0.08, 0.1];
        a.lp = vec![0.01503; 4];
        a.q = vec![3e-7; 4];
        a.phi = vec![2.0; 4];
        a.p = vec![1e-6; 4];
        let mut b = a.clone();
        b.theta[1] += 1e-3;
        b.q[2] *= 1.01;
        b.phi[0] += 0.5;
        let direct = total_energy(&b, &p, at).unwrap().h_total - total_energy(&a, &p, at).unwrap().h_total;
        let inc = energy_increment(&a, &b, &p, at).unwrap();
        assert!((direct - inc).abs() < 1e-12 * direct.abs().max(1e-9));
    }

    #[test]
    fn flat_round_trip() {
        let p = ActuatorParams::nominal();
        let mut x = State::rest(&p);
        x.q[3] = 1.0;
        x.p[1] = -2.0;
        assert_eq!(State::from_flat(&x.to_flat(), 4), x);
    }
}
