//! Invariant checks shared by the `verify` command and the test suites.

use rand::rngs::ChaCha8Rng;
use rand::{RngExt, SeedableRng};

use crate::control::{matching_residual, ControllerGains, EquilibriumTarget};
use crate::dynamics::PhModel;
use crate::error::ModelError;
use crate::hamiltonian::{State, BLOCKS};

/// Bend angles and film lengths sampled for random states.
pub const THETA_RANGE: (f64, f64) = (0.02, 1.0);
pub const LP_SPAN: f64 = 0.1;
/// States whose shell arcsine argument exceeds `1 - SINGULAR_MARGIN` are
/// skipped (the derivative there is regularized).
pub const SINGULAR_MARGIN: f64 = 1e-4;
/// Zipped lengths within this fraction of `0` or `le` are skipped so that
/// difference stencils stay inside the validity region.
pub const EDGE_MARGIN: f64 = 1e-3;

fn asin_argument(theta: f64, lp: f64, model: &PhModel) -> f64 {
    model.params().lv / lp * ((std::f64::consts::PI - theta) / 2.0).sin()
}

/// Random admissible state: geometry inside the validity region and away
/// from the rest singularity. Angular rates are drawn with magnitude in
/// `omega_range`, with random sign.
pub fn random_state(model: &PhModel, rng: &mut ChaCha8Rng, omega_range: (f64, f64)) -> State {
    let p = model.params();
    let n = p.n;
    loop {
        let theta: Vec<f64> = (0..n).map(|_| rng.random_range(THETA_RANGE.0..THETA_RANGE.1)).collect();
        let lp: Vec<f64> = (0..n).map(|_| p.lp_rest * (1.0 + rng.random_range(0.0..LP_SPAN))).collect();
        if (0..n).any(|i| asin_argument(theta[i], lp[i], model) > 1.0 - SINGULAR_MARGIN) {
            continue;
        }
        let inertia = model.inertia();
        let x = State {
            p: (0..n)
                .map(|i| {
                    let w = rng.random_range(omega_range.0..=omega_range.1);
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    sign * w * inertia[i]
                })
                .collect(),
            phi: (0..n).map(|_| rng.random_range(-5e4..5e4)).collect(),
            q: (0..n).map(|_| rng.random_range(-2e-6..2e-6)).collect(),
            theta,
            lp,
        };
        let le = p.le;
        let inside = |z: f64| z >= EDGE_MARGIN * le && z <= (1.0 - EDGE_MARGIN) * le;
        if model.shapes(&x).is_ok_and(|s| s.iter().all(|s| inside(s.zipped.raw))) {
            return x;
        }
    }
}

pub fn random_states(model: &PhModel, count: usize, seed: u64, omega_range: (f64, f64)) -> Vec<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_state(model, &mut rng, omega_range)).collect()
}

/// Energy terms that depend on coordinates of `block`. The kinetic and
/// flux terms differ from the rest by many orders of magnitude, so each is
/// differenced on its own.
fn block_energy(e: &crate::hamiltonian::EnergyBreakdown, block: usize) -> f64 {
    match block {
        2 => e.h_p,
        3 => e.h_phi,
        _ => e.h_theta + e.h_lp + e.h_g + e.h_q,
    }
}

/// Largest relative error, per block, between the analytic gradient and
/// fourth-order central differences of `H`.
pub fn gradient_error(model: &PhModel, x: &State) -> Result<[f64; BLOCKS], ModelError> {
    let n = model.n();
    let analytic = model.gradient(x)?.to_flat();
    let flat = x.to_flat();
    let mut fd = vec![0.0; flat.len()];
    let scale = [0.1, model.params().lp_rest, 1e-9, 1e3, 1e-7];
    let eval = |k: usize, offset: f64, block: usize| -> Result<f64, ModelError> {
        let mut y = flat.clone();
        y[k] += offset;
        Ok(block_energy(&model.energy(&State::from_flat(&y, n))?, block))
    };
    for k in 0..flat.len() {
        let block = k / n;
        let h = 1e-5 * flat[k].abs().max(scale[block]);
        let (p1, m1) = (eval(k, h, block)?, eval(k, -h, block)?);
        let (p2, m2) = (eval(k, 2.0 * h, block)?, eval(k, -2.0 * h, block)?);
        fd[k] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    }
    let mut out = [0.0; BLOCKS];
    for (b, slot) in out.iter_mut().enumerate() {
        let r = b * n..(b + 1) * n;
        let diff = r.clone().map(|k| (analytic[k] - fd[k]).powi(2)).sum::<f64>().sqrt();
        let norm = r.map(|k| analytic[k].powi(2)).sum::<f64>().sqrt();
        *slot = if norm > 0.0 { diff / norm } else { diff };
    }
    Ok(out)
}

/// Exact skew symmetry of `J`, non-negative diagonal `R` with zero
/// off-diagonal, and the smallest `v' R v / |v|^2` over random `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureCheck {
    pub skew_exact: bool,
    pub r_diagonal_nonnegative: bool,
    pub min_quadratic_form: f64,
}

impl StructureCheck {
    pub fn passed(&self) -> bool {
        self.skew_exact && self.r_diagonal_nonnegative && self.min_quadratic_form >= 0.0
    }
}

pub fn structure_check(model: &PhModel, x: &State, vectors: usize, seed: u64) -> Result<StructureCheck, ModelError> {
    let s = model.structure(x)?;
    let dim = s.j.nrows();
    let skew_exact = (0..dim).all(|i| (0..dim).all(|k| s.j[(i, k)] == -s.j[(k, i)]));
    let r_diagonal_nonnegative =
        (0..dim).all(|i| (0..dim).all(|k| if i == k { s.r[(i, k)] >= 0.0 } else { s.r[(i, k)] == 0.0 }));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_q = f64::INFINITY;
    for _ in 0..vectors {
        let v = nalgebra::DVector::<f64>::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let q = v.dot(&(&s.r * &v)) / v.norm_squared();
        min_q = min_q.min(q);
    }
    Ok(StructureCheck { skew_exact, r_diagonal_nonnegative, min_quadratic_form: min_q })
}

/// Largest scaled matching residual over random states with
/// `|M^-1 p| >= 1e-3`.
pub fn matching_check(
    model: &PhModel,
    target: &EquilibriumTarget,
    gains: &ControllerGains,
    count: usize,
    seed: u64,
) -> Result<f64, crate::error::ControlError> {
    let mut worst = 0.0f64;
    for x in random_states(model, count, seed, (1e-3, 10.0)) {
        let r = matching_residual(&x, target, gains, model)?;
        worst = r.iter().fold(worst, |m, v| m.max(v.abs()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ActuatorParams;

    #[test]
    fn random_states_are_admissible_and_reproducible() {
        let m = PhModel::new(ActuatorParams::nominal()).unwrap();
        let a = random_states(&m, 20, 3, (1e-3, 1.0));
        let b = random_states(&m, 20, 3, (1e-3, 1.0));
        assert_eq!(a, b);
        for x in &a {
            assert!(m.shapes(x).is_ok());
            for i in 0..4 {
                let w = x.p[i] / m.inertia()[i];
                assert!(w.abs() >= 1e-3 && w.abs() <= 1.0);
            }
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let m = PhModel::new(ActuatorParams::nominal()).unwrap();
        for x in random_states(&m, 10, 1, (1e-3, 1.0)) {
            let e = gradient_error(&m, &x).unwrap();
            assert!(e.iter().all(|v| *v < 1e-6), "{e:?}");
        }
    }
}
