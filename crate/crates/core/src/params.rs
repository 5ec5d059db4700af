//! Physical constants of the actuator and the per-subsystem parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::ParamError;

/// Actuator description: shared geometry plus one entry per subsystem for the
/// lumped electrical and mechanical elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorParams {
    /// Number of interconnected subsystems.
    pub n: usize,
    /// Rest length of the elongable top film (m).
    pub lp_rest: f64,
    /// Length of the bottom film (m).
    pub lv: f64,
    /// Electrode length (m).
    pub le: f64,
    /// Chamber height (m).
    pub xh: f64,
    /// Total mass (kg).
    pub mass: f64,
    pub eps_r: f64,
    /// Vacuum permittivity (F/m).
    pub eps_0: f64,
    /// Actuator width (m).
    pub width: f64,
    /// Film thickness (m).
    pub thickness: f64,
    /// Series resistance R_i (ohm); its inverse is the input conductance.
    pub resistance: Vec<f64>,
    /// Resistance of the inductor branch (ohm).
    pub r_l: Vec<f64>,
    /// Inductance of the drift branch (H).
    pub inductance: Vec<f64>,
    /// Linear spring of the top film (N/m).
    pub spring_k: Vec<f64>,
    /// Torsional spring of the bottom film (N m/rad).
    pub torsion_kb: Vec<f64>,
    /// Angular damping (N m s/rad).
    pub damping_b: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Gravitational acceleration (m/s^2).
    pub g_acc: f64,
    pub gravity_enabled: bool,
    /// Whether the drift branch `(phi, r_L, L)` is connected. When false the
    /// inverse inductance is taken as zero.
    #[serde(default = "default_true")]
    pub inductor_branch: bool,
    /// Angular inertia per subsystem (kg m^2). `None` selects uniform rods
    /// of length `lv + le` and mass `mass / n` rotating about their base.
    #[serde(default)]
    pub inertia: Option<Vec<f64>>,
    /// Admissible excursion of the raw zipped length outside `[0, le]` (m).
    pub le_tol: f64,
    /// Lower clamp of `1 - u^2` in the derivative of the shell half-angle.
    pub eps_sing: f64,
    /// Admissible excursion of the arcsine argument beyond one.
    pub asin_tol: f64,
}

impl ActuatorParams {
    /// Identified values of the four-subsystem prototype.
    pub fn nominal() -> Self {
        Self::nominal_with_n(4)
    }

    pub fn nominal_with_n(n: usize) -> Self {
        Self {
            n,
            lp_rest: 0.015,
            lv: 0.015,
            le: 0.015,
            xh: 0.002,
            mass: 0.047,
            eps_r: 2.2,
            eps_0: 8.854e-12,
            width: 0.05,
            thickness: 18e-6,
            resistance: vec![10.0; n],
            r_l: vec![20.0; n],
            inductance: vec![150.0; n],
            spring_k: vec![400.0; n],
            torsion_kb: vec![0.202; n],
            damping_b: vec![0.0199; n],
            gamma1: 104.33,
            gamma2: 7.67,
            g_acc: 9.81,
            gravity_enabled: false,
            inductor_branch: true,
            inertia: None,
            le_tol: 1e-9,
            eps_sing: 1e-9,
            asin_tol: 1e-12,
        }
    }

    /// Length of one link of the chain (m).
    pub fn link_length(&self) -> f64 {
        self.lv + self.le
    }

    pub fn link_mass(&self) -> f64 {
        self.mass / self.n as f64
    }

    /// Diagonal of the inertia matrix.
    pub fn inertia_diag(&self) -> Vec<f64> {
        match &self.inertia {
            Some(v) => v.clone(),
            None => {
                let l = self.link_length();
                vec![self.link_mass() * l * l / 3.0; self.n]
            }
        }
    }

    /// Diagonal of `L^-1`, zero when the drift branch is disconnected.
    pub fn inverse_inductance(&self) -> Vec<f64> {
        if self.inductor_branch {
            self.inductance.iter().map(|l| 1.0 / l).collect()
        } else {
            vec![0.0; self.n]
        }
    }

    pub fn conductance(&self) -> Vec<f64> {
        self.resistance.iter().map(|r| 1.0 / r).collect()
    }

    /// `eps_0 * eps_r * w`, the permittivity-width product shared by both capacitors.
    pub fn permittivity_width(&self) -> f64 {
        self.eps_0 * self.eps_r * self.width
    }

    /// Checks positivity and vector lengths.
    pub fn validate(&self) -> Result<(), ParamError> {
        if self.n == 0 {
            return Err(ParamError::ZeroSubsystems);
        }
        let scalars = [
            ("lp_rest", self.lp_rest),
            ("lv", self.lv),
            ("le", self.le),
            ("xh", self.xh),
            ("mass", self.mass),
            ("eps_r", self.eps_r),
            ("eps_0", self.eps_0),
            ("width", self.width),
            ("thickness", self.thickness),
            ("le_tol", self.le_tol),
            ("eps_sing", self.eps_sing),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v > 0.0) {
                return Err(ParamError::NotPositive { name, value: v });
            }
        }
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("g_acc", self.g_acc)] {
            if !v.is_finite() {
                return Err(ParamError::NotFinite { name, value: v });
            }
        }
        if !(self.asin_tol.is_finite() && self.asin_tol >= 0.0) {
            return Err(ParamError::NotPositive { name: "asin_tol", value: self.asin_tol });
        }
        let mut vectors: Vec<(&'static str, &[f64], bool)> = vec![
            ("resistance", &self.resistance, true),
            ("r_l", &self.r_l, false),
            ("inductance", &self.inductance, true),
            ("spring_k", &self.spring_k, false),
            ("torsion_kb", &self.torsion_kb, false),
            ("damping_b", &self.damping_b, false),
        ];
        if let Some(i) = &self.inertia {
            vectors.push(("inertia", i, true));
        }
        for (name, v, strict) in vectors {
            if v.len() != self.n {
                return Err(ParamError::Length { name, expected: self.n, found: v.len() });
            }
            for &x in v {
                let ok = x.is_finite() && if strict { x > 0.0 } else { x >= 0.0 };
                if !ok {
                    return Err(ParamError::NotPositive { name, value: x });
                }
            }
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

impl Default for ActuatorParams {
    fn default() -> Self {
        Self::nominal()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values_validate() {
        let p = ActuatorParams::nominal();
        p.validate().unwrap();
        assert_eq!(p.n, 4);
        assert_eq!(p.gamma1, 104.33);
        assert_eq!(p.gamma2, 7.67);
        assert_eq!(p.torsion_kb, vec![0.202; 4]);
        assert_eq!(p.damping_b, vec![0.0199; 4]);
        assert_eq!(p.inductance, vec![150.0; 4]);
    }

    #[test]
    fn default_inertia_is_uniform_rod() {
        let p = ActuatorParams::nominal();
        let i = p.inertia_diag();
        assert!((i[0] - 0.047 / 4.0 * 0.03 * 0.03 / 3.0).abs() < 1e-20);
    }

    #[test]
    fn rejects_bad_lengths_and_signs() {
        let mut p = ActuatorParams::nominal();
        p.resistance.pop();
        assert!(matches!(p.validate(), Err(ParamError::Length { name: "resistance", .. })));
        let mut p = ActuatorParams::nominal();
        p.inductance[2] = 0.0;
        assert!(p.validate().is_err());
        let mut p = ActuatorParams::nominal();
        p.n = 0;
        assert_eq!(p.validate(), Err(ParamError::ZeroSubsystems));
    }
}
