//! Shell geometry of one subsystem: the shell area set by the bend angle and
//! top-film length, the zipped electrode length implied by volume
//! conservation, the resulting capacitance, and the kinematics of the chain.
//!
//! The chamber is a rectangle of height `xh` and the shell two symmetric
//! triangles, so the fluid area `A_T = A_s + xh (le - l_e)` is constant.

use std::f64::consts::PI;

use crate::error::GeometryError;
use crate::params::ActuatorParams;

/// Shell area together with the half-angle it was computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShellArea {
    pub area: f64,
    pub delta1: f64,
}

/// Zipped electrode length, both as computed and clamped to `[0, le]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZippedLength {
    pub raw: f64,
    pub clamped: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capacitance {
    /// Zipped part.
    pub c1: f64,
    /// Unzipped part.
    pub c2: f64,
    pub total: f64,
}

/// Partial derivatives of the zipped length, shell area and capacitance
/// with respect to the bend angle and the top-film length.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeometryPartials {
    pub dle_dtheta: f64,
    pub dle_dlp: f64,
    pub das_dtheta: f64,
    pub das_dlp: f64,
    pub dcs_dtheta: f64,
    pub dcs_dlp: f64,
}

/// Full geometric state of one subsystem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsystemShape {
    pub theta: f64,
    pub lp: f64,
    pub delta1: f64,
    pub shell_area: f64,
    pub area_total: f64,
    pub zipped: ZippedLength,
    pub capacitance: Capacitance,
    pub partials: GeometryPartials,
}

fn asin_argument(theta: f64, lp: f64, params: &ActuatorParams) -> Result<f64, GeometryError> {
    if !(lp > 0.0) {
        return Err(GeometryError::NonPositiveLength { lp });
    }
    let u = params.lv / lp * ((PI - theta) / 2.0).sin();
    if !u.is_finite() || u.abs() > 1.0 + params.asin_tol {
        return Err(GeometryError::Domain { theta, lp, arg: u });
    }
    Ok(u.clamp(-1.0, 1.0))
}

/// Shell cross-section area and half-angle for bend angle `theta` and top-film
/// length `lp`.
pub fn shell_area(theta: f64, lp: f64, params: &ActuatorParams) -> Result<ShellArea, GeometryError> {
    let u = asin_argument(theta, lp, params)?;
    let delta1 = (PI + theta) / 2.0 - u.asin();
    let area = 0.25 * lp * params.lv * delta1.sin();
    Ok(ShellArea { area, delta1 })
}

/// Conserved fluid area of the rest configuration (`theta = 0`, `lp = lp_rest`,
/// electrodes fully unzipped).
pub fn rest_area_total(params: &ActuatorParams) -> Result<f64, GeometryError> {
    let rest = shell_area(0.0, params.lp_rest, params)?;
    Ok(rest.area + params.xh * params.le)
}

fn zipped_from_area(shell: f64, area_total: f64, params: &ActuatorParams) -> Result<ZippedLength, GeometryError> {
    let raw = params.le - (area_total - shell) / params.xh;
    if !raw.is_finite() || raw < -params.le_tol || raw > params.le + params.le_tol {
        return Err(GeometryError::ZippedLength { raw, max: params.le });
    }
    Ok(ZippedLength { raw, clamped: raw.clamp(0.0, params.le) })
}

/// Zipped electrode length from volume conservation.
pub fn zipped_length(
    theta: f64,
    lp: f64,
    area_total: f64,
    params: &ActuatorParams,
) -> Result<ZippedLength, GeometryError> {
    let shell = shell_area(theta, lp, params)?;
    zipped_from_area(shell.area, area_total, params)
}

/// Parallel capacitance of the zipped and unzipped electrode portions.
/// Callers pass a zipped length already restricted to `[0, le]`.
pub fn capacitance(le_zipped: f64, params: &ActuatorParams) -> Capacitance {
    let ew = params.permittivity_width();
    let c1 = ew * le_zipped / (2.0 * params.thickness);
    let c2 = ew * (params.le - le_zipped) / (2.0 * params.thickness + params.xh);
    Capacitance { c1, c2, total: c1 + c2 }
}

/// Slope of the total capacitance in the zipped length (F/m); constant
/// because both capacitors are linear in `l_e`.
pub fn capacitance_slope(params: &ActuatorParams) -> f64 {
    let ew = params.permittivity_width();
    ew / (2.0 * params.thickness) - ew / (2.0 * params.thickness + params.xh)
}

/// Analytic partial derivatives of the zipped length, shell area and
/// capacitance. Near the rest singularity (`u -> 1`) the factor
/// `1/sqrt(1 - u^2)` is evaluated as `1/sqrt(max(1 - u^2, eps_sing))`.
pub fn geometry_partials(
    theta: f64,
    lp: f64,
    area_total: f64,
    params: &ActuatorParams,
) -> Result<GeometryPartials, GeometryError> {
    Ok(evaluate(theta, lp, area_total, params)?.partials)
}

/// Evaluates every geometric quantity of one subsystem at once.
pub fn evaluate(
    theta: f64,
    lp: f64,
    area_total: f64,
    params: &ActuatorParams,
) -> Result<SubsystemShape, GeometryError> {
    let u = asin_argument(theta, lp, params)?;
    let half = (PI - theta) / 2.0;
    let (sin_half, cos_half) = half.sin_cos();
    let delta1 = (PI + theta) / 2.0 - u.asin();
    let (sin_d, cos_d) = delta1.sin_cos();
    let lv = params.lv;
    let shell = 0.25 * lp * lv * sin_d;
    let zipped = zipped_from_area(shell, area_total, params)?;
    let capacitance = capacitance(zipped.clamped, params);

    let inv_root = 1.0 / (1.0 - u * u).max(params.eps_sing).sqrt();
    let dd_dtheta = 0.5 + 0.5 * (lv / lp) * cos_half * inv_root;
    let dd_dlp = (lv / (lp * lp)) * sin_half * inv_root;
    let das_dtheta = 0.25 * lp * lv * cos_d * dd_dtheta;
    let das_dlp = 0.25 * lv * sin_d + 0.25 * lp * lv * cos_d * dd_dlp;
    let dle_dtheta = das_dtheta / params.xh;
    let dle_dlp = das_dlp / params.xh;
    let slope = capacitance_slope(params);

    Ok(SubsystemShape {
        theta,
        lp,
        delta1,
        shell_area: shell,
        area_total,
        zipped,
        capacitance,
        partials: GeometryPartials {
            dle_dtheta,
            dle_dlp,
            das_dtheta,
            das_dlp,
            dcs_dtheta: slope * dle_dtheta,
            dcs_dlp: slope * dle_dlp,
        },
    })
}

/// Horizontal displacement of the chain tip (m).
pub fn endpoint_position(theta: &[f64], params: &ActuatorParams) -> f64 {
    let mut cumulative = 0.0;
    let mut sum = 0.0;
    for &t in theta {
        cumulative += t;
        sum += cumulative.sin();
    }
    params.link_length() * sum
}

/// Gradient of [`endpoint_position`] with respect to each joint angle.
pub fn endpoint_gradient(theta: &[f64], params: &ActuatorParams) -> Vec<f64> {
    let n = theta.len();
    let mut cos_abs = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    for &t in theta {
        cumulative += t;
        cos_abs.push(cumulative.cos());
    }
    // d h / d theta_j = l * sum_{i >= j} cos(Theta_i)
    let mut grad = vec![0.0; n];
    let mut tail = 0.0;
    for j in (0..n).rev() {
        tail += cos_abs[j];
        grad[j] = params.link_length() * tail;
    }
    grad
}

/// Heights of the link midpoints for the hanging chain, with the Jacobian
/// `dz[i][j] = d z_i / d theta_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterOfMassHeights {
    pub z: Vec<f64>,
    pub dz: Vec<Vec<f64>>,
}

/// Midpoint heights `z_i = -l [sum_{k<i} cos(Theta_k) + cos(Theta_i)/2]`
/// where `Theta_i` is the absolute angle of link `i`.
pub fn center_of_mass_heights(theta: &[f64], params: &ActuatorParams) -> CenterOfMassHeights {
    let n = theta.len();
    let l = params.link_length();
    let mut abs_angle = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    for &t in theta {
        cumulative += t;
        abs_angle.push(cumulative);
    }
    let mut z = Vec::with_capacity(n);
    let mut dz = vec![vec![0.0; n]; n];
    let mut cos_prefix = 0.0;
    let mut sin_prefix = vec![0.0; n + 1];
    for i in 0..n {
        sin_prefix[i + 1] = sin_prefix[i] + abs_angle[i].sin();
    }
    for i in 0..n {
        let (s, c) = abs_angle[i].sin_cos();
        z.push(-l * (cos_prefix + 0.5 * c));
        cos_prefix += c;
        // Theta_k depends on theta_j for j <= k.
        for (j, entry) in dz[i].iter_mut().enumerate().take(i + 1) {
            *entry = l * ((sin_prefix[i] - sin_prefix[j]) + 0.5 * s);
        }
    }
    CenterOfMassHeights { z, dz }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> ActuatorParams {
        ActuatorParams::nominal()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn shell_area_examples() {
        let s = shell_area(0.0, 0.015, &p()).unwrap();
        assert!(s.delta1.abs() < 1e-7);
        assert!(s.area.abs() < 1e-12);

        let s = shell_area(0.1, 0.015, &p()).unwrap();
        assert!((s.delta1 - 0.1).abs() < 1e-12);
        assert!(rel(s.area, 5.615_629_686_384_08e-6) < 1e-10);

        let s = shell_area(0.0, 0.016, &p()).unwrap();
        assert!(rel(s.delta1, 0.355_421_201_690_223_5) < 1e-12);
        assert!(rel(s.area, 2.087_911_636_061_258e-5) < 1e-12);
    }

    #[test]
    fn shell_area_domain_error() {
        // l_p well below L_v pushes the arcsine argument past one.
        let err = shell_area(0.0, 0.014, &p()).unwrap_err();
        assert!(matches!(err, GeometryError::Domain { .. }));
        // Inside the tolerance the argument is clamped.
        let lp = 0.015 * (1.0 - 1e-14);
        assert!(shell_area(0.0, lp, &p()).is_ok());
        assert!(shell_area(0.1, -1.0, &p()).is_err());
    }

    #[test]
    fn zipped_length_examples() {
        let z = zipped_length(0.0, 0.015, 3.0e-5, &p()).unwrap();
        assert!(z.raw.abs() < 1e-12);
        let z = zipped_length(0.1, 0.015, 3.0e-5, &p()).unwrap();
        assert!(rel(z.raw, 2.807_814_843_192_042e-3) < 1e-10);
        assert_eq!(z.raw, z.clamped);
        let err = zipped_length(0.1, 0.015, 0.0, &p()).unwrap_err();
        assert!(matches!(err, GeometryError::ZippedLength { .. }));
    }

    #[test]
    fn zipped_length_clamps_within_tolerance() {
        // A_T slightly above the rest value makes the raw length marginally negative.
        let z = zipped_length(0.0, 0.015, 3.0e-5 + 1e-13, &p()).unwrap();
        assert!(z.raw < 0.0);
        assert_eq!(z.clamped, 0.0);
    }

    #[test]
    fn capacitance_examples() {
        let c = capacitance(0.0, &p());
        assert_eq!(c.c1, 0.0);
        assert!(rel(c.c2, 7.175_392_927_308_448e-12) < 1e-12);

        let c = capacitance(2.807_814_843_192_042e-3, &p());
        assert!(rel(c.c1, 7.596_231_078_829_048e-11) < 1e-12);
        assert!(rel(c.c2, 5.832_247_942_839_658e-12) < 1e-12);
        assert!(rel(c.total, 8.179_455_873_113_013e-11) < 1e-12);

        let c = capacitance(0.015, &p());
        assert_eq!(c.c2, 0.0);
        assert!(rel(c.c1, 4.058_083_333_333_333e-10) < 1e-12);
    }

    #[test]
    fn partials_match_finite_differences() {
        let params = p();
        let at = rest_area_total(&params).unwrap();
        for &(theta, lp) in &[(0.1, 0.015), (0.3, 0.0155), (0.05, 0.0152), (0.2, 0.0151)] {
            let g = geometry_partials(theta, lp, at, &params).unwrap();
            let step = 1e-7;
            let f = |t: f64, l: f64| evaluate(t, l, at, &params).unwrap();
            let (tp, tm) = (f(theta + step, lp), f(theta - step, lp));
            let hl = step * lp;
            let (lpp, lpm) = (f(theta, lp + hl), f(theta, lp - hl));
            let fd = |a: f64, b: f64, h: f64| (a - b) / (2.0 * h);
            let checks = [
                (g.dle_dtheta, fd(tp.zipped.raw, tm.zipped.raw, step)),
                (g.das_dtheta, fd(tp.shell_area, tm.shell_area, step)),
                (g.dcs_dtheta, fd(tp.capacitance.total, tm.capacitance.total, step)),
                (g.dle_dlp, fd(lpp.zipped.raw, lpm.zipped.raw, hl)),
                (g.das_dlp, fd(lpp.shell_area, lpm.shell_area, hl)),
                (g.dcs_dlp, fd(lpp.capacitance.total, lpm.capacitance.total, hl)),
            ];
            for (analytic, numeric) in checks {
                assert!(rel(analytic, numeric) < 1e-6, "{theta} {lp}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn partials_finite_at_rest_singularity() {
        let params = p();
        let at = rest_area_total(&params).unwrap();
        let g = geometry_partials(0.0, 0.015, at, &params).unwrap();
        for v in [g.dle_dtheta, g.dle_dlp, g.das_dtheta, g.das_dlp, g.dcs_dtheta, g.dcs_dlp] {
            assert!(v.is_finite());
        }
        let slope = capacitance_slope(&params);
        assert!((g.dcs_dtheta - slope * g.dle_dtheta).abs() < 1e-30);
        let ew = params.permittivity_width();
        assert!(rel(slope, ew / 36e-6 - ew / (36e-6 + 0.002)) < 1e-14);
    }

    #[test]
    fn endpoint_examples() {
        let params = p();
        assert_eq!(endpoint_position(&[0.0; 4], &params), 0.0);
        assert!(rel(endpoint_position(&[0.05; 4], &params), 0.014_937_601_475_585_008) < 1e-12);
        assert!((endpoint_position(&[0.067_170_291_211_500_04; 4], &params) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn endpoint_gradient_matches_finite_differences() {
        let params = p();
        let th = [0.1, -0.2, 0.3, 0.05];
        let g = endpoint_gradient(&th, &params);
        for j in 0..4 {
            let mut a = th;
            let mut b = th;
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (endpoint_position(&a, &params) - endpoint_position(&b, &params)) / 2e-6;
            assert!(rel(g[j], fd) < 1e-8);
        }
    }

    #[test]
    fn com_heights_examples() {
        let params = p();
        let l = params.link_length();
        let c = center_of_mass_heights(&[0.0; 4], &params);
        for (i, z) in c.z.iter().enumerate() {
            assert!((z + l * (i as f64 + 0.5)).abs() < 1e-15);
        }
        let c = center_of_mass_heights(&[PI / 2.0, 0.0, 0.0, 0.0], &params);
        assert!(c.z[0].abs() < 1e-15);
    }

    #[test]
    fn com_jacobian_matches_finite_differences() {
        let params = p();
        let th = [0.3, 0.1, -0.2, 0.4];
        let c = center_of_mass_heights(&th, &params);
        for j in 0..4 {
            let mut a = th;
            let mut b = th;
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let za = center_of_mass_heights(&a, &params).z;
            let zb = center_of_mass_heights(&b, &params).z;
            for i in 0..4 {
                let fd = (za[i] - zb[i]) / 2e-6;
                assert!((c.dz[i][j] - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "{i},{j}");
            }
        }
    }
}
