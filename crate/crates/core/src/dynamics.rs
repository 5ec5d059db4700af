//! Open-loop vector field `x' = (J - R) grad H + g (U + d_a) + d_u`, its
//! power-conjugate output, external forcing and trajectory recording.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, ParamError, SolverError};
use crate::geometry::{self, SubsystemShape};
use crate::hamiltonian::{self, EnergyBreakdown, Gradient, State, BLOCKS};
use crate::params::ActuatorParams;
use crate::solver::{self, OdeSystem, SolverSettings, SolverStats, Stop};

/// Actuator model with the conserved fluid area fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct PhModel {
    params: ActuatorParams,
    area_total: f64,
    inertia: Vec<f64>,
    inv_l: Vec<f64>,
    conductance: Vec<f64>,
}

/// Power flows at one instant (W).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PowerFlow {
    pub output_current: f64,
    /// `i_e (U + d_a)`.
    pub supply_electrical: f64,
    /// `omega . d_u`.
    pub supply_mechanical: f64,
    /// `sum b omega^2`.
    pub dissipation_mechanical: f64,
    /// `sum r_L i_L^2 + R^-1 V^2`.
    pub dissipation_electrical: f64,
}

impl PowerFlow {
    pub fn supply(&self) -> f64 {
        self.supply_electrical + self.supply_mechanical
    }

    pub fn dissipation(&self) -> f64 {
        self.dissipation_mechanical + self.dissipation_electrical
    }
}

impl PhModel {
    /// Model whose conserved area is that of the rest configuration.
    pub fn new(params: ActuatorParams) -> Result<Self, ModelError> {
        params.validate()?;
        let area_total =
            geometry::rest_area_total(&params).map_err(|source| ModelError::Geometry { index: 0, source })?;
        Self::with_area_total(params, area_total)
    }

    pub fn with_area_total(params: ActuatorParams, area_total: f64) -> Result<Self, ModelError> {
        params.validate()?;
        if !(area_total.is_finite() && area_total > 0.0) {
            return Err(ParamError::NotPositive { name: "area_total", value: area_total }.into());
        }
        Ok(Self {
            inertia: params.inertia_diag(),
            inv_l: params.inverse_inductance(),
            conductance: params.conductance(),
            area_total,
            params,
        })
    }

    pub fn params(&self) -> &ActuatorParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn area_total(&self) -> f64 {
        self.area_total
    }

    pub fn inertia(&self) -> &[f64] {
        &self.inertia
    }

    pub fn inverse_inductance(&self) -> &[f64] {
        &self.inv_l
    }

    pub fn conductance(&self) -> &[f64] {
        &self.conductance
    }

    pub fn shapes(&self, x: &State) -> Result<Vec<SubsystemShape>, ModelError> {
        x.check(self.n())?;
        hamiltonian::shapes(&x.theta, &x.lp, self.area_total, &self.params)
    }

    pub fn energy(&self, x: &State) -> Result<EnergyBreakdown, ModelError> {
        hamiltonian::total_energy(x, &self.params, self.area_total)
    }

    pub fn gradient(&self, x: &State) -> Result<Gradient, ModelError> {
        hamiltonian::grad_energy(x, &self.params, self.area_total)
    }

    pub fn endpoint(&self, x: &State) -> f64 {
        geometry::endpoint_position(&x.theta, &self.params)
    }

    /// `i_e = (R^-1 ga)^T C^-1 Q`.
    pub fn output_current(&self, x: &State) -> Result<f64, ModelError> {
        let shapes = self.shapes(x)?;
        let ga = hamiltonian::input_gain(&x.theta, &self.params);
        Ok((0..self.n()).map(|i| self.conductance[i] * ga[i] * x.q[i] / shapes[i].capacitance.total).sum())
    }

    /// Time derivative of the state.
    pub fn rhs(&self, x: &State, u: f64, dist: &DisturbanceSample) -> Result<State, ModelError> {
        x.check(self.n())?;
        let flat = x.to_flat();
        let mut dx = vec![0.0; flat.len()];
        self.rates(&flat, u, dist.d_a, &dist.d_u, &mut dx)?;
        Ok(State::from_flat(&dx, self.n()))
    }

    /// Flat-slice form of [`PhModel::rhs`]: `x` and `dx` hold the stacked
    /// blocks `[theta, l_p, p, phi, Q]`. `d_u` is empty or has `n` entries.
    pub fn rates(&self, x: &[f64], u: f64, d_a: f64, d_u: &[f64], dx: &mut [f64]) -> Result<PowerFlow, ModelError> {
        let n = self.n();
        let p = &self.params;
        let grav = if p.gravity_enabled { hamiltonian::gravity_gradient(&x[..n], p) } else { Vec::new() };
        let drive = u + d_a;
        let mut flow = PowerFlow::default();
        for i in 0..n {
            let (theta, lp, mom, phi, q) = (x[i], x[n + i], x[2 * n + i], x[3 * n + i], x[4 * n + i]);
            let s = geometry::evaluate(theta, lp, self.area_total, p)
                .map_err(|source| ModelError::Geometry { index: i, source })?;
            let v = q / s.capacitance.total;
            let half_v2 = 0.5 * v * v;
            let mut d_theta = p.torsion_kb[i] * theta - half_v2 * s.partials.dcs_dtheta;
            if !grav.is_empty() {
                d_theta += grav[i];
            }
            let d_lp = 0.5 * p.spring_k[i] * (lp - p.lp_rest) - half_v2 * s.partials.dcs_dlp;
            let omega = mom / self.inertia[i];
            let i_l = phi * self.inv_l[i];
            let d = 2.0 * s.shell_area / lp;
            let g = self.conductance[i];
            let ga = p.gamma1 * (p.gamma2 * theta).cos();
            let du = d_u.get(i).copied().unwrap_or(0.0);
            dx[i] = omega;
            dx[n + i] = d * omega;
            dx[2 * n + i] = -d_theta - d * d_lp - p.damping_b[i] * omega + du;
            dx[3 * n + i] = -p.r_l[i] * i_l + v;
            dx[4 * n + i] = -i_l - g * v + g * ga * drive;
            flow.output_current += g * ga * v;
            flow.supply_mechanical += omega * du;
            flow.dissipation_mechanical += p.damping_b[i] * omega * omega;
            flow.dissipation_electrical += p.r_l[i] * i_l * i_l + g * v * v;
        }
        flow.supply_electrical = flow.output_current * drive;
        Ok(flow)
    }

    /// Interconnection, dissipation and input matrices at `x`.
    pub fn structure(&self, x: &State) -> Result<PhStructure, ModelError> {
        let n = self.n();
        x.check(n)?;
        let d = hamiltonian::coupling_d(&x.theta, &x.lp, &self.params)?;
        let ga = hamiltonian::input_gain(&x.theta, &self.params);
        let dim = BLOCKS * n;
        let (th, lp, pp, ph, qq) = (0, n, 2 * n, 3 * n, 4 * n);
        let mut j = DMatrix::zeros(dim, dim);
        let mut r = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        let mut g_u = DMatrix::zeros(dim, n);
        for i in 0..n {
            j[(th + i, pp + i)] = 1.0;
            j[(pp + i, th + i)] = -1.0;
            j[(lp + i, pp + i)] = d[i];
            j[(pp + i, lp + i)] = -d[i];
            j[(ph + i, qq + i)] = 1.0;
            j[(qq + i, ph + i)] = -1.0;
            r[(pp + i, pp + i)] = self.params.damping_b[i];
            r[(ph + i, ph + i)] = self.params.r_l[i];
            r[(qq + i, qq + i)] = self.conductance[i];
            g[qq + i] = self.conductance[i] * ga[i];
            g_u[(pp + i, i)] = 1.0;
        }
        Ok(PhStructure { j, r, g, g_u })
    }

    /// Advances the state by `h` with Strang splitting: half a step of the
    /// mechanics (RK4, charges and fluxes frozen), an exact step of the
    /// affine electrical pair at frozen geometry, then the second half of
    /// the mechanics. `energy` accumulates `[supply, dissipation]` in joules.
    pub fn split_step(
        &self,
        y: &mut [f64],
        u: f64,
        d_a: f64,
        d_u: &[f64],
        h: f64,
        energy: &mut [f64; 2],
    ) -> Result<(), ModelError> {
        self.mechanical_substep(y, d_u, 0.5 * h, energy)?;
        self.electrical_substep(y, u + d_a, h, energy)?;
        self.mechanical_substep(y, d_u, 0.5 * h, energy)
    }

    fn mechanical_substep(&self, y: &mut [f64], d_u: &[f64], h: f64, energy: &mut [f64; 2]) -> Result<(), ModelError> {
        let n = self.n();
        let m = 3 * n;
        let mut k = [vec![0.0; BLOCKS * n], vec![0.0; BLOCKS * n], vec![0.0; BLOCKS * n], vec![0.0; BLOCKS * n]];
        let mut pw = [[0.0; 2]; 4];
        let mut tmp = y.to_vec();
        let weights = [0.0, 0.5, 0.5, 1.0];
        for s in 0..4 {
            if s > 0 {
                for i in 0..m {
                    tmp[i] = y[i] + weights[s] * h * k[s - 1][i];
                }
            }
            let f = self.rates(&tmp, 0.0, 0.0, d_u, &mut k[s])?;
            pw[s] = [f.supply_mechanical, f.dissipation_mechanical];
        }
        for i in 0..m {
            y[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
        for c in 0..2 {
            energy[c] += h / 6.0 * (pw[0][c] + 2.0 * pw[1][c] + 2.0 * pw[2][c] + pw[3][c]);
        }
        Ok(())
    }

    fn electrical_substep(&self, y: &mut [f64], drive: f64, h: f64, energy: &mut [f64; 2]) -> Result<(), ModelError> {
        let n = self.n();
        let p = &self.params;
        for i in 0..n {
            let (theta, lp) = (y[i], y[n + i]);
            let s = geometry::evaluate(theta, lp, self.area_total, p)
                .map_err(|source| ModelError::Geometry { index: i, source })?;
            let c = s.capacitance.total;
            let g = self.conductance[i];
            let il = self.inv_l[i];
            let ga = p.gamma1 * (p.gamma2 * theta).cos();
            let a = [[-p.r_l[i] * il, 1.0 / c], [-il, -g / c]];
            let forcing = [0.0, g * ga * drive];
            let y0 = [y[3 * n + i], y[4 * n + i]];
            let (y1, integral) = affine_flow(a, forcing, y0, h);
            let supply = g * ga * drive * integral[1] / c;
            let dh = 0.5 * (y1[0] - y0[0]) * (y1[0] + y0[0]) * il + 0.5 * (y1[1] - y0[1]) * (y1[1] + y0[1]) / c;
            energy[0] += supply;
            energy[1] += supply - dh;
            y[3 * n + i] = y1[0];
            y[4 * n + i] = y1[1];
        }
        Ok(())
    }

    /// Default absolute tolerances per state component for adaptive runs.
    pub fn default_atol(&self) -> Vec<f64> {
        let n = self.n();
        let mut a = Vec::with_capacity(BLOCKS * n);
        a.extend(std::iter::repeat_n(1e-10, n));
        a.extend(std::iter::repeat_n(1e-13, n));
        a.extend(std::iter::repeat_n(1e-14, n));
        a.extend(std::iter::repeat_n(1e-6, n));
        a.extend(std::iter::repeat_n(1e-16, n));
        a
    }
}

/// Exact flow of `y' = A y + c` over `h` for a 2x2 system. Returns `y(h)` and
/// `int_0^h y dt`.
pub fn affine_flow(a: [[f64; 2]; 2], c: [f64; 2], y0: [f64; 2], h: f64) -> ([f64; 2], [f64; 2]) {
    let tr = a[0][0] + a[1][1];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let disc = tr * tr - 4.0 * det;
    let (l1, l2) = if disc >= 0.0 {
        let root = disc.sqrt();
        let big = if tr <= 0.0 { 0.5 * (tr - root) } else { 0.5 * (tr + root) };
        let small = if big != 0.0 { det / big } else { 0.0 };
        (Complex::new(big, 0.0), Complex::new(small, 0.0))
    } else {
        let im = 0.5 * (-disc).sqrt();
        (Complex::new(0.5 * tr, im), Complex::new(0.5 * tr, -im))
    };
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0 / h);
    if (l1 - l2).norm() <= 1e-7 * scale {
        return affine_flow_pade(a, c, y0, h);
    }
    // Sylvester: f(A) = [f(l1)(A - l2) - f(l2)(A - l1)] / (l1 - l2).
    let apply = |f1: Complex<f64>, f2: Complex<f64>, v: [f64; 2]| -> [f64; 2] {
        let den = l1 - l2;
        let mut out = [0.0; 2];
        for r in 0..2 {
            let mut acc = Complex::new(0.0, 0.0);
            for k in 0..2 {
                let id = if r == k { 1.0 } else { 0.0 };
                let m1 = Complex::new(a[r][k], 0.0) - l2 * id;
                let m2 = Complex::new(a[r][k], 0.0) - l1 * id;
                acc += (f1 * m1 - f2 * m2) / den * v[k];
            }
            out[r] = acc.re;
        }
        out
    };
    let (z1, z2) = (l1 * h, l2 * h);
    let e0 = apply(z1.exp(), z2.exp(), y0);
    let p1c = apply(phi1(z1), phi1(z2), c);
    let p1y = apply(phi1(z1), phi1(z2), y0);
    let p2c = apply(phi2(z1), phi2(z2), c);
    let y1 = [e0[0] + h * p1c[0], e0[1] + h * p1c[1]];
    let integral = [h * p1y[0] + h * h * p2c[0], h * p1y[1] + h * h * p2c[1]];
    (y1, integral)
}

fn affine_flow_pade(a: [[f64; 2]; 2], c: [f64; 2], y0: [f64; 2], h: f64) -> ([f64; 2], [f64; 2]) {
    // Augmented generator acting on (int y, y, 1).
    let mut m = DMatrix::<f64>::zeros(5, 5);
    m[(0, 2)] = h;
    m[(1, 3)] = h;
    for r in 0..2 {
        for k in 0..2 {
            m[(2 + r, 2 + k)] = a[r][k] * h;
        }
        m[(2 + r, 4)] = c[r] * h;
    }
    let e = m.exp();
    let z = DVector::from_vec(vec![0.0, 0.0, y0[0], y0[1], 1.0]);
    let out = e * z;
    ([out[2], out[3]], [out[0], out[1]])
}

fn phi1(z: Complex<f64>) -> Complex<f64> {
    if z.norm() < 1e-3 {
        Complex::new(1.0, 0.0) + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z / 120.0)))
    } else {
        (z.exp() - 1.0) / z
    }
}

fn phi2(z: Complex<f64>) -> Complex<f64> {
    if z.norm() < 1e-2 {
        Complex::new(0.5, 0.0) + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z / 720.0)))
    } else {
        (z.exp() - 1.0 - z) / (z * z)
    }
}

/// `J`, `R` and the input columns of the port-Hamiltonian form.
#[derive(Debug, Clone, PartialEq)]
pub struct PhStructure {
    pub j: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Column of the voltage input.
    pub g: DVector<f64>,
    /// Columns of the torque disturbances, one per subsystem.
    pub g_u: DMatrix<f64>,
}

impl PhStructure {
    /// `(J - R) grad H + g (U + d_a) + g_u d_u`.
    pub fn apply(&self, grad: &Gradient, u: f64, dist: &DisturbanceSample) -> DVector<f64> {
        let e = DVector::from_vec(grad.to_flat());
        let mut out = (&self.j - &self.r) * e + &self.g * (u + dist.d_a);
        if !dist.d_u.is_empty() {
            out += &self.g_u * DVector::from_column_slice(&dist.d_u);
        }
        out
    }
}

/// A disturbance active on `[start, stop)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    /// Added to the input voltage (V).
    #[serde(default)]
    pub d_a: f64,
    /// Torque added to each momentum row (N m); empty means none, one
    /// entry applies to every subsystem.
    #[serde(default)]
    pub d_u: Vec<f64>,
    pub start: f64,
    pub stop: f64,
}

impl Disturbance {
    pub fn actuated(d_a: f64, start: f64, stop: f64) -> Self {
        Self { d_a, d_u: Vec::new(), start, stop }
    }

    pub fn unactuated(d_u: f64, start: f64, stop: f64) -> Self {
        Self { d_a: 0.0, d_u: vec![d_u], start, stop }
    }

    pub fn is_active(&self, t: f64) -> bool {
        self.start <= t && t < self.stop
    }

    pub fn validate(&self, n: usize) -> Result<(), String> {
        if !(self.start.is_finite() && self.stop.is_finite() && self.stop > self.start) {
            return Err(format!("disturbance window [{}, {}) is empty", self.start, self.stop));
        }
        if !(self.d_u.is_empty() || self.d_u.len() == 1 || self.d_u.len() == n) {
            return Err(format!("d_u has {} entries, expected 1 or {}", self.d_u.len(), n));
        }
        if !self.d_a.is_finite() || self.d_u.iter().any(|v| !v.is_finite()) {
            return Err("disturbance values must be finite".into());
        }
        Ok(())
    }
}

/// Disturbances in effect at one instant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DisturbanceSample {
    pub d_a: f64,
    /// Empty or one entry per subsystem.
    pub d_u: Vec<f64>,
}

impl DisturbanceSample {
    pub fn none() -> Self {
        Self::default()
    }

    /// Sum of the disturbances active at `t`.
    pub fn at(list: &[Disturbance], t: f64, n: usize) -> Self {
        let mut s = Self::default();
        for d in list.iter().filter(|d| d.is_active(t)) {
            s.d_a += d.d_a;
            if !d.d_u.is_empty() {
                if s.d_u.is_empty() {
                    s.d_u = vec![0.0; n];
                }
                for (i, v) in s.d_u.iter_mut().enumerate() {
                    *v += if d.d_u.len() == 1 { d.d_u[0] } else { d.d_u[i] };
                }
            }
        }
        s
    }
}

/// One piece of the input voltage; pieces are summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSegment {
    Constant { start: f64, end: f64, value: f64 },
    Sine {
        start: f64,
        end: f64,
        amplitude: f64,
        /// Hz.
        frequency: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        phase: f64,
    },
    Ramp { start: f64, end: f64, from: f64, to: f64 },
}

impl InputSegment {
    pub fn window(&self) -> (f64, f64) {
        match *self {
            InputSegment::Constant { start, end, .. }
            | InputSegment::Sine { start, end, .. }
            | InputSegment::Ramp { start, end, .. } => (start, end),
        }
    }

    fn value(&self, t: f64) -> f64 {
        match *self {
            InputSegment::Constant { value, .. } => value,
            InputSegment::Sine { start, amplitude, frequency, offset, phase, .. } => {
                offset + amplitude * (2.0 * std::f64::consts::PI * frequency * (t - start) + phase).sin()
            }
            InputSegment::Ramp { start, end, from, to } => from + (to - from) * ((t - start) / (end - start)),
        }
    }
}

/// Open-loop input voltage as a sum of windowed segments; zero elsewhere.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InputProfile {
    pub segments: Vec<InputSegment>,
}

impl InputProfile {
    pub fn step(value: f64, start: f64, end: f64) -> Self {
        Self { segments: vec![InputSegment::Constant { start, end, value }] }
    }

    /// Voltage at `t`; windows are selected with `segment`, a time inside
    /// the current smooth piece.
    pub fn value(&self, t: f64, segment: f64) -> f64 {
        self.segments
            .iter()
            .filter(|s| {
                let (a, b) = s.window();
                a <= segment && segment < b
            })
            .map(|s| s.value(t))
            .sum()
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.segments.iter().flat_map(|s| {
            let (a, b) = s.window();
            [a, b]
        }).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        for s in &self.segments {
            let (a, b) = s.window();
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(format!("input segment window [{a}, {b}) is empty"));
            }
            let finite = match *s {
                InputSegment::Constant { value, .. } => value.is_finite(),
                InputSegment::Sine { amplitude, frequency, offset, phase, .. } => {
                    [amplitude, frequency, offset, phase].iter().all(|v| v.is_finite())
                }
                InputSegment::Ramp { from, to, .. } => from.is_finite() && to.is_finite(),
            };
            if !finite {
                return Err("input segment values must be finite".into());
            }
        }
        Ok(())
    }
}

/// Energy exchanged over one sampling interval (J).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalEnergy {
    /// `H(t_k+1) - H(t_k)`.
    pub delta_h: f64,
    /// Energy supplied through the ports.
    pub supplied: f64,
    /// Energy dissipated.
    pub dissipated: f64,
}

/// Sampled run of the actuator.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub n: usize,
    pub time: Vec<f64>,
    pub states: Vec<State>,
    /// Applied voltage `U_in` (without `d_a`).
    pub u: Vec<f64>,
    /// IDA-PBC component of the voltage.
    pub u_beta: Vec<f64>,
    /// Integral-action component of the voltage.
    pub u_int: Vec<f64>,
    pub i_e: Vec<f64>,
    pub energy: Vec<EnergyBreakdown>,
    pub h: Vec<f64>,
    /// Integral-action states, empty without integral action.
    pub x_c: Vec<Vec<f64>>,
    /// `intervals[k]` covers `(time[k], time[k + 1]]`.
    pub intervals: Vec<IntervalEnergy>,
    pub stats: SolverStats,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn final_state(&self) -> Option<&State> {
        self.states.last()
    }
}

/// Result of [`energy_balance_audit`], in watts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyAudit {
    /// `max_k (dH_k - E_supplied,k) / dt_k`; non-positive for a passive run.
    pub passivity_violation: f64,
    /// `max_k |dH_k - E_supplied,k + E_dissipated,k| / dt_k`: the integrator's
    /// departure from the exact power balance.
    pub balance_defect: f64,
    /// `max_k (dH_k / dt_k - i_e U_in)` with the supplied power taken as the
    /// trapezoidal mean of the sampled `i_e (U_in + d_a)`.
    pub sampled_violation: f64,
}

/// Checks `dH/dt <= y^T u` along a trajectory.
pub fn energy_balance_audit(traj: &Trajectory) -> EnergyAudit {
    let mut audit = EnergyAudit {
        passivity_violation: f64::NEG_INFINITY,
        balance_defect: 0.0,
        sampled_violation: f64::NEG_INFINITY,
    };
    for (k, e) in traj.intervals.iter().enumerate() {
        let dt = traj.time[k + 1] - traj.time[k];
        audit.passivity_violation = audit.passivity_violation.max((e.delta_h - e.supplied) / dt);
        audit.balance_defect = audit.balance_defect.max((e.delta_h - e.supplied + e.dissipated).abs() / dt);
        let p0 = traj.i_e[k] * traj.u[k];
        let p1 = traj.i_e[k + 1] * traj.u[k + 1];
        audit.sampled_violation = audit.sampled_violation.max(e.delta_h / dt - 0.5 * (p0 + p1));
    }
    if traj.intervals.is_empty() {
        audit.passivity_violation = 0.0;
        audit.sampled_violation = 0.0;
    }
    audit
}

/// Time grid of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub duration: f64,
    pub sample_interval: f64,
}

impl TimeGrid {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err("duration must be positive".into());
        }
        if !(self.sample_interval.is_finite() && self.sample_interval > 0.0 && self.sample_interval <= self.duration) {
            return Err("sample_interval must be positive and at most the duration".into());
        }
        if self.duration / self.sample_interval > 1e8 {
            return Err("too many samples".into());
        }
        Ok(())
    }

    /// Sample times `k dt` up to the duration, which is always included.
    pub fn samples(&self) -> Vec<f64> {
        let m = (self.duration / self.sample_interval * (1.0 + 1e-12)).floor() as usize;
        let mut t: Vec<f64> = (0..=m).map(|k| k as f64 * self.sample_interval).collect();
        let last = *t.last().unwrap_or(&0.0);
        if self.duration - last > 1e-9 * self.sample_interval {
            t.push(self.duration);
        } else if let Some(l) = t.last_mut() {
            *l = self.duration;
        }
        t
    }

    /// Integration stops: every sample after the first plus the interior
    /// breakpoints. The flag tells whether the stop is a sample.
    pub fn stops(&self, breakpoints: &[f64]) -> (Vec<Stop>, Vec<bool>) {
        merge_stops(&self.samples(), breakpoints, 1e-9 * self.sample_interval)
    }
}

/// Merges sample times (the first is the start) with breakpoints; a
/// breakpoint within `tol` of a sample marks that sample as a discontinuity.
pub fn merge_stops(samples: &[f64], breakpoints: &[f64], tol: f64) -> (Vec<Stop>, Vec<bool>) {
    let (start, end) = (samples[0], samples[samples.len() - 1]);
    let mut all: Vec<(f64, bool, bool)> = samples[1..].iter().map(|&t| (t, true, false)).collect();
    for &b in breakpoints {
        if !(b > start + tol && b < end - tol) {
            continue;
        }
        match all.iter_mut().find(|(t, _, _)| (t - b).abs() <= tol) {
            Some(s) => s.2 = true,
            None => all.push((b, false, true)),
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let stops = all.iter().map(|&(t, _, disc)| Stop { t, discontinuity: disc }).collect();
    let is_sample = all.iter().map(|&(_, s, _)| s).collect();
    (stops, is_sample)
}

/// Open-loop run description.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopRun {
    pub grid: TimeGrid,
    pub solver: SolverSettings,
    pub input: InputProfile,
    pub disturbances: Vec<Disturbance>,
}

struct OpenLoopSystem<'a> {
    model: &'a PhModel,
    input: &'a InputProfile,
    disturbances: &'a [Disturbance],
}

impl OdeSystem for OpenLoopSystem<'_> {
    fn dim(&self) -> usize {
        BLOCKS * self.model.n() + 2
    }

    fn quadrature_start(&self) -> usize {
        BLOCKS * self.model.n()
    }

    fn rhs(&self, t: f64, segment: f64, y: &[f64], dy: &mut [f64]) -> Result<(), ModelError> {
        let m = BLOCKS * self.model.n();
        let u = self.input.value(t, segment);
        let dist = DisturbanceSample::at(self.disturbances, segment, self.model.n());
        let flow = self.model.rates(&y[..m], u, dist.d_a, &dist.d_u, &mut dy[..m])?;
        dy[m] = flow.supply();
        dy[m + 1] = flow.dissipation();
        Ok(())
    }

    fn split_step(&self, t: f64, segment: f64, y: &mut [f64], h: f64) -> Result<(), ModelError> {
        let m = BLOCKS * self.model.n();
        let u = self.input.value(t + 0.5 * h, segment);
        let dist = DisturbanceSample::at(self.disturbances, segment, self.model.n());
        let mut e = [y[m], y[m + 1]];
        self.model.split_step(&mut y[..m], u, dist.d_a, &dist.d_u, h, &mut e)?;
        y[m] = e[0];
        y[m + 1] = e[1];
        Ok(())
    }
}

/// Builds a trajectory sample by sample.
pub(crate) struct Recorder<'a> {
    model: &'a PhModel,
    pub traj: Trajectory,
    prev: Option<(State, Vec<SubsystemShape>)>,
}

pub(crate) struct Sample<'a> {
    pub t: f64,
    pub state: &'a [f64],
    pub u: f64,
    pub u_beta: f64,
    pub u_int: f64,
    pub x_c: Option<&'a [f64]>,
    pub supplied: f64,
    pub dissipated: f64,
}

impl<'a> Recorder<'a> {
    pub fn new(model: &'a PhModel, capacity: usize) -> Self {
        let traj = Trajectory {
            n: model.n(),
            time: Vec::with_capacity(capacity),
            states: Vec::with_capacity(capacity),
            ..Trajectory::default()
        };
        Self { model, traj, prev: None }
    }

    pub fn push(&mut self, s: Sample<'_>) -> Result<(), ModelError> {
        let n = self.model.n();
        let state = State::from_flat(s.state, n);
        let shapes = self.model.shapes(&state)?;
        let energy = hamiltonian::energy_from_shapes(&state, &shapes, self.model.params());
        let ga = hamiltonian::input_gain(&state.theta, self.model.params());
        let i_e: f64 =
            (0..n).map(|i| self.model.conductance[i] * ga[i] * state.q[i] / shapes[i].capacitance.total).sum();
        if let Some((x0, s0)) = &self.prev {
            let delta_h = hamiltonian::energy_increment_with_shapes(x0, &state, s0, &shapes, self.model.params());
            self.traj.intervals.push(IntervalEnergy { delta_h, supplied: s.supplied, dissipated: s.dissipated });
        }
        let t = &mut self.traj;
        t.time.push(s.t);
        t.h.push(self.model.endpoint(&state));
        t.u.push(s.u);
        t.u_beta.push(s.u_beta);
        t.u_int.push(s.u_int);
        t.i_e.push(i_e);
        t.energy.push(energy);
        if let Some(xc) = s.x_c {
            t.x_c.push(xc.to_vec());
        }
        t.states.push(state.clone());
        self.prev = Some((state, shapes));
        Ok(())
    }
}

/// Integrates the open-loop model from `x0`.
pub fn simulate(model: &PhModel, x0: &State, run: &OpenLoopRun) -> Result<Trajectory, SolverError> {
    run.grid.validate().map_err(SolverError::Settings)?;
    let samples = run.grid.samples();
    simulate_sampled(model, x0, &run.input, &run.disturbances, &run.solver, &samples)
}

/// Integrates the open-loop model from `x0` at `samples[0]` and records the
/// state at every sample time (strictly increasing).
pub fn simulate_sampled(
    model: &PhModel,
    x0: &State,
    input: &InputProfile,
    disturbances: &[Disturbance],
    solver_settings: &SolverSettings,
    samples: &[f64],
) -> Result<Trajectory, SolverError> {
    let n = model.n();
    x0.check(n).map_err(|source| SolverError::Validity { t: 0.0, source })?;
    if samples.is_empty() || samples.iter().any(|t| !t.is_finite()) || samples.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SolverError::Settings("sample times must be finite and strictly increasing".into()));
    }
    input.validate().map_err(SolverError::Settings)?;
    for d in disturbances {
        d.validate(n).map_err(SolverError::Settings)?;
    }
    let sys = OpenLoopSystem { model, input, disturbances };
    let mut settings = solver_settings.clone();
    if settings.atol.is_empty() {
        settings.atol = model.default_atol();
    }
    let mut breakpoints = input.breakpoints();
    for d in disturbances {
        breakpoints.extend([d.start, d.stop]);
    }
    let t0 = samples[0];
    let span = samples[samples.len() - 1] - t0;
    let (stops, is_sample) = merge_stops(samples, &breakpoints, 1e-12 * span.max(1e-300));
    let m = BLOCKS * n;
    let mut y = x0.to_flat();
    y.extend([0.0, 0.0]);
    let mut rec = Recorder::new(model, stops.len() + 1);
    let input_at = |t: f64| input.value(t, t);
    let validity = |t: f64| move |source| SolverError::Validity { t, source };
    rec.push(Sample {
        t: t0,
        state: &y[..m],
        u: input_at(t0),
        u_beta: 0.0,
        u_int: 0.0,
        x_c: None,
        supplied: 0.0,
        dissipated: 0.0,
    })
    .map_err(validity(t0))?;
    let stats = solver::integrate(&sys, &settings, t0, &mut y, &stops, |k, t, y| {
        if !is_sample[k] {
            return Ok(());
        }
        let u = input_at(t);
        rec.push(Sample {
            t,
            state: &y[..m],
            u,
            u_beta: 0.0,
            u_int: 0.0,
            x_c: None,
            supplied: y[m],
            dissipated: y[m + 1],
        })
        .map_err(validity(t))?;
        y[m] = 0.0;
        y[m + 1] = 0.0;
        Ok(())
    })?;
    rec.traj.stats = stats;
    Ok(rec.traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Method;

    fn model() -> PhModel {
        PhModel::new(ActuatorParams::nominal()).unwrap()
    }

    fn state(seed: u64) -> State {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut r = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        State {
            theta: (0..4).map(|_| 0.02 + 0.1 * r()).collect(),
            lp: (0..4).map(|_| 0.01502 + 0.0001 * r()).collect(),
            p: (0..4).map(|_| 1e-5 * (r() - 0.5)).collect(),
            phi: (0..4).map(|_| 1e4 * r()).collect(),
            q: (0..4).map(|_| 4e-7 * r()).collect(),
        }
    }

    #[test]
    fn rest_is_equilibrium() {
        let m = model();
        let dx = m.rhs(&State::rest(m.params()), 0.0, &DisturbanceSample::none()).unwrap();
        assert!(dx.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_input_charges_only() {
        let m = model();
        let dx = m.rhs(&State::rest(m.params()), 1000.0, &DisturbanceSample::none()).unwrap();
        for i in 0..4 {
            assert!((dx.q[i] - 10433.0).abs() < 1e-9);
            assert_eq!(dx.theta[i], 0.0);
            assert_eq!(dx.p[i], 0.0);
            assert_eq!(dx.phi[i], 0.0);
        }
    }

    #[test]
    fn structure_reproduces_rhs() {
        let m = model();
        for seed in 0..20 {
            let x = state(seed);
            let dist = DisturbanceSample { d_a: -30.0, d_u: vec![-0.04, 0.01, 0.0, 0.02] };
            let direct = m.rhs(&x, 812.0, &dist).unwrap().to_flat();
            let s = m.structure(&x).unwrap();
            let assembled = s.apply(&m.gradient(&x).unwrap(), 812.0, &dist);
            for (a, b) in direct.iter().zip(assembled.iter()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300) + 1e-300, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn structure_is_skew_and_dissipative() {
        let m = model();
        let s = m.structure(&state(3)).unwrap();
        assert_eq!((&s.j + s.j.transpose()).amax(), 0.0);
        for i in 0..s.r.nrows() {
            for j in 0..s.r.ncols() {
                if i != j {
                    assert_eq!(s.r[(i, j)], 0.0);
                } else {
                    assert!(s.r[(i, i)] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn output_current_is_linear_in_charge() {
        let m = model();
        let mut x = State::rest(m.params());
        assert_eq!(m.output_current(&x).unwrap(), 0.0);
        x.q = vec![1e-9; 4];
        let i1 = m.output_current(&x).unwrap();
        let c0 = geometry::capacitance(0.0, m.params()).total;
        assert!((i1 - 4.0 * 104.33 / 10.0 * 1e-9 / c0).abs() < 1e-12 * i1.abs());
        x.q = vec![-1e-9; 4];
        assert_eq!(m.output_current(&x).unwrap(), -i1);
    }

    #[test]
    fn power_balance_holds_pointwise() {
        let m = model();
        for seed in 0..10 {
            let x = state(seed);
            let flat = x.to_flat();
            let mut dx = vec![0.0; flat.len()];
            let du = vec![0.01, -0.02, 0.0, 0.03];
            let f = m.rates(&flat, 500.0, 20.0, &du, &mut dx).unwrap();
            let g = m.gradient(&x).unwrap().to_flat();
            let dh: f64 = g.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let expect = f.supply() - f.dissipation();
            assert!((dh - expect).abs() <= 1e-9 * f.dissipation(), "{dh} vs {expect}");
        }
    }

    #[test]
    fn affine_flow_matches_pade() {
        let a = [[-0.1333, 1.2e10], [-1.0 / 150.0, -1.2e9]];
        let c = [0.0, 1043.3];
        let y0 = [3.0e4, 4.0e-7];
        let (y1, i1) = affine_flow(a, c, y0, 1e-4);
        let (y2, i2) = affine_flow_pade(a, c, y0, 1e-4);
        for k in 0..2 {
            assert!((y1[k] - y2[k]).abs() <= 1e-8 * y1[k].abs());
            assert!((i1[k] - i2[k]).abs() <= 1e-8 * i1[k].abs());
        }
        let (y3, _) = affine_flow([[-2.0, 0.0], [0.0, -2.0]], [1.0, 0.0], [1.0, 1.0], 0.5);
        assert!((y3[1] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((y3[0] - (0.5 + 0.5 * (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn zero_input_rest_run_is_constant() {
        let m = model();
        let run = OpenLoopRun {
            grid: TimeGrid { duration: 0.01, sample_interval: 1e-3 },
            solver: SolverSettings::fixed(Method::Rk4, 1e-4),
            input: InputProfile::default(),
            disturbances: vec![],
        };
        let traj = simulate(&m, &State::rest(m.params()), &run).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.h.iter().all(|h| *h == 0.0));
        assert!(traj.states.iter().all(|s| *s == State::rest(m.params())));
    }

    #[test]
    fn grid_merges_breakpoints() {
        let g = TimeGrid { duration: 1.0, sample_interval: 0.25 };
        let (stops, is_sample) = g.stops(&[0.5, 0.6, 2.0]);
        let t: Vec<f64> = stops.iter().map(|s| s.t).collect();
        assert_eq!(t, vec![0.25, 0.5, 0.6, 0.75, 1.0]);
        assert_eq!(is_sample, vec![true, true, false, true, true]);
        assert!(stops[1].discontinuity && stops[2].discontinuity && !stops[0].discontinuity);
    }

    #[test]
    fn disturbance_windows_are_half_open() {
        let list = [Disturbance::unactuated(-0.04, 3.0, 5.0), Disturbance::actuated(-30.0, 7.0, 9.0)];
        assert_eq!(DisturbanceSample::at(&list, 3.0, 4).d_u, vec![-0.04; 4]);
        assert!(DisturbanceSample::at(&list, 5.0, 4).d_u.is_empty());
        assert_eq!(DisturbanceSample::at(&list, 8.0, 4).d_a, -30.0);
        assert_eq!(DisturbanceSample::at(&list, 9.0, 4).d_a, 0.0);
    }
}
