//! Levenberg–Marquardt identification of `(K_b, b, L, gamma1, gamma2)` from
//! endpoint time series, with NRMSE fitness.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::rngs::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_sampled, InputProfile, InputSegment, PhModel};
use crate::error::{IdentError, SolverError};
use crate::hamiltonian::State;
use crate::params::ActuatorParams;
use crate::solver::{Method, SolverSettings};

/// Measured or synthetic input/output record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub time: Vec<f64>,
    pub u: Vec<f64>,
    pub h: Vec<f64>,
    pub label: String,
    pub source: String,
}

pub const DATASET_HEADER: [&str; 3] = ["time_s", "u_volts", "h_meters"];

impl Dataset {
    pub fn validate(&self) -> Result<(), IdentError> {
        let n = self.time.len();
        if n < 2 || self.u.len() != n || self.h.len() != n {
            return Err(IdentError::Dataset(format!(
                "channels need equal lengths of at least 2 (time {}, u {}, h {})",
                n,
                self.u.len(),
                self.h.len()
            )));
        }
        if self.time.iter().chain(&self.u).chain(&self.h).any(|v| !v.is_finite()) {
            return Err(IdentError::Dataset("values must be finite".into()));
        }
        if let Some(k) = self.time.windows(2).position(|w| w[1] <= w[0]) {
            return Err(IdentError::Dataset(format!("time is not strictly increasing at row {}", k + 2)));
        }
        Ok(())
    }

    /// Parses `time_s,u_volts,h_meters` rows after a header line. Leading
    /// `# label: ...` and `# source: ...` lines carry the metadata.
    pub fn from_csv_str(text: &str) -> Result<Self, IdentError> {
        let mut ds = Dataset::default();
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            let Some(meta) = trimmed.strip_prefix('#') else { break };
            body_start += line.len();
            if let Some((key, value)) = meta.split_once(':') {
                match key.trim() {
                    "label" => ds.label = value.trim().to_string(),
                    "source" => ds.source = value.trim().to_string(),
                    _ => {}
                }
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text[body_start..].as_bytes());
        let header = reader.headers().map_err(|e| IdentError::Dataset(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != DATASET_HEADER {
            return Err(IdentError::Dataset(format!(
                "header must be {}, found {}",
                DATASET_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| IdentError::Dataset(e.to_string()))?;
            if record.len() != 3 {
                return Err(IdentError::Dataset(format!("row {} has {} fields", row + 2, record.len())));
            }
            let mut v = [0.0; 3];
            for (k, field) in record.iter().enumerate() {
                v[k] = field
                    .parse::<f64>()
                    .map_err(|_| IdentError::Dataset(format!("row {}: `{field}` is not a number", row + 2)))?;
            }
            ds.time.push(v[0]);
            ds.u.push(v[1]);
            ds.h.push(v[2]);
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn read_csv(path: &Path) -> Result<Self, IdentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IdentError::Dataset(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }

    /// Round-trip text form of [`Dataset::from_csv_str`]; values keep 17
    /// significant digits.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        if !self.label.is_empty() {
            let _ = writeln!(s, "# label: {}", self.label.replace('\n', " "));
        }
        if !self.source.is_empty() {
            let _ = writeln!(s, "# source: {}", self.source.replace('\n', " "));
        }
        s.push_str(&DATASET_HEADER.join(","));
        s.push('\n');
        for k in 0..self.time.len() {
            let _ = writeln!(s, "{:.16e},{:.16e},{:.16e}", self.time[k], self.u[k], self.h[k]);
        }
        s
    }

    /// Zero-order hold of the input samples.
    pub fn input_profile(&self) -> InputProfile {
        let mut segments = Vec::new();
        let last = self.time.len() - 1;
        let mut push = |start: usize, end: f64| {
            if self.u[start] != 0.0 {
                segments.push(InputSegment::Constant { start: self.time[start], end, value: self.u[start] });
            }
        };
        let mut start = 0;
        for k in 1..=last {
            if self.u[k] != self.u[start] {
                push(start, self.time[k]);
                start = k;
            }
        }
        push(start, self.time[last] + (self.time[last] - self.time[last - 1]));
        InputProfile { segments }
    }
}

/// Goodness of fit `100 (1 - |h_ref - h_sim| / |h_ref - mean(h_ref)|)`.
pub fn nrmse_fitness(h_ref: &[f64], h_sim: &[f64]) -> Result<f64, IdentError> {
    if h_ref.len() != h_sim.len() || h_ref.len() < 2 {
        return Err(IdentError::Length { reference: h_ref.len(), simulated: h_sim.len() });
    }
    let mean = h_ref.iter().sum::<f64>() / h_ref.len() as f64;
    let den = h_ref.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
    if !(den > 0.0) {
        return Err(IdentError::ConstantReference);
    }
    let num = h_ref.iter().zip(h_sim).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(100.0 * (1.0 - num / den))
}

/// The identified parameters, shared by all subsystems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParameters {
    pub torsion_kb: f64,
    pub damping_b: f64,
    pub inductance: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl FitParameters {
    pub const NAMES: [&'static str; 5] = ["K_b", "b", "L", "gamma1", "gamma2"];

    pub fn from_params(p: &ActuatorParams) -> Self {
        Self {
            torsion_kb: p.torsion_kb[0],
            damping_b: p.damping_b[0],
            inductance: p.inductance[0],
            gamma1: p.gamma1,
            gamma2: p.gamma2,
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.torsion_kb, self.damping_b, self.inductance, self.gamma1, self.gamma2]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self { torsion_kb: v[0], damping_b: v[1], inductance: v[2], gamma1: v[3], gamma2: v[4] }
    }

    pub fn apply(&self, base: &ActuatorParams) -> ActuatorParams {
        let mut p = base.clone();
        p.torsion_kb = vec![self.torsion_kb; p.n];
        p.damping_b = vec![self.damping_b; p.n];
        p.inductance = vec![self.inductance; p.n];
        p.gamma1 = self.gamma1;
        p.gamma2 = self.gamma2;
        p
    }

    /// Largest relative deviation from `truth` per parameter.
    pub fn relative_errors(&self, truth: &FitParameters) -> [f64; 5] {
        let (a, b) = (self.to_array(), truth.to_array());
        std::array::from_fn(|k| ((a[k] - b[k]) / b[k]).abs())
    }
}

/// Integrator used inside the fit: Strang splitting with an exact
/// electrical step.
pub fn default_fit_solver() -> SolverSettings {
    SolverSettings::fixed(Method::Split, 1e-4)
}

/// Endpoint at the dataset's sample times for the candidate values, driven
/// by the zero-order hold of the dataset's input from rest.
pub fn simulate_for_fit(
    base: &ActuatorParams,
    candidate: &FitParameters,
    dataset: &Dataset,
    solver: &SolverSettings,
) -> Result<Vec<f64>, SolverError> {
    let params = candidate.apply(base);
    let model = PhModel::new(params).map_err(|e| SolverError::Settings(e.to_string()))?;
    let x0 = State::rest(model.params());
    let traj = simulate_sampled(&model, &x0, &dataset.input_profile(), &[], solver, &dataset.time)?;
    Ok(traj.h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_damping: f64,
    /// Relative forward-difference step in log-parameter space.
    pub fd_step: f64,
    pub solver: SolverSettings,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-10,
            initial_damping: 1e-3,
            fd_step: 1e-6,
            solver: default_fit_solver(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub parameters: FitParameters,
    pub fitness: f64,
    pub iterations: usize,
    pub final_damping: f64,
    /// Cost `1/2 |r|^2` after every accepted step, starting from the guess.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
    pub message: String,
}

impl FitReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v = self.parameters.to_array();
        for (name, value) in FitParameters::NAMES.iter().zip(v) {
            let _ = writeln!(s, "{name}: {value:.16e}");
        }
        let _ = writeln!(s, "fitness_percent: {:.6}", self.fitness);
        let _ = writeln!(s, "iterations: {}", self.iterations);
        let _ = writeln!(s, "final_damping: {:e}", self.final_damping);
        let _ = writeln!(s, "converged: {}", self.converged);
        let _ = writeln!(s, "message: {}", self.message);
        let trace: Vec<String> = self.cost_trace.iter().map(|c| format!("{c:e}")).collect();
        let _ = writeln!(s, "cost_trace: {}", trace.join(" "));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn residuals(
    base: &ActuatorParams,
    log_values: &[f64; 5],
    dataset: &Dataset,
    solver: &SolverSettings,
) -> Option<Vec<f64>> {
    let cand = FitParameters::from_array(log_values.map(f64::exp));
    // Simulation failures count as infinite cost.
    let h = simulate_for_fit(base, &cand, dataset, solver).ok()?;
    let r: Vec<f64> = dataset.h.iter().zip(&h).map(|(m, s)| m - s).collect();
    r.iter().all(|v| v.is_finite()).then_some(r)
}

fn cost(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Minimizes `1/2 |h_meas - h_sim|^2` over the log of the five parameters.
pub fn levenberg_marquardt(
    dataset: &Dataset,
    base: &ActuatorParams,
    initial: &FitParameters,
    options: &LmOptions,
) -> Result<FitReport, IdentError> {
    dataset.validate()?;
    let guess = initial.to_array();
    if guess.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(IdentError::InitialGuess);
    }
    options.solver.validate()?;
    let mut x = guess.map(f64::ln);
    let mut r = residuals(base, &x, dataset, &options.solver)
        .ok_or_else(|| IdentError::Dataset("the initial guess does not simulate".into()))?;
    let mut c = cost(&r);
    let mut lambda = options.initial_damping;
    let mut trace = vec![c];
    let mut converged = false;
    let mut message = String::from("maximum iterations reached");
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let columns: Vec<Option<Vec<f64>>> = (0..5)
            .into_par_iter()
            .map(|k| {
                let mut xp = x;
                let step = options.fd_step * x[k].abs().max(1.0);
                xp[k] += step;
                let rp = residuals(base, &xp, dataset, &options.solver)?;
                // d r / d x_k, with r = h_meas - h_sim.
                Some(rp.iter().zip(&r).map(|(a, b)| (a - b) / step).collect())
            })
            .collect();
        let m = r.len();
        let mut jac = DMatrix::<f64>::zeros(m, 5);
        for (k, col) in columns.into_iter().enumerate() {
            let col = col.ok_or_else(|| IdentError::Dataset("finite-difference probe left the model domain".into()))?;
            for i in 0..m {
                jac[(i, k)] = col[i];
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &rv;
        // Scale-free test: cosine between each Jacobian column and r.
        let r_norm = rv.norm();
        let gscaled = (0..5)
            .map(|k| {
                let cn = jac.column(k).norm();
                if cn > 0.0 && r_norm > 0.0 { (g[k] / (cn * r_norm)).abs() } else { 0.0 }
            })
            .fold(0.0f64, f64::max);
        if gscaled <= options.gradient_tolerance {
            converged = true;
            message = "gradient tolerance reached".into();
            break;
        }
        let mut accepted = false;
        let mut small_step = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let step_norm = delta.norm();
            let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if step_norm <= options.step_tolerance * (x_norm + options.step_tolerance) {
                small_step = true;
                break;
            }
            let xn: [f64; 5] = std::array::from_fn(|k| x[k] + delta[k]);
            match residuals(base, &xn, dataset, &options.solver) {
                Some(rn) if cost(&rn) < c => {
                    x = xn;
                    r = rn;
                    c = cost(&r);
                    trace.push(c);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if small_step {
            converged = true;
            message = "step tolerance reached".into();
            break;
        }
        if !accepted {
            converged = true;
            message = "no decrease possible at the current point".into();
            break;
        }
        if c == 0.0 {
            converged = true;
            message = "zero residual".into();
            break;
        }
    }
    let parameters = FitParameters::from_array(x.map(f64::exp));
    let h_sim: Vec<f64> = dataset.h.iter().zip(&r).map(|(m, e)| m - e).collect();
    let fitness = nrmse_fitness(&dataset.h, &h_sim)?;
    Ok(FitReport { parameters, fitness, iterations, final_damping: lambda, cost_trace: trace, converged, message })
}

/// Simulated endpoint for `params` under `input`, sampled every
/// `sample_interval` up to `duration`, plus seeded Gaussian noise.
pub fn generate_synthetic(
    params: &ActuatorParams,
    input: &InputProfile,
    duration: f64,
    sample_interval: f64,
    noise_std: f64,
    seed: u64,
    solver: &SolverSettings,
) -> Result<Dataset, IdentError> {
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(IdentError::Dataset("noise standard deviation must be non-negative".into()));
    }
    let grid = crate::dynamics::TimeGrid { duration, sample_interval };
    grid.validate().map_err(IdentError::Dataset)?;
    let time = grid.samples();
    let model = PhModel::new(params.clone()).map_err(|e| IdentError::Dataset(e.to_string()))?;
    let traj = simulate_sampled(&model, &State::rest(model.params()), input, &[], solver, &time)?;
    let u: Vec<f64> = time.iter().map(|&t| input.value(t, t)).collect();
    let mut h = traj.h;
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_std).map_err(|e| IdentError::Dataset(e.to_string()))?;
        for v in &mut h {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(Dataset {
        time,
        u,
        h,
        label: "synthetic".into(),
        source: format!("seed {seed}, noise {noise_std:e} m"),
    })
}

/// Duration (s) and sample interval (s) of the synthetic recovery record.
pub const RECOVERY_DURATION: f64 = 2.0;
pub const RECOVERY_SAMPLE_INTERVAL: f64 = 1e-4;

/// Staircase input of the synthetic recovery record. The fast sampling
/// resolves the inertial transient after each step, which separates `K_b`
/// and `b` from `gamma1`.
pub fn recovery_input() -> InputProfile {
    let levels = [(0.0, 0.5, 40.0), (0.5, 1.0, 60.0), (1.0, 1.5, 25.0), (1.5, 2.0, 50.0)];
    InputProfile {
        segments: levels.iter().map(|&(start, end, value)| InputSegment::Constant { start, end, value }).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitness_examples() {
        let h = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(nrmse_fitness(&h, &h).unwrap(), 100.0);
        assert!(nrmse_fitness(&h, &[1.5; 4]).unwrap().abs() < 1e-12);
        let f = nrmse_fitness(&h, &[0.0, 1.0, 2.0, 2.0]).unwrap();
        assert!((f - 100.0 * (1.0 - 1.0 / 5f64.sqrt())).abs() < 1e-12);
        assert!(matches!(nrmse_fitness(&[1.0, 1.0], &[1.0, 1.0]), Err(IdentError::ConstantReference)));
        assert!(matches!(nrmse_fitness(&h, &h[..3]), Err(IdentError::Length { .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let ds = Dataset {
            time: vec![0.0, 0.1, 0.2],
            u: vec![0.0, 40.0, 40.0],
            h: vec![0.0, 1.0e-3, 1.0 / 3.0],
            label: "bench".into(),
            source: "unit".into(),
        };
        let back = Dataset::from_csv_str(&ds.to_csv_string()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_errors() {
        assert!(Dataset::from_csv_str("a,b,c\n0,0,0\n1,0,0\n").is_err());
        assert!(Dataset::from_csv_str("time_s,u_volts,h_meters\n0,0,0\n0,0,0\n").is_err());
        assert!(Dataset::from_csv_str("time_s,u_volts,h_meters\n0,0,x\n1,0,0\n").is_err());
        assert!(Dataset::from_csv_str("time_s,u_volts,h_meters\n0,0,0\n").is_err());
    }

    #[test]
    fn zero_order_hold_merges_equal_levels() {
        let ds = Dataset {
            time: vec![0.0, 1.0, 2.0, 3.0],
            u: vec![5.0, 5.0, 0.0, 7.0],
            h: vec![0.0; 4],
            ..Dataset::default()
        };
        let p = ds.input_profile();
        assert_eq!(p.segments.len(), 2);
        assert_eq!(p.value(1.5, 1.5), 5.0);
        assert_eq!(p.value(2.5, 2.5), 0.0);
        assert_eq!(p.value(3.5, 3.5), 7.0);
    }

    #[test]
    fn zero_gain_gives_no_motion() {
        let base = ActuatorParams::nominal();
        let mut cand = FitParameters::from_params(&base);
        cand.gamma1 = 0.0;
        let ds = Dataset {
            time: (0..11).map(|k| k as f64 * 0.01).collect(),
            u: vec![50.0; 11],
            h: vec![0.0; 11],
            ..Dataset::default()
        };
        let h = simulate_for_fit(&base, &cand, &ds, &default_fit_solver()).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let p = ActuatorParams::nominal();
        let input = InputProfile::step(40.0, 0.0, 0.2);
        let s = default_fit_solver();
        let a = generate_synthetic(&p, &input, 0.2, 0.01, 1e-4, 7, &s).unwrap();
        let b = generate_synthetic(&p, &input, 0.2, 0.01, 1e-4, 7, &s).unwrap();
        let clean = generate_synthetic(&p, &input, 0.2, 0.01, 0.0, 7, &s).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.h, clean.h);
    }
}
