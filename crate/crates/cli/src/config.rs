//! Scenario files: strict TOML with `--set` overrides.

use std::path::{Path, PathBuf};

use hasel_ph::control::ControllerGains;
use hasel_ph::dynamics::{Disturbance, InputProfile, InputSegment, TimeGrid};
use hasel_ph::identification::LmOptions;
use hasel_ph::solver::SolverSettings;
use hasel_ph::{ActuatorParams, State};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OpenLoop,
    ClosedLoop,
    ClosedLoopIa,
    Identify,
    Verify,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::OpenLoop => "open_loop",
            Mode::ClosedLoop => "closed_loop",
            Mode::ClosedLoopIa => "closed_loop_ia",
            Mode::Identify => "identify",
            Mode::Verify => "verify",
        }
    }

    pub fn is_closed_loop(self) -> bool {
        matches!(self, Mode::ClosedLoop | Mode::ClosedLoopIa)
    }
}

/// One value for every subsystem or one per subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerSubsystem {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PerSubsystem {
    pub fn expand(&self, n: usize, name: &str) -> Result<Vec<f64>, CliError> {
        match self {
            PerSubsystem::Scalar(v) => Ok(vec![*v; n]),
            PerSubsystem::Vector(v) if v.len() == n => Ok(v.clone()),
            PerSubsystem::Vector(v) => {
                Err(CliError::Config(format!("`{name}` has {} entries, expected 1 or {n}", v.len())))
            }
        }
    }
}

/// Changes to the identified parameter set. Absent keys keep their values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamOverrides {
    pub n: Option<usize>,
    pub lp_rest: Option<f64>,
    pub lv: Option<f64>,
    pub le: Option<f64>,
    pub xh: Option<f64>,
    pub mass: Option<f64>,
    pub eps_r: Option<f64>,
    pub width: Option<f64>,
    pub thickness: Option<f64>,
    pub resistance: Option<PerSubsystem>,
    pub r_l: Option<PerSubsystem>,
    pub inductance: Option<PerSubsystem>,
    pub spring_k: Option<PerSubsystem>,
    pub torsion_kb: Option<PerSubsystem>,
    pub damping_b: Option<PerSubsystem>,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub g_acc: Option<f64>,
    pub gravity_enabled: Option<bool>,
    pub inductor_branch: Option<bool>,
    pub inertia: Option<PerSubsystem>,
}

impl ParamOverrides {
    pub fn resolve(&self) -> Result<ActuatorParams, CliError> {
        let n = self.n.unwrap_or(4);
        let mut p = ActuatorParams::nominal_with_n(n);
        let scalars = [
            (&mut p.lp_rest, self.lp_rest),
            (&mut p.lv, self.lv),
            (&mut p.le, self.le),
            (&mut p.xh, self.xh),
            (&mut p.mass, self.mass),
            (&mut p.eps_r, self.eps_r),
            (&mut p.width, self.width),
            (&mut p.thickness, self.thickness),
            (&mut p.gamma1, self.gamma1),
            (&mut p.gamma2, self.gamma2),
            (&mut p.g_acc, self.g_acc),
        ];
        for (slot, v) in scalars {
            if let Some(v) = v {
                *slot = v;
            }
        }
        let vectors = [
            (&mut p.resistance, &self.resistance, "params.resistance"),
            (&mut p.r_l, &self.r_l, "params.r_l"),
            (&mut p.inductance, &self.inductance, "params.inductance"),
            (&mut p.spring_k, &self.spring_k, "params.spring_k"),
            (&mut p.torsion_kb, &self.torsion_kb, "params.torsion_kb"),
            (&mut p.damping_b, &self.damping_b, "params.damping_b"),
        ];
        for (slot, v, name) in vectors {
            if let Some(v) = v {
                *slot = v.expand(n, name)?;
            }
        }
        if let Some(g) = self.gravity_enabled {
            p.gravity_enabled = g;
        }
        if let Some(b) = self.inductor_branch {
            p.inductor_branch = b;
        }
        if let Some(i) = &self.inertia {
            p.inertia = Some(i.expand(n, "params.inertia")?);
        }
        p.validate().map_err(|e| CliError::Config(format!("params: {e}")))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// Straight and uncharged.
    #[default]
    Rest,
    /// Steady state holding the endpoint at `h0` under its own constant input.
    Equilibrium { h0: f64 },
    State { theta: Vec<f64>, lp: Vec<f64>, p: Vec<f64>, phi: Vec<f64>, q: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetpointChange {
    pub t: f64,
    pub h_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setpoint {
    /// Endpoint target from t = 0 (m).
    pub h_star: f64,
    #[serde(default)]
    pub schedule: Vec<SetpointChange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    /// Added to the input voltage (V).
    Actuated,
    /// Torque on the momentum rows (N m).
    Unactuated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub kind: DisturbanceKind,
    pub value: PerSubsystem,
    pub start: f64,
    pub stop: f64,
}

impl DisturbanceConfig {
    fn resolve(&self, n: usize) -> Result<Disturbance, CliError> {
        Ok(match (self.kind, &self.value) {
            (DisturbanceKind::Actuated, PerSubsystem::Scalar(v)) => Disturbance::actuated(*v, self.start, self.stop),
            (DisturbanceKind::Actuated, PerSubsystem::Vector(_)) => {
                return Err(CliError::Config("an actuated disturbance takes one value".into()))
            }
            (DisturbanceKind::Unactuated, v) => Disturbance {
                d_a: 0.0,
                d_u: v.expand(n, "disturbances.value")?,
                start: self.start,
                stop: self.stop,
            },
        })
    }
}

fn scalar(v: f64) -> PerSubsystem {
    PerSubsystem::Scalar(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsConfig {
    #[serde(default = "default_kb")]
    pub kb_tilde: PerSubsystem,
    #[serde(default = "default_one")]
    pub k_tilde: PerSubsystem,
    #[serde(default = "default_one")]
    pub kphi_tilde: PerSubsystem,
    #[serde(default = "default_kq")]
    pub kq_tilde: PerSubsystem,
    #[serde(default = "default_r55")]
    pub r55: PerSubsystem,
    #[serde(default = "default_one")]
    pub alpha1: PerSubsystem,
    #[serde(default = "default_zero")]
    pub alpha2: PerSubsystem,
    #[serde(default = "default_one")]
    pub alpha3: PerSubsystem,
    #[serde(default = "default_zero")]
    pub alpha4: PerSubsystem,
    #[serde(default = "default_k_int")]
    pub k_int: PerSubsystem,
}

fn default_kb() -> PerSubsystem {
    scalar(10.0)
}
fn default_one() -> PerSubsystem {
    scalar(1.0)
}
fn default_zero() -> PerSubsystem {
    scalar(0.0)
}
fn default_kq() -> PerSubsystem {
    scalar(1000.0)
}
fn default_r55() -> PerSubsystem {
    scalar(0.1)
}
fn default_k_int() -> PerSubsystem {
    PerSubsystem::Vector(vec![0.5, 11.0, 1.2, 0.5])
}

impl Default for GainsConfig {
    fn default() -> Self {
        Self {
            kb_tilde: default_kb(),
            k_tilde: default_one(),
            kphi_tilde: default_one(),
            kq_tilde: default_kq(),
            r55: default_r55(),
            alpha1: default_one(),
            alpha2: default_zero(),
            alpha3: default_one(),
            alpha4: default_zero(),
            k_int: default_k_int(),
        }
    }
}

impl GainsConfig {
    pub fn resolve(&self, n: usize, ia_enabled: bool) -> Result<ControllerGains, CliError> {
        let g = |v: &PerSubsystem, name: &str| v.expand(n, &format!("gains.{name}"));
        let gains = ControllerGains {
            kb_tilde: g(&self.kb_tilde, "kb_tilde")?,
            k_tilde: g(&self.k_tilde, "k_tilde")?,
            kphi_tilde: g(&self.kphi_tilde, "kphi_tilde")?,
            kq_tilde: g(&self.kq_tilde, "kq_tilde")?,
            r55: g(&self.r55, "r55")?,
            alpha1: g(&self.alpha1, "alpha1")?,
            alpha2: g(&self.alpha2, "alpha2")?,
            alpha3: g(&self.alpha3, "alpha3")?,
            alpha4: g(&self.alpha4, "alpha4")?,
            k_int: if ia_enabled { g(&self.k_int, "k_int")? } else { vec![0.0; n] },
            ia_enabled,
        };
        gains.validate(n).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(gains)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// One closed-loop run per value, applied to every subsystem.
    pub kb_tilde: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitGuess {
    pub torsion_kb: f64,
    pub damping_b: f64,
    pub inductance: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Measured record (`time_s,u_volts,h_meters`). Without it a synthetic
    /// record is generated from the scenario's parameters and input.
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Explicit starting point; otherwise each parameter is scaled by a
    /// seeded uniform factor in `1 ± perturbation`.
    pub initial_guess: Option<FitGuess>,
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_gradient_tolerance")]
    pub gradient_tolerance: f64,
    #[serde(default = "default_step_tolerance")]
    pub step_tolerance: f64,
    #[serde(default = "default_damping")]
    pub initial_damping: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn default_perturbation() -> f64 {
    0.3
}
fn default_max_iterations() -> usize {
    LmOptions::default().max_iterations
}
fn default_gradient_tolerance() -> f64 {
    LmOptions::default().gradient_tolerance
}
fn default_step_tolerance() -> f64 {
    LmOptions::default().step_tolerance
}
fn default_damping() -> f64 {
    LmOptions::default().initial_damping
}
fn default_fd_step() -> f64 {
    LmOptions::default().fd_step
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            noise_std: 0.0,
            noise_seed: 0,
            initial_guess: None,
            perturbation: default_perturbation(),
            max_iterations: default_max_iterations(),
            gradient_tolerance: default_gradient_tolerance(),
            step_tolerance: default_step_tolerance(),
            initial_damping: default_damping(),
            fd_step: default_fd_step(),
        }
    }
}

impl IdentifyConfig {
    pub fn lm_options(&self, solver: &SolverSettings) -> LmOptions {
        LmOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            step_tolerance: self.step_tolerance,
            initial_damping: self.initial_damping,
            fd_step: self.fd_step,
            solver: solver.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_states")]
    pub states: usize,
    #[serde(default = "default_vectors")]
    pub vectors: usize,
    #[serde(default = "default_verify_h_star")]
    pub h_star: f64,
}

fn default_states() -> usize {
    100
}
fn default_vectors() -> usize {
    1000
}
fn default_verify_h_star() -> f64 {
    0.02
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { states: default_states(), vectors: default_vectors(), h_star: default_verify_h_star() }
    }
}

fn default_ceiling() -> f64 {
    10e3
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Stem of the output files.
    pub name: String,
    pub mode: Mode,
    /// Simulated time (s).
    pub duration: f64,
    /// Output sampling interval (s).
    pub sample_interval: f64,
    #[serde(default)]
    pub seed: u64,
    /// Magnitude above which the applied voltage is reported (V).
    #[serde(default = "default_ceiling")]
    pub voltage_ceiling: f64,
    pub solver: SolverSettings,
    #[serde(default)]
    pub params: ParamOverrides,
    #[serde(default)]
    pub initial: InitialCondition,
    #[serde(default)]
    pub input: Vec<InputSegment>,
    pub setpoint: Option<Setpoint>,
    #[serde(default)]
    pub disturbances: Vec<DisturbanceConfig>,
    #[serde(default)]
    pub gains: GainsConfig,
    pub sweep: Option<Sweep>,
    pub identify: Option<IdentifyConfig>,
    pub verify: Option<VerifyConfig>,
    /// Written into manifests; ignored on input.
    #[serde(default, skip_serializing)]
    pub run: Option<toml::Table>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        let s: Scenario = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Reads `path`, applies `key=value` overrides and resolves a relative
    /// dataset path against the file's directory.
    pub fn load(path: &Path, sets: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
        for s in sets {
            apply_set(&mut table, s).map_err(CliError::Config)?;
        }
        let mut scenario = Self::from_table(table)?;
        if let Some(ds) = scenario.identify.as_mut().and_then(|i| i.dataset.as_mut()) {
            if ds.is_relative() {
                *ds = path.parent().unwrap_or(Path::new(".")).join(&*ds);
            }
            if !ds.is_file() {
                return Err(CliError::Config(format!("dataset {} does not exist", ds.display())));
            }
        }
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid { duration: self.duration, sample_interval: self.sample_interval }
    }

    pub fn input_profile(&self) -> InputProfile {
        InputProfile { segments: self.input.clone() }
    }

    pub fn actuator_params(&self) -> Result<ActuatorParams, CliError> {
        self.params.resolve()
    }

    pub fn disturbance_list(&self, n: usize) -> Result<Vec<Disturbance>, CliError> {
        self.disturbances.iter().map(|d| d.resolve(n)).collect()
    }

    /// Checks ranges and mode-specific blocks before anything runs.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
            return bad(format!("name `{}` must be non-empty ASCII letters, digits, `_`, `-` or `.`", self.name));
        }
        self.grid().validate().map_err(CliError::Config)?;
        self.solver.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.voltage_ceiling.is_finite() && self.voltage_ceiling > 0.0) {
            return bad("voltage_ceiling must be positive".into());
        }
        let params = self.actuator_params()?;
        let n = params.n;
        let within = |a: f64, b: f64| 0.0 <= a && b <= self.duration;
        for seg in &self.input {
            let (a, b) = seg.window();
            if !within(a, b) {
                return bad(format!("input window [{a}, {b}) outside [0, {}]", self.duration));
            }
        }
        self.input_profile().validate().map_err(CliError::Config)?;
        for d in self.disturbance_list(n)? {
            d.validate(n).map_err(CliError::Config)?;
            if !within(d.start, d.stop) {
                return bad(format!("disturbance window [{}, {}) outside [0, {}]", d.start, d.stop, self.duration));
            }
        }
        if let InitialCondition::State { theta, lp, p, phi, q } = &self.initial {
            if [theta, lp, p, phi, q].iter().any(|b| b.len() != n || b.iter().any(|v| !v.is_finite())) {
                return bad(format!("initial state blocks must hold {n} finite entries"));
            }
        }
        if let InitialCondition::Equilibrium { h0 } = self.initial {
            if !h0.is_finite() {
                return bad("initial.h0 must be finite".into());
            }
        }
        match self.mode {
            Mode::ClosedLoop | Mode::ClosedLoopIa => {
                let Some(sp) = &self.setpoint else {
                    return bad("closed-loop modes need a [setpoint] block".into());
                };
                if !sp.h_star.is_finite() {
                    return bad("setpoint.h_star must be finite".into());
                }
                let mut last = 0.0;
                for c in &sp.schedule {
                    if !(c.t > last && c.t < self.duration && c.h_star.is_finite()) {
                        return bad("setpoint schedule times must increase strictly inside (0, duration)".into());
                    }
                    last = c.t;
                }
                if !self.input.is_empty() {
                    return bad("closed-loop modes take no [[input]] segments".into());
                }
                self.gains.resolve(n, self.mode == Mode::ClosedLoopIa)?;
                if let Some(sw) = &self.sweep {
                    if sw.kb_tilde.is_empty() || sw.kb_tilde.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
                        return bad("sweep.kb_tilde must list positive gains".into());
                    }
                }
            }
            _ => {
                if self.setpoint.is_some() || self.sweep.is_some() {
                    return bad(format!("[setpoint] and [sweep] are closed-loop only, mode is {}", self.mode.as_str()));
                }
            }
        }
        if self.identify.is_some() && self.mode != Mode::Identify {
            return bad("[identify] requires mode = \"identify\"".into());
        }
        if self.verify.is_some() && self.mode != Mode::Verify {
            return bad("[verify] requires mode = \"verify\"".into());
        }
        if let Some(id) = &self.identify {
            if !(id.noise_std.is_finite() && id.noise_std >= 0.0) {
                return bad("identify.noise_std must be non-negative".into());
            }
            if !(id.perturbation.is_finite() && (0.0..1.0).contains(&id.perturbation)) {
                return bad("identify.perturbation must lie in [0, 1)".into());
            }
            if let Some(g) = &id.initial_guess {
                if [g.torsion_kb, g.damping_b, g.inductance, g.gamma1, g.gamma2].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return bad("identify.initial_guess entries must be positive".into());
                }
            }
            let positive = [id.gradient_tolerance, id.step_tolerance, id.initial_damping, id.fd_step];
            if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || id.max_iterations == 0 {
                return bad("identify tolerances, damping, fd_step and max_iterations must be positive".into());
            }
        }
        if let Some(v) = &self.verify {
            if v.states == 0 || v.vectors == 0 || !v.h_star.is_finite() {
                return bad("verify.states and verify.vectors must be positive".into());
            }
        }
        Ok(())
    }

    /// Initial plant state for `model`.
    pub fn initial_state(&self, model: &hasel_ph::PhModel) -> Result<State, CliError> {
        match &self.initial {
            InitialCondition::Rest => Ok(State::rest(model.params())),
            InitialCondition::Equilibrium { h0 } => Ok(hasel_ph::control::equilibrium_from_setpoint(*h0, model)?.state()),
            InitialCondition::State { theta, lp, p, phi, q } => Ok(State {
                theta: theta.clone(),
                lp: lp.clone(),
                p: p.clone(),
                phi: phi.clone(),
                q: q.clone(),
            }),
        }
    }
}

/// Parses the right-hand side of `--set`: a TOML value, or a bare string.
pub fn parse_set_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) if t.len() == 1 => t.remove("v").expect("single key"),
        _ => toml::Value::String(text.to_string()),
    }
}

/// Applies `a.b.c=value` to `table`. Numeric segments index arrays;
/// missing tables are created.
pub fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), String> {
    let (key, value) = assignment.split_once('=').ok_or_else(|| format!("override `{assignment}` lacks `=`"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|s| s.is_empty()) {
        return Err(format!("override key `{key}` has an empty segment"));
    }
    let value = parse_set_value(value.trim());
    let (last, parents) = path.split_last().expect("split yields one segment");
    let mut cur = table
        .entry(parents.first().copied().unwrap_or(last).to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    if parents.is_empty() {
        *cur = value;
        return Ok(());
    }
    for seg in &parents[1..] {
        cur = descend(cur, seg, key)?;
    }
    match cur {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => {
            let i = index(a, last, key)?;
            a[i] = value;
        }
        _ => return Err(format!("override `{key}`: `{last}` is not inside a table or array")),
    }
    Ok(())
}

fn index(a: &[toml::Value], seg: &str, key: &str) -> Result<usize, String> {
    seg.parse::<usize>()
        .ok()
        .filter(|i| *i < a.len())
        .ok_or_else(|| format!("override `{key}`: index `{seg}` out of range"))
}

fn descend<'a>(v: &'a mut toml::Value, seg: &str, key: &str) -> Result<&'a mut toml::Value, String> {
    match v {
        toml::Value::Table(t) => Ok(t.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()))),
        toml::Value::Array(a) => {
            let i = index(a, seg, key)?;
            Ok(&mut a[i])
        }
        _ => Err(format!("override `{key}`: `{seg}` is below a plain value")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
mode = "open_loop"
duration = 0.1
sample_interval = 0.01
[solver]
method = "split"
step = 1e-4
"#;

    #[test]
    fn minimal_scenario_parses() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.mode, Mode::OpenLoop);
        assert_eq!(s.initial, InitialCondition::Rest);
        assert_eq!(s.actuator_params().unwrap(), ActuatorParams::nominal());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[gains]\nkb_tilda = 3\n");
        assert!(matches!(Scenario::from_toml_str(&text), Err(CliError::Config(_))));
        let text = MINIMAL.replace("step = 1e-4", "step = 1e-4\nstepp = 1");
        assert!(Scenario::from_toml_str(&text).is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let text = MINIMAL.replace("duration = 0.1", "duration = -1");
        assert!(Scenario::from_toml_str(&text).is_err());
        let text = format!("{MINIMAL}\n[[input]]\nkind = \"constant\"\nstart = 0.0\nend = 0.5\nvalue = 1.0\n");
        assert!(Scenario::from_toml_str(&text).is_err());
        let text = format!("{MINIMAL}\n[params]\ntorsion_kb = [1.0, 2.0]\n");
        assert!(Scenario::from_toml_str(&text).is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut t: toml::Table = MINIMAL.parse().unwrap();
        apply_set(&mut t, "solver.step=2e-4").unwrap();
        apply_set(&mut t, "params.torsion_kb = [1, 2, 3, 4]").unwrap();
        apply_set(&mut t, "params.torsion_kb.2=9.5").unwrap();
        apply_set(&mut t, "name=other").unwrap();
        let s = Scenario::from_table(t).unwrap();
        assert_eq!(s.solver.step, 2e-4);
        assert_eq!(s.name, "other");
        assert_eq!(s.actuator_params().unwrap().torsion_kb, vec![1.0, 2.0, 9.5, 4.0]);
    }

    #[test]
    fn malformed_overrides_fail() {
        let mut t: toml::Table = MINIMAL.parse().unwrap();
        assert!(apply_set(&mut t, "solver").is_err());
        assert!(apply_set(&mut t, "solver..step=1").is_err());
        assert!(apply_set(&mut t, "duration.x=1").is_err());
        assert_eq!(parse_set_value("1\nmode = 'x'"), toml::Value::String("1\nmode = 'x'".into()));
    }

    #[test]
    fn serialized_scenario_reparses_identically() {
        let mut t: toml::Table = MINIMAL.parse().unwrap();
        apply_set(&mut t, "initial.kind=equilibrium").unwrap();
        apply_set(&mut t, "initial.h0=0.0123456789012345").unwrap();
        let s = Scenario::from_table(t).unwrap();
        let again = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(s, again);
    }
}
