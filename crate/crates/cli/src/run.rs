//! Scenario execution and output files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hasel_ph::control::{
    closed_loop_simulate, equilibrium_from_setpoint, equilibrium_residual, ida_pbc_control, ClosedLoopRun,
    ControllerGains, IaState, TargetSchedule,
};
use hasel_ph::dynamics::{energy_balance_audit, simulate, simulate_sampled, OpenLoopRun};
use hasel_ph::identification::{
    generate_synthetic, levenberg_marquardt, recovery_input, Dataset, FitParameters, FitReport,
};
use hasel_ph::solver::{Method, SolverSettings};
use hasel_ph::{verify, PhModel, State, Trajectory};
use rand::rngs::ChaCha8Rng;
use rand::{RngExt, SeedableRng};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{IdentifyConfig, Mode, Scenario, VerifyConfig};
use crate::error::CliError;
use crate::trajectory_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Control,
    Identify,
    Verify,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Control => "control",
            Command::Identify => "identify",
            Command::Verify => "verify",
        }
    }

    pub fn accepts(self, mode: Mode) -> bool {
        matches!(
            (self, mode),
            (Command::Simulate, Mode::OpenLoop)
                | (Command::Control, Mode::ClosedLoop | Mode::ClosedLoopIa)
                | (Command::Identify, Mode::Identify)
                | (Command::Verify, Mode::Verify)
        )
    }
}

pub fn build_model(s: &Scenario) -> Result<PhModel, CliError> {
    Ok(PhModel::new(s.actuator_params()?)?)
}

pub fn simulate_open_loop(s: &Scenario) -> Result<Trajectory, CliError> {
    let model = build_model(s)?;
    let x0 = s.initial_state(&model)?;
    let run = OpenLoopRun {
        grid: s.grid(),
        solver: s.solver.clone(),
        input: s.input_profile(),
        disturbances: s.disturbance_list(model.n())?,
    };
    Ok(simulate(&model, &x0, &run)?)
}

/// Closed-loop run; `kb_tilde` replaces the configured gain on every
/// subsystem.
pub fn simulate_closed_loop(s: &Scenario, kb_tilde: Option<f64>) -> Result<Trajectory, CliError> {
    let model = build_model(s)?;
    let n = model.n();
    let setpoint = s.setpoint.as_ref().ok_or_else(|| CliError::Config("missing [setpoint]".into()))?;
    let mut entries = vec![(0.0, equilibrium_from_setpoint(setpoint.h_star, &model)?)];
    for c in &setpoint.schedule {
        entries.push((c.t, equilibrium_from_setpoint(c.h_star, &model)?));
    }
    let schedule = TargetSchedule { entries };
    let mut gains = s.gains.resolve(n, s.mode == Mode::ClosedLoopIa)?;
    if let Some(k) = kb_tilde {
        gains.kb_tilde = vec![k; n];
    }
    let x0 = s.initial_state(&model)?;
    let run = ClosedLoopRun {
        grid: s.grid(),
        solver: s.solver.clone(),
        disturbances: s.disturbance_list(n)?,
        voltage_ceiling: s.voltage_ceiling,
    };
    Ok(closed_loop_simulate(&model, &x0, &IaState::matched(&x0), &schedule, &gains, &run)?)
}

/// Output file for one gain of a sweep.
pub fn sweep_file_name(name: &str, kb_tilde: f64) -> String {
    format!("{name}_kb_{kb_tilde}.csv")
}

/// Identification result with the record it was fitted to.
#[derive(Debug, Clone)]
pub struct IdentifyOutcome {
    pub dataset: Dataset,
    pub synthetic: bool,
    pub truth: FitParameters,
    pub initial: FitParameters,
    pub report: FitReport,
    pub fitted: Trajectory,
}

/// Starting point drawn from `seed`: each parameter scaled by a uniform
/// factor in `1 ± perturbation`.
pub fn perturbed_guess(truth: &FitParameters, perturbation: f64, seed: u64) -> FitParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FitParameters::from_array(truth.to_array().map(|v| v * (1.0 + rng.random_range(-perturbation..=perturbation))))
}

pub fn identify(s: &Scenario) -> Result<IdentifyOutcome, CliError> {
    let cfg = s.identify.clone().unwrap_or_default();
    let base = s.actuator_params()?;
    let truth = FitParameters::from_params(&base);
    let (dataset, synthetic) = match &cfg.dataset {
        Some(path) => (Dataset::read_csv(path)?, false),
        None => {
            let input = if s.input.is_empty() { recovery_input() } else { s.input_profile() };
            let ds = generate_synthetic(&base, &input, s.duration, s.sample_interval, cfg.noise_std, cfg.noise_seed, &s.solver)?;
            (ds, true)
        }
    };
    let initial = initial_guess(&cfg, &truth, s.seed);
    let report = levenberg_marquardt(&dataset, &base, &initial, &cfg.lm_options(&s.solver))?;
    let model = PhModel::new(report.parameters.apply(&base))?;
    let fitted = simulate_sampled(&model, &State::rest(model.params()), &dataset.input_profile(), &[], &s.solver, &dataset.time)?;
    Ok(IdentifyOutcome { dataset, synthetic, truth, initial, report, fitted })
}

fn initial_guess(cfg: &IdentifyConfig, truth: &FitParameters, seed: u64) -> FitParameters {
    match &cfg.initial_guess {
        Some(g) => FitParameters {
            torsion_kb: g.torsion_kb,
            damping_b: g.damping_b,
            inductance: g.inductance,
            gamma1: g.gamma1,
            gamma2: g.gamma2,
        },
        None => perturbed_guess(truth, cfg.perturbation, seed),
    }
}

/// Outcome of one invariant check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub const GRADIENT_TOL: f64 = 1e-6;
pub const MATCHING_TOL: f64 = 1e-8;
pub const EQUILIBRIUM_TOL: f64 = 1e-8;
pub const BETA_TOL: f64 = 1e-10;
/// Largest admissible `max (dH - E_supplied) / dt` on the audit run (W).
pub const PASSIVITY_TOL: f64 = 1e-6;

/// Gradient, structure, matching, equilibrium and passivity checks.
pub fn verify(s: &Scenario) -> Result<Vec<PropertyResult>, CliError> {
    let cfg: VerifyConfig = s.verify.clone().unwrap_or_default();
    let model = build_model(s)?;
    let n = model.n();
    let states = verify::random_states(&model, cfg.states, s.seed, (1e-3, 10.0));
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for x in &states {
        worst = verify::gradient_error(&model, x)?.iter().fold(worst, |m, v| m.max(*v));
    }
    out.push(PropertyResult {
        name: "gradient".into(),
        passed: worst <= GRADIENT_TOL,
        detail: format!("max relative error {worst:.3e} over {} states (tol {GRADIENT_TOL:e})", states.len()),
    });

    let mut structure_ok = true;
    let mut min_q = f64::INFINITY;
    for (k, x) in states.iter().enumerate() {
        let c = verify::structure_check(&model, x, cfg.vectors.div_ceil(states.len()), s.seed.wrapping_add(k as u64))?;
        structure_ok &= c.skew_exact && c.r_diagonal_nonnegative;
        min_q = min_q.min(c.min_quadratic_form);
    }
    out.push(PropertyResult {
        name: "structure".into(),
        passed: structure_ok && min_q >= 0.0,
        detail: format!("J skew and R diagonal nonnegative: {structure_ok}; min x'Rx/|x|^2 = {min_q:.3e}"),
    });

    let target = equilibrium_from_setpoint(cfg.h_star, &model)?;
    let gains = ControllerGains::disturbance_rejection();
    let gains = if gains.kb_tilde.len() == n { gains } else { ControllerGains::uniform(n, 10.0, 1000.0, 0.1) };
    let matching = verify::matching_check(&model, &target, &gains, cfg.states, s.seed)?;
    out.push(PropertyResult {
        name: "matching".into(),
        passed: matching <= MATCHING_TOL,
        detail: format!("max scaled residual {matching:.3e} (tol {MATCHING_TOL:e})"),
    });

    let residual = equilibrium_residual(&target, &model)?;
    let beta = ida_pbc_control(&target.state(), &target, &gains, &model)?;
    let beta_err = ((beta - target.u_star) / target.u_star).abs();
    out.push(PropertyResult {
        name: "equilibrium".into(),
        passed: residual <= EQUILIBRIUM_TOL && beta_err <= BETA_TOL,
        detail: format!("scaled rate {residual:.3e}, |beta(x*) - U*|/U* = {beta_err:.3e} at h* = {} m", cfg.h_star),
    });

    let audit_run = ClosedLoopRun {
        grid: hasel_ph::dynamics::TimeGrid { duration: 0.05, sample_interval: 1e-3 },
        solver: SolverSettings::adaptive(Method::Radau5, 1e-10, Vec::new()),
        disturbances: Vec::new(),
        voltage_ceiling: s.voltage_ceiling,
    };
    let start = equilibrium_from_setpoint(cfg.h_star - 1e-3, &model)?.state();
    let traj = closed_loop_simulate(&model, &start, &IaState::matched(&start), &TargetSchedule::constant(target), &gains, &audit_run)?;
    let audit = energy_balance_audit(&traj);
    out.push(PropertyResult {
        name: "passivity".into(),
        passed: audit.passivity_violation <= PASSIVITY_TOL,
        detail: format!(
            "max (dH - supplied)/dt = {:.3e} W, balance defect {:.3e} W on a 1 mm closed-loop step",
            audit.passivity_violation, audit.balance_defect
        ),
    });
    Ok(out)
}

/// Files written by [`execute`] and the text printed for the user.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
    pub summary: String,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct RunInfo {
    command: String,
    version: String,
    wall_time_s: f64,
    outputs: Vec<String>,
    warnings: Vec<String>,
    resolved_params: hasel_ph::ActuatorParams,
}

pub const MANIFEST_NAME: &str = "manifest.toml";

/// Runs `s` under `command`, writing outputs and `manifest.toml` into `out_dir`.
pub fn execute(s: &Scenario, command: Command, out_dir: &Path) -> Result<RunOutput, CliError> {
    if !command.accepts(s.mode) {
        return Err(CliError::Config(format!(
            "command `{}` cannot run a scenario with mode = \"{}\"",
            command.as_str(),
            s.mode.as_str()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let clock = Instant::now();
    let mut out = RunOutput::default();
    let write = |out: &mut RunOutput, name: String, text: &str| -> Result<(), CliError> {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        out.files.push(path);
        Ok(())
    };
    match s.mode {
        Mode::OpenLoop => {
            let traj = simulate_open_loop(s)?;
            out.summary = trajectory_summary(&traj);
            out.warnings.extend(traj.warnings.iter().cloned());
            write(&mut out, format!("{}.csv", s.name), &trajectory_csv::to_csv_string(&traj))?;
        }
        Mode::ClosedLoop | Mode::ClosedLoopIa => match &s.sweep {
            None => {
                let traj = simulate_closed_loop(s, None)?;
                out.summary = trajectory_summary(&traj);
                out.warnings.extend(traj.warnings.iter().cloned());
                write(&mut out, format!("{}.csv", s.name), &trajectory_csv::to_csv_string(&traj))?;
            }
            Some(sweep) => {
                let runs: Vec<Result<Trajectory, CliError>> =
                    sweep.kb_tilde.par_iter().map(|k| simulate_closed_loop(s, Some(*k))).collect();
                for (k, r) in sweep.kb_tilde.iter().zip(runs) {
                    let traj = r?;
                    let _ = writeln!(out.summary, "kb_tilde = {k}: {}", trajectory_summary(&traj));
                    out.warnings.extend(traj.warnings.iter().map(|w| format!("kb_tilde = {k}: {w}")));
                    write(&mut out, sweep_file_name(&s.name, *k), &trajectory_csv::to_csv_string(&traj))?;
                }
            }
        },
        Mode::Identify => {
            let r = identify(s)?;
            let mut text = r.report.to_text();
            if r.synthetic {
                let errs = r.report.parameters.relative_errors(&r.truth);
                for (name, e) in FitParameters::NAMES.iter().zip(errs) {
                    let _ = writeln!(text, "relative_error_{name}: {e:.6e}");
                }
            }
            out.summary = text;
            write(&mut out, format!("{}_dataset.csv", s.name), &r.dataset.to_csv_string())?;
            write(&mut out, format!("{}_fit.csv", s.name), &trajectory_csv::to_csv_string(&r.fitted))?;
            write(&mut out, format!("{}_report.json", s.name), &r.report.to_json())?;
        }
        Mode::Verify => {
            let results = verify(s)?;
            out.summary = results.iter().map(|r| r.line() + "\n").collect();
            let json = serde_json::to_string_pretty(&results).expect("results serialize");
            write(&mut out, format!("{}_verify.json", s.name), &json)?;
        }
    }
    let info = RunInfo {
        command: command.as_str().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        wall_time_s: clock.elapsed().as_secs_f64(),
        outputs: out.files.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect(),
        warnings: out.warnings.clone(),
        resolved_params: s.actuator_params()?,
    };
    write(&mut out, MANIFEST_NAME.into(), &manifest_text(s, &info))?;
    Ok(out)
}

fn manifest_text(s: &Scenario, info: &RunInfo) -> String {
    let mut table = toml::Table::try_from(s).expect("scenario serializes");
    table.insert("run".into(), toml::Value::try_from(info).expect("run info serializes"));
    toml::to_string(&table).expect("manifest serializes")
}

fn trajectory_summary(traj: &Trajectory) -> String {
    let (Some(t), Some(h)) = (traj.time.last(), traj.h.last()) else {
        return "empty trajectory".into();
    };
    let peak = traj.u.iter().fold(0.0f64, |m, u| m.max(u.abs()));
    format!("{} samples, h({t} s) = {h:.9e} m, max |U_in| = {peak:.3} V", traj.len())
}
