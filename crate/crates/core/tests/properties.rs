use hasel_ph::control::{
    closed_loop_simulate, desired_energy, equilibrium_from_setpoint, ida_pbc_control, matching_residual, ClosedLoopRun,
    ControllerGains, IaState, TargetSchedule,
};
use hasel_ph::dynamics::{simulate, Disturbance, InputProfile, OpenLoopRun, TimeGrid};
use hasel_ph::geometry::{endpoint_position, shell_area};
use hasel_ph::identification::{
    default_fit_solver, generate_synthetic, levenberg_marquardt, nrmse_fitness, simulate_for_fit, FitParameters,
    LmOptions,
};
use hasel_ph::solver::{Method, SolverSettings};
use hasel_ph::{verify, ActuatorParams, PhModel, State};
use proptest::prelude::*;

fn model(gravity: bool) -> PhModel {
    let mut p = ActuatorParams::nominal();
    p.gravity_enabled = gravity;
    PhModel::new(p).unwrap()
}

fn random_state(seed: u64) -> State {
    verify::random_states(&model(true), 1, seed, (1e-3, 10.0)).remove(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shell_area_grows_with_bend(lp_scale in 1.0f64..1.3) {
        let p = ActuatorParams::nominal();
        let lp = p.lp_rest * lp_scale;
        let mut last = f64::NEG_INFINITY;
        for k in 0..=99 {
            let theta = 0.01 + 0.01 * k as f64;
            let a = shell_area(theta, lp, &p).unwrap().area;
            prop_assert!(a >= last, "A_s fell at theta = {theta}");
            last = a;
        }
    }

    #[test]
    fn endpoint_is_odd(theta in prop::collection::vec(-1.0f64..1.0, 1..6)) {
        let p = ActuatorParams::nominal();
        let neg: Vec<f64> = theta.iter().map(|t| -t).collect();
        prop_assert_eq!(endpoint_position(&neg, &p), -endpoint_position(&theta, &p));
    }

    #[test]
    fn energy_terms_are_nonnegative_and_sum(seed in any::<u64>()) {
        let m = model(false);
        let x = random_state(seed);
        let e = m.energy(&x).unwrap();
        for v in [e.h_theta, e.h_lp, e.h_p, e.h_phi, e.h_q] {
            prop_assert!(v >= 0.0);
        }
        prop_assert_eq!(e.h_g, 0.0);
        prop_assert_eq!(e.h_total, e.h_theta + e.h_lp + e.h_g + e.h_p + e.h_phi + e.h_q);
        prop_assert!(e.h_total > 0.0);
    }

    #[test]
    fn charge_energy_is_quadratic(seed in any::<u64>()) {
        let m = model(true);
        let x = random_state(seed);
        let mut y = x.clone();
        y.q.iter_mut().for_each(|q| *q *= 2.0);
        let (a, b) = (m.energy(&x).unwrap().h_q, m.energy(&y).unwrap().h_q);
        prop_assert!((b - 4.0 * a).abs() <= 1e-14 * b);
    }

    #[test]
    fn gradient_matches_differences(seed in any::<u64>()) {
        let m = model(true);
        let e = verify::gradient_error(&m, &random_state(seed)).unwrap();
        prop_assert!(e.iter().all(|v| *v <= 1e-6), "{e:?}");
    }

    #[test]
    fn structure_is_skew_and_dissipative(seed in any::<u64>()) {
        let m = model(true);
        let c = verify::structure_check(&m, &random_state(seed), 20, seed).unwrap();
        prop_assert!(c.passed(), "{c:?}");
    }

    #[test]
    fn matching_holds_off_the_singular_set(seed in any::<u64>(), kb in 0.5f64..50.0) {
        let m = model(true);
        let target = equilibrium_from_setpoint(0.02, &m).unwrap();
        let gains = ControllerGains::uniform(4, kb, 1000.0, 0.1);
        let r = matching_residual(&random_state(seed), &target, &gains, &m).unwrap();
        prop_assert!(r.iter().all(|v| v.abs() <= 1e-8), "{r:?}");
    }

    #[test]
    fn beta_is_affine_in_kb(seed in any::<u64>(), k1 in 0.5f64..50.0, k2 in 0.5f64..50.0) {
        let m = model(true);
        let target = equilibrium_from_setpoint(0.02, &m).unwrap();
        let x = random_state(seed);
        let beta = |k: f64| ida_pbc_control(&x, &target, &ControllerGains::uniform(4, k, 1000.0, 0.1), &m).unwrap();
        let (b0, b1, b2) = (beta(1e-300), beta(k1), beta(k2));
        let lhs = (b2 - b0) * k1;
        let rhs = (b1 - b0) * k2;
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (lhs.abs() + rhs.abs() + b0.abs() * (k1 + k2)));
    }
}

#[test]
fn volume_is_conserved_along_a_run() {
    let m = model(true);
    let run = OpenLoopRun {
        grid: TimeGrid { duration: 0.3, sample_interval: 1e-3 },
        solver: SolverSettings::fixed(Method::Split, 1e-4),
        input: InputProfile::step(60.0, 0.0, 0.3),
        disturbances: Vec::new(),
    };
    let traj = simulate(&m, &State::rest(m.params()), &run).unwrap();
    let p = m.params();
    for x in &traj.states {
        for s in m.shapes(x).unwrap() {
            let total = s.shell_area + p.xh * (p.le - s.zipped.raw);
            assert!((total - m.area_total()).abs() <= 1e-9 * m.area_total());
        }
    }
    assert!(traj.h.last().unwrap() > &0.0);
}

#[test]
fn unforced_runs_only_lose_energy() {
    let m = model(true);
    let start = equilibrium_from_setpoint(0.02, &model(false)).unwrap().state();
    let run = OpenLoopRun {
        grid: TimeGrid { duration: 0.5, sample_interval: 1e-3 },
        solver: SolverSettings::adaptive(Method::Radau5, 1e-10, Vec::new()),
        input: InputProfile::default(),
        disturbances: Vec::new(),
    };
    let traj = simulate(&m, &start, &run).unwrap();
    for w in traj.energy.windows(2) {
        assert!(w[1].h_total <= w[0].h_total);
    }
    assert!(traj.intervals.iter().all(|e| e.delta_h <= 0.0 && e.supplied == 0.0));
}

#[test]
fn desired_energy_decreases_along_the_closed_loop() {
    let m = model(false);
    let target = equilibrium_from_setpoint(0.02, &m).unwrap();
    for kb in [1.0, 10.0] {
        let gains = ControllerGains::uniform(4, kb, 1000.0, 0.1);
        for h0 in [0.0195, 0.01999, 0.0203] {
            let x0 = equilibrium_from_setpoint(h0, &m).unwrap().state();
            let run = ClosedLoopRun {
                grid: TimeGrid { duration: 0.5, sample_interval: 1e-3 },
                solver: SolverSettings::adaptive(Method::Radau5, 1e-10, Vec::new()),
                disturbances: Vec::new(),
                voltage_ceiling: 1e4,
            };
            let traj =
                closed_loop_simulate(&m, &x0, &IaState::zeros(4), &TargetSchedule::constant(target.clone()), &gains, &run)
                    .unwrap();
            let hd: Vec<f64> = traj.states.iter().map(|x| desired_energy(x, &target, &gains, &m)).collect();
            for (k, w) in hd.windows(2).enumerate() {
                assert!(w[1] <= w[0] + 1e-12, "H_d rose at t = {} (kb {kb}, h0 {h0})", traj.time[k + 1]);
            }
        }
    }
}

#[test]
fn integral_action_removes_small_actuated_offsets() {
    let m = model(false);
    let target = equilibrium_from_setpoint(0.02, &m).unwrap();
    let x0 = target.state();
    let h_star = 0.02;
    for d_a in [-1e-3, -5e-4, 8e-4] {
        let run = ClosedLoopRun {
            grid: TimeGrid { duration: 8.0, sample_interval: 1e-3 },
            solver: SolverSettings::adaptive(Method::Radau5, 1e-8, Vec::new()),
            disturbances: vec![Disturbance::actuated(d_a, 1.0, 3.0)],
            voltage_ceiling: 1e4,
        };
        let schedule = TargetSchedule::constant(target.clone());
        let with = closed_loop_simulate(&m, &x0, &IaState::matched(&x0), &schedule, &ControllerGains::disturbance_rejection(), &run)
            .unwrap();
        let without =
            closed_loop_simulate(&m, &x0, &IaState::zeros(4), &schedule, &ControllerGains::uniform(4, 10.0, 1000.0, 0.1), &run)
                .unwrap();
        let err = |traj: &hasel_ph::Trajectory, from: f64, to: f64| {
            traj.time
                .iter()
                .zip(&traj.h)
                .filter(|(t, _)| **t >= from && **t <= to)
                .fold(0.0f64, |m, (_, h)| m.max((h - h_star).abs()))
        };
        let settled = err(&with, 7.5, 8.0);
        assert!(settled <= 1e-4, "d_a {d_a}: IA error {settled:e} five seconds after the window");
        let offset = err(&without, 2.5, 3.0);
        assert!(offset >= 10.0 * settled.max(1e-12), "d_a {d_a}: offset {offset:e}, settled {settled:e}");
        assert!(err(&without, 2.5, 3.0) > err(&with, 2.5, 3.0));
    }
}

fn short_record(noise: f64, seed: u64) -> hasel_ph::identification::Dataset {
    let input = InputProfile::step(50.0, 0.0, 0.2);
    generate_synthetic(&ActuatorParams::nominal(), &input, 0.2, 1e-3, noise, seed, &default_fit_solver()).unwrap()
}

#[test]
fn truth_reproduces_its_own_record() {
    let ds = short_record(0.0, 0);
    let base = ActuatorParams::nominal();
    let h = simulate_for_fit(&base, &FitParameters::from_params(&base), &ds, &default_fit_solver()).unwrap();
    assert!(nrmse_fitness(&ds.h, &h).unwrap() >= 99.99);
}

#[test]
fn fitness_falls_as_noise_grows() {
    let clean = short_record(0.0, 0);
    let mut last = 100.0;
    for std in [1e-5, 3e-5, 1e-4, 3e-4, 1e-3] {
        let mean = (0..10u64).map(|s| nrmse_fitness(&clean.h, &short_record(std, s).h).unwrap()).sum::<f64>() / 10.0;
        assert!(mean < last, "noise {std:e}: mean fitness {mean} not below {last}");
        last = mean;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn lm_cost_never_increases(scale in prop::array::uniform5(0.8f64..1.2)) {
        let base = ActuatorParams::nominal();
        let truth = FitParameters::from_params(&base).to_array();
        let guess = FitParameters::from_array(std::array::from_fn(|k| truth[k] * scale[k]));
        let options = LmOptions { max_iterations: 8, ..LmOptions::default() };
        let report = levenberg_marquardt(&short_record(0.0, 0), &base, &guess, &options).unwrap();
        for w in report.cost_trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(report.fitness <= 100.0);
    }
}
