use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use hasel_ph_cli::{execute, Command, Scenario, OUT_DIR_ENV};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    /// Open-loop run of an input profile.
    Simulate,
    /// IDA-PBC closed loop, with or without integral action.
    Control,
    /// Levenberg–Marquardt fit of K_b, b, L, gamma1, gamma2.
    Identify,
    /// Invariant checks with one PASS/FAIL line per property.
    Verify,
}

/// Curling HASEL actuator: port-Hamiltonian simulation, control and
/// identification.
#[derive(Debug, Parser)]
#[command(name = "hasel-ph", version)]
struct Args {
    command: Cmd,
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set gains.kb_tilde=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory [default: $HASEL_PH_OUT, else ./out].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    ExitCode::from(run(Args::parse()))
}

fn run(args: Args) -> u8 {
    let command = match args.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Control => Command::Control,
        Cmd::Identify => Command::Identify,
        Cmd::Verify => Command::Verify,
    };
    let out = args
        .out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let result = Scenario::load(&args.config, &args.sets).and_then(|s| execute(&s, command, &out));
    match result {
        Ok(r) => {
            print!("{}", r.summary);
            if !r.summary.ends_with('\n') {
                println!();
            }
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            for f in &r.files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as u8
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn scenario(name: &str) -> String {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name).display().to_string()
    }

    fn code(argv: &[&str]) -> u8 {
        run(Args::try_parse_from(std::iter::once("hasel-ph").chain(argv.iter().copied())).unwrap())
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(code(&["simulate", "--config", "missing.toml", "--out", out]), 1);
        let bad = scenario("setpoint_2cm.toml");
        assert_eq!(code(&["control", "--config", &bad, "--set", "gains.kb_tilde=-1", "--out", out]), 1);
        assert_eq!(code(&["control", "--config", &bad, "--set", "gains.no_such_gain=1", "--out", out]), 1);
        assert_eq!(code(&["simulate", "--config", &bad, "--out", out]), 1);
        assert_eq!(code(&["control", "--config", &scenario("disturbance_rejection.toml"), "--out", out]), 2);
        let step = ["--set", "solver.max_steps=3", "--set", "duration=0.01", "--set", "input.0.end=0.01"];
        let cfg = scenario("drift_60v_step.toml");
        assert_eq!(code(&[&["simulate", "--config", &cfg, "--set", "solver.method=\"radau5\"", "--out", out][..], &step[..]].concat()), 3);
        assert_eq!(code(&[&["simulate", "--config", &cfg, "--out", out][..], &step[2..]].concat()), 0);
        assert!(dir.path().join("drift_60v_step.csv").is_file());
        assert!(dir.path().join("manifest.toml").is_file());
    }

    #[test]
    fn output_directory_comes_from_the_environment() {
        let dir = tempfile::tempdir().unwrap();
        std::env::set_var(OUT_DIR_ENV, dir.path());
        let cfg = scenario("drift_60v_step.toml");
        assert_eq!(code(&["simulate", "--config", &cfg, "--set", "duration=0.005", "--set", "input.0.end=0.005"]), 0);
        std::env::remove_var(OUT_DIR_ENV);
        assert!(dir.path().join("drift_60v_step.csv").is_file());
    }
}
