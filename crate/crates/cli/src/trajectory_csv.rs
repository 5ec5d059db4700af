//! Trajectory CSV export and re-import.

use std::path::Path;

use hasel_ph::Trajectory;

use crate::error::CliError;

const TAIL: [&str; 6] = ["u_volts", "u_beta_volts", "u_int_volts", "i_e_amps", "h_m", "H_total_J"];
const BLOCK_PREFIX: [&str; 5] = ["theta", "lp", "p", "phi", "Q"];

/// Column names for `n` subsystems.
pub fn header(n: usize) -> Vec<String> {
    let mut h = vec!["t_s".to_string()];
    for prefix in BLOCK_PREFIX {
        h.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    h.extend(TAIL.iter().map(|s| s.to_string()));
    h
}

/// Numeric rows in header order.
pub fn rows(traj: &Trajectory) -> Vec<Vec<f64>> {
    (0..traj.len())
        .map(|k| {
            let x = &traj.states[k];
            let mut r = Vec::with_capacity(5 * traj.n + 7);
            r.push(traj.time[k]);
            for block in [&x.theta, &x.lp, &x.p, &x.phi, &x.q] {
                r.extend_from_slice(block);
            }
            r.extend([traj.u[k], traj.u_beta[k], traj.u_int[k], traj.i_e[k], traj.h[k], traj.energy[k].h_total]);
            r
        })
        .collect()
}

/// Seventeen significant digits: enough to restore every `f64` exactly.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_csv_string(traj: &Trajectory) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header(traj.n)).expect("in-memory write");
    for r in rows(traj) {
        w.write_record(r.iter().map(|v| format_value(*v))).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<(), CliError> {
    std::fs::write(path, to_csv_string(traj)).map_err(|e| CliError::io(path, e))
}

/// A parsed trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub n: usize,
    pub rows: Vec<Vec<f64>>,
}

impl TrajectoryTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = header(self.n).iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

pub fn parse_csv(text: &str) -> Result<TrajectoryTable, String> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let head: Vec<String> = rdr.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect();
    if head.len() < 12 || (head.len() - 7) % 5 != 0 {
        return Err(format!("{} columns cannot hold 5n + 7 fields", head.len()));
    }
    let n = (head.len() - 7) / 5;
    if head != header(n) {
        return Err("header does not match the trajectory layout".into());
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let r: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| format!("row {}: `{f}` is not a number", line + 1)))
            .collect::<Result<_, _>>()?;
        rows.push(r);
    }
    Ok(TrajectoryTable { n, rows })
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryTable, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_csv(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hasel_ph::State;
    use proptest::prelude::*;

    fn any_value() -> impl Strategy<Value = f64> {
        prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), -1.0f64..1.0]
    }

    proptest! {
        #[test]
        fn export_round_trips_bitwise(n in 1usize..5, len in 0usize..6, seed in prop::collection::vec(any_value(), 200)) {
            let mut it = seed.iter().copied().cycle();
            let mut next = || it.next().unwrap();
            let mut traj = Trajectory { n, ..Trajectory::default() };
            for _ in 0..len {
                let mut block = || (0..n).map(|_| next()).collect::<Vec<f64>>();
                let x = State { theta: block(), lp: block(), p: block(), phi: block(), q: block() };
                traj.states.push(x);
                traj.time.push(next());
                traj.u.push(next());
                traj.u_beta.push(next());
                traj.u_int.push(next());
                traj.i_e.push(next());
                traj.h.push(next());
                traj.energy.push(hasel_ph::hamiltonian::EnergyBreakdown { h_total: next(), ..Default::default() });
            }
            let back = parse_csv(&to_csv_string(&traj)).unwrap();
            prop_assert_eq!(back.n, n);
            let bits = |rows: &[Vec<f64>]| rows.iter().flatten().map(|v| v.to_bits()).collect::<Vec<u64>>();
            prop_assert_eq!(bits(&back.rows), bits(&rows(&traj)));
        }
    }

    #[test]
    fn column_count_is_five_n_plus_seven() {
        assert_eq!(header(1).len(), 12);
        assert_eq!(header(4).len(), 27);
        assert_eq!(header(2)[1..5], ["theta_1", "theta_2", "lp_1", "lp_2"]);
        assert_eq!(header(1).last().unwrap(), "H_total_J");
    }

    #[test]
    fn extreme_values_survive_formatting() {
        for v in [0.0, -0.0, 1e-300, f64::MAX, -f64::MIN_POSITIVE, 0.1 + 0.2, std::f64::consts::PI] {
            assert_eq!(format_value(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(parse_csv("").is_err());
        assert!(parse_csv("t_s,a\n1,2\n").is_err());
        let h = header(1).join(",");
        assert!(parse_csv(&format!("{h}\n1,2\n")).is_err());
        let row = vec!["x"; 12].join(",");
        assert!(parse_csv(&format!("{h}\n{row}\n")).is_err());
        assert_eq!(parse_csv(&format!("{h}\n")).unwrap().rows.len(), 0);
    }
}
