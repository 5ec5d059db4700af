#![no_main]

use hasel_ph_cli::config::apply_set;
use libfuzzer_sys::fuzz_target;

const BASE: &str = include_str!("../../scenarios/disturbance_rejection.toml");

fuzz_target!(|data: &[u8]| {
    let Ok(assignment) = std::str::from_utf8(data) else { return };
    let mut table: toml::Table = BASE.parse().expect("bundled scenario parses");
    if apply_set(&mut table, assignment).is_ok() {
        let _ = hasel_ph_cli::Scenario::from_table(table);
    }
});
