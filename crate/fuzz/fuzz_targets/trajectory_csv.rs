#![no_main]

use hasel_ph_cli::trajectory_csv::{header, parse_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_csv(text) {
        let width = header(table.n).len();
        assert!(table.rows.iter().all(|r| r.len() == width));
        let _ = table.column("h_m");
    }
});
