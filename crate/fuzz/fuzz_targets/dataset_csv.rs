#![no_main]

use hasel_ph::identification::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = Dataset::from_csv_str(text) {
        ds.validate().expect("parsed dataset is valid");
        let _ = ds.input_profile();
    }
});
