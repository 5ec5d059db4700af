#![no_main]

use hasel_ph_cli::Scenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = Scenario::from_toml_str(text) {
        // Accepted scenarios must survive a serialize/parse cycle.
        let again = Scenario::from_toml_str(&s.to_toml_string()).expect("serialized scenario reparses");
        assert_eq!(again.to_toml_string(), s.to_toml_string());
    }
});
