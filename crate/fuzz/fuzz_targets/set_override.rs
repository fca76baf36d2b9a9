#![no_main]

use fwdstep::config::{apply_override, parse_override, ExperimentConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let overrides: Vec<String> = text.lines().map(str::to_string).collect();
    for o in &overrides {
        let _ = parse_override(o);
        let mut table = toml::Table::new();
        let _ = apply_override(&mut table, o);
    }
    let _ = ExperimentConfig::load("", &overrides);
});
