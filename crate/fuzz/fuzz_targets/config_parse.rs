#![no_main]

use fwdstep::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::load(text, &[]) {
        // anything that loads must also resolve and survive a round trip
        cfg.resolve().expect("loaded config resolves");
        let again = ExperimentConfig::load(&cfg.to_toml_string(), &[]).expect("round trip parses");
        assert_eq!(again.to_toml_string(), cfg.to_toml_string());
    }
});
