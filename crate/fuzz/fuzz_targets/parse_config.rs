#![no_main]

use libfuzzer_sys::fuzz_target;
use spikenet::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        assert_eq!(
            ExperimentConfig::from_toml(&cfg.to_toml()).expect("printed config parses"),
            cfg
        );
    }
});
