#![no_main]

use htr_core::train::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = TrainConfig::parse(text) {
            let again = TrainConfig::parse(&cfg.to_toml().expect("valid config serializes"));
            assert_eq!(again.ok().as_ref(), Some(&cfg));
        }
    }
});
