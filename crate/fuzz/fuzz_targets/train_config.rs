#![no_main]

use libfuzzer_sys::fuzz_target;
use span_ner::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_toml(text) {
        let again = TrainConfig::from_toml(&cfg.to_toml()).expect("valid config re-parses");
        assert_eq!(cfg, again);
    }
});
