#![no_main]

use libfuzzer_sys::fuzz_target;
use span_ner::corpus::{synth_generate, SynthConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(mut cfg) = SynthConfig::from_toml(text) else { return };
    cfg.sentences = cfg.sentences.min(32);
    cfg.max_len = cfg.max_len.min(64);
    cfg.min_len = cfg.min_len.min(cfg.max_len);
    if let Ok(sentences) = synth_generate(&cfg) {
        for s in &sentences {
            s.validate().unwrap();
        }
    }
});
