#![no_main]

use libfuzzer_sys::fuzz_target;
use span_ner::corpus::{audit, fix, parse_records};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sentences) = parse_records(text) {
        for s in &sentences {
            assert!(s.entities.iter().all(|e| e.start <= e.end && e.end < s.len()));
            let _ = s.validate();
        }
        let fixed = fix(&sentences);
        assert!(audit(&fixed).is_clean());
    }
});
