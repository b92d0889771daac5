#![no_main]

use libfuzzer_sys::fuzz_target;
use span_ner::corpus::spans_cross;
use span_ner::decode::{decode_with, LabelMode};
use span_ner::tensor::Tensor;

// Layout: n, |T|, threshold byte, then one byte per grid entry.
fuzz_target!(|data: &[u8]| {
    let [n, t, th, rest @ ..] = data else { return };
    let (n, t) = (*n as usize % 12, *t as usize % 4 + 1);
    if rest.len() < n * n * t {
        return;
    }
    let values = rest[..n * n * t].iter().map(|&b| b as f64 / 255.0).collect();
    let p = Tensor::<f64>::new(&[n, n, t], values).unwrap();
    let threshold = (*th as f64 + 1.0) / 257.0;
    let mode = if th % 2 == 0 { LabelMode::MultiLabel } else { LabelMode::Argmax };
    let out = decode_with(&p, threshold, mode).unwrap();
    for a in &out {
        assert!(a.start <= a.end && a.end < n && !a.types.is_empty());
        for b in &out {
            assert!(!spans_cross((a.start, a.end), (b.start, b.end)));
        }
    }
});
