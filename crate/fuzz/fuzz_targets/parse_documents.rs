#![no_main]

use libfuzzer_sys::fuzz_target;
use span_ner::corpus::{parse_documents, split_sentences_entity_safe};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(docs) = parse_documents(text) else { return };
    for d in docs {
        let bounds = d.boundaries.clone().unwrap_or_else(|| d.punctuation_boundaries());
        let parts = split_sentences_entity_safe(&d.tokens, &d.entities, &bounds, d.doc_id.as_deref());
        assert_eq!(parts.iter().map(|s| s.len()).sum::<usize>(), d.tokens.len());
        assert_eq!(parts.iter().map(|s| s.entities.len()).sum::<usize>(), d.entities.len());
        for s in &parts {
            s.check_bounds().unwrap();
        }
    }
});
