#![no_main]

use libfuzzer_sys::fuzz_target;
use span_ner::model::Checkpoint;
use span_ner::train::ModelArchive;

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = Checkpoint::decode(data) else { return };
    let again = Checkpoint::decode(&ck.encode().unwrap()).expect("re-encoded archive decodes");
    assert_eq!(again.header, ck.header);
    assert_eq!(again.records.len(), ck.records.len());
    // Bound the model size before materializing parameters.
    if data.len() < 1 << 20 {
        let _ = ModelArchive::<f32>::from_checkpoint(&ck);
    }
});
