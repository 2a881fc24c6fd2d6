#![no_main]

use libfuzzer_sys::fuzz_target;
use spikenet::format::{decode_classifier, encode_classifier};

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = decode_classifier(data) {
        let bytes = encode_classifier(&state);
        assert_eq!(
            encode_classifier(&decode_classifier(&bytes).expect("re-encoded classifier decodes")),
            bytes
        );
    }
});
