#![no_main]

use libfuzzer_sys::fuzz_target;
use spikenet::format::{decode_model, encode_model};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_model(data) {
        let again = decode_model(&encode_model(&model)).expect("re-encoded model decodes");
        assert_eq!(again, model);
    }
});
