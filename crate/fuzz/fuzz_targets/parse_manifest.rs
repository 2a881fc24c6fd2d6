#![no_main]

use libfuzzer_sys::fuzz_target;
use spikenet::data::manifest::{parse_manifest, write_manifest};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_manifest(data) {
        if rows.is_empty() {
            return;
        }
        let mut buf = Vec::new();
        write_manifest(&mut buf, &rows).expect("manifest writes");
        assert_eq!(parse_manifest(&buf).expect("written manifest parses"), rows);
    }
});
