use std::fs;
use std::path::PathBuf;

use spikenet::data::manifest::parse_manifest;
use spikenet::experiment::ExperimentConfig;
use spikenet::format::{decode_classifier, decode_model, encode_classifier, encode_model};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("seed-"))
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn model_seeds_decode_and_reencode_identically() {
    for (path, bytes) in seeds("decode_model") {
        let model = decode_model(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(encode_model(&model), bytes, "{}", path.display());
    }
}

#[test]
fn classifier_seeds_decode_and_reencode_identically() {
    for (path, bytes) in seeds("decode_classifier") {
        let state = decode_classifier(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(encode_classifier(&state), bytes, "{}", path.display());
    }
}

#[test]
fn config_seeds_parse() {
    for (path, bytes) in seeds("parse_config") {
        let text = String::from_utf8(bytes).unwrap();
        ExperimentConfig::from_toml(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn manifest_seeds_parse() {
    for (path, bytes) in seeds("parse_manifest") {
        parse_manifest(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn truncated_seeds_are_rejected_without_panicking() {
    for (_, bytes) in seeds("decode_model").into_iter().chain(seeds("decode_classifier")) {
        for cut in 0..bytes.len() {
            assert!(decode_model(&bytes[..cut]).is_err());
            assert!(decode_classifier(&bytes[..cut]).is_err());
        }
    }
}
