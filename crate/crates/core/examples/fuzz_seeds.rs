//! Writes the fuzz corpus seeds: `cargo run -p spikenet --example fuzz_seeds [fuzz/corpus]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikenet::arch::BackboneConfig;
use spikenet::data::manifest::{write_manifest, ManifestRow};
use spikenet::experiment::ExperimentConfig;
use spikenet::format::{encode_classifier, encode_model};
use spikenet::qcfs::{surgery, QcfsParams, SupervisedHead};
use spikenet::snn::convert;
use spikenet::stdp::{ClassifierState, Stage2Config};
use spikenet::Model;

fn put(root: &Path, target: &str, name: &str, bytes: &[u8]) {
    let dir = root.join(target);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(format!("seed-{name}")), bytes).unwrap();
}

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let backbone = BackboneConfig {
        name: "toy-cnn".into(),
        channels: vec![2, 3],
        embedding: 4,
    };
    let graph = surgery(&backbone.build(8, &mut rng).unwrap(), &QcfsParams::default()).unwrap();
    let bare = Model::new(graph.clone(), None).unwrap();
    let head = SupervisedHead::new(
        graph.output_shape().iter().product(),
        5,
        3,
        &QcfsParams::default(),
        &mut rng,
    )
    .unwrap();
    let full = Model::new(graph, Some(head.into_graph())).unwrap();
    put(&root, "decode_model", "ann-backbone", &encode_model(&bare));
    put(&root, "decode_model", "ann-with-head", &encode_model(&full));
    put(
        &root,
        "decode_model",
        "snn-with-head",
        &encode_model(&convert(&full).unwrap()),
    );

    let cfg = Stage2Config {
        n_neurons: 4,
        ..Stage2Config::default()
    };
    let mut state = ClassifierState::new(6, 2, &cfg, 0).unwrap();
    put(&root, "decode_classifier", "fresh", &encode_classifier(&state));
    state.labels = vec![Some(0), None, Some(1), Some(1)];
    state.specialization = vec![0.9, 0.0, 0.6, 1.0];
    put(&root, "decode_classifier", "labelled", &encode_classifier(&state));

    put(
        &root,
        "parse_config",
        "toy",
        ExperimentConfig::toy().to_toml().as_bytes(),
    );
    put(
        &root,
        "parse_config",
        "default",
        ExperimentConfig::default().to_toml().as_bytes(),
    );
    put(
        &root,
        "parse_config",
        "partial",
        b"[stage2]\nn_neurons = 12\n\n[dataset]\nsource = \"folder\"\npath = \"images\"\n",
    );

    let rows = vec![
        ManifestRow {
            path: "cat/001.png".into(),
            class: "cat".into(),
            split: "train".into(),
        },
        ManifestRow {
            path: "dog/a, \"quoted\".png".into(),
            class: "dog".into(),
            split: "test".into(),
        },
        ManifestRow {
            path: "synthetic/7".into(),
            class: "dog".into(),
            split: String::new(),
        },
    ];
    let mut buf = Vec::new();
    write_manifest(&mut buf, &rows).unwrap();
    put(&root, "parse_manifest", "rows", &buf);
    put(&root, "parse_manifest", "header-only", b"path,class,split\n");
    println!("wrote seeds under {}", root.display());
}
