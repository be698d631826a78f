//! Every text and binary decoder rejects malformed input with an error instead of panicking.

use dirmask_core::config::PipelineConfig;
use dirmask_core::dataset::{instances_to_json, parse_instances_json};
use dirmask_core::heads::{HeadConfig, HeadParams};
use dirmask_core::mask::Mask;
use dirmask_core::params_io::{load_params, parse_params_manifest, save_params};
use dirmask_core::synth::{generate_scene, SynthConfig};
use dirmask_core::t4f::decode_t4f;
use proptest::prelude::*;

fn sample_instances() -> String {
    let cfg = SynthConfig {
        height: 24,
        width: 24,
        min_radius: 3.0,
        max_radius: 5.0,
        min_shapes: 2,
        max_shapes: 2,
        ..SynthConfig::default()
    };
    instances_to_json(&generate_scene(&cfg, 0).unwrap()).unwrap()
}

fn sample_manifest(dir: &std::path::Path) -> String {
    let cfg = HeadConfig {
        out: 5,
        refine_filters: 2,
        ..HeadConfig::default()
    };
    save_params(dir, "abc", &HeadParams::init(&cfg, 4, 0), None).unwrap();
    std::fs::read_to_string(dir.join("manifest.txt")).unwrap()
}

/// Applies byte edits at positions taken modulo the length, keeping the text valid UTF-8.
fn mutate(text: &str, edits: &[(usize, u8)]) -> String {
    let mut bytes = text.as_bytes().to_vec();
    for &(pos, b) in edits {
        if bytes.is_empty() {
            break;
        }
        let p = pos % bytes.len();
        bytes[p] = b;
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

fn edits() -> impl Strategy<Value = Vec<(usize, u8)>> {
    prop::collection::vec((any::<usize>(), prop::sample::select(b"0123456789[]{},:\"-.e \nabx=#".to_vec())), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn instances_json_arbitrary_text(s in ".{0,200}") {
        let _ = parse_instances_json(&s).and_then(|f| f.to_instances());
    }

    #[test]
    fn instances_json_mutations(e in edits()) {
        let text = mutate(&sample_instances(), &e);
        let _ = parse_instances_json(&text).and_then(|f| f.to_instances());
    }

    #[test]
    fn config_arbitrary_text(s in ".{0,200}") {
        let _ = PipelineConfig::from_json(&s);
    }

    #[test]
    fn config_mutations(e in edits()) {
        let text = mutate(&PipelineConfig::default().to_canonical_json().unwrap(), &e);
        if let Ok(cfg) = PipelineConfig::from_json(&text) {
            prop_assert!(cfg.validate().is_ok());
        }
    }

    #[test]
    fn manifest_arbitrary_text(s in "[a-z0-9=#._\\- \n]{0,200}") {
        let _ = parse_params_manifest(&s);
    }

    #[test]
    fn rle_arbitrary_text(s in "[0-9, \n\\-]{0,80}", h in 0usize..6, w in 0usize..6) {
        if let Ok(m) = Mask::from_rle_text(&s, h, w) {
            prop_assert_eq!((m.height(), m.width()), (h, w));
        }
    }

    #[test]
    fn t4f_arbitrary_bytes(b in prop::collection::vec(any::<u8>(), 0..120)) {
        let _ = decode_t4f(&b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn params_directory_with_corrupt_manifest(e in edits()) {
        let dir = tempfile::tempdir().unwrap();
        let text = mutate(&sample_manifest(dir.path()), &e);
        std::fs::write(dir.path().join("manifest.txt"), text).unwrap();
        let _ = load_params(dir.path(), "abc");
    }

    #[test]
    fn params_directory_with_truncated_tensor(cut in 0usize..64) {
        let dir = tempfile::tempdir().unwrap();
        sample_manifest(dir.path());
        let victim = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "t4f"))
            .min()
            .unwrap();
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..cut.min(bytes.len() - 1)]).unwrap();
        prop_assert!(load_params(dir.path(), "abc").is_err());
    }
}
