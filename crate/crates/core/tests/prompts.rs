use proptest::prelude::*;
use std::collections::HashMap;
use tab_core::prompts::{
    expand_prompts, load_bank, pool_class_embedding, save_bank, sidecar_path, EmbeddingBank, PromptAssets, PromptBook, PromptError,
    PromptSetting, Provenance, PseudoTextEncoder, Result, TextEncoder,
};

/// Encoder backed by a lookup table, for exact pooling checks.
struct Table(HashMap<String, Vec<f32>>, usize);

impl TextEncoder for Table {
    fn dim(&self) -> usize {
        self.1
    }
    fn encode(&self, s: &str) -> Result<Vec<f32>> {
        self.0.get(s).cloned().ok_or_else(|| PromptError::Encoder {
            sentence: s.into(),
            detail: "unknown".into(),
        })
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn cartesian_counts() {
    let assets = PromptAssets::default();
    let (n, a) = expand_prompts("screw", &assets).unwrap();
    assert_eq!(n.len(), assets.templates.len() * assets.normal_states.len());
    assert_eq!(a.len(), assets.templates.len() * assets.abnormal_states.len());
    let sym = PromptAssets {
        abnormal_states: names(&["blemished", "damaged", "defective"]),
        ..assets
    };
    let (n, a) = expand_prompts("screw", &sym).unwrap();
    assert_eq!(n.len(), a.len());
}

#[test]
fn pooling_single_sentence_is_its_normalized_embedding() {
    let enc = Table(HashMap::from([("s".to_string(), vec![3.0, 4.0])]), 2);
    let v = pool_class_embedding(&names(&["s"]), &enc).unwrap();
    assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
}

#[test]
fn pooling_orthogonal_pair_scales_by_inverse_sqrt2() {
    let enc = Table(HashMap::from([("a".to_string(), vec![1.0, 0.0, 0.0]), ("b".to_string(), vec![0.0, 1.0, 0.0])]), 3);
    let v = pool_class_embedding(&names(&["a", "b"]), &enc).unwrap();
    let r = std::f32::consts::FRAC_1_SQRT_2;
    assert!((v[0] - r).abs() < 1e-7 && (v[1] - r).abs() < 1e-7 && v[2] == 0.0);
}

#[test]
fn pooling_errors_carry_the_sentence() {
    let enc = Table(HashMap::new(), 2);
    let err = pool_class_embedding(&names(&["missing one"]), &enc).unwrap_err();
    assert!(err.to_string().contains("missing one"));
    assert!(pool_class_embedding(&[], &enc).is_err());
}

#[test]
fn pseudo_encoder_examples() {
    let enc = PseudoTextEncoder::new(128, 0).unwrap();
    let a = enc.encode("a blemished screw").unwrap();
    assert_eq!(a, enc.encode("a blemished screw").unwrap());
    let b = enc.encode("a blemished cable").unwrap();
    let z = enc.encode("zzz").unwrap();
    assert!(cosine(&a, &b) > cosine(&a, &z));
    for v in [&a, &b, &z] {
        assert!((cosine(v, v).sqrt() - 1.0).abs() < 1e-6);
    }
    assert!(PseudoTextEncoder::new(0, 0).is_err());
    assert!(enc.encode("  ...  ").is_err());
}

#[test]
fn anchors_are_distinct_for_every_setting_with_two_sides() {
    let enc = PseudoTextEncoder::new(128, 3).unwrap();
    let classes = names(&["blob_object", "checker_texture", "striped_texture", "screw"]);
    for setting in PromptSetting::ALL {
        let bank = PromptBook::for_setting(&classes, setting).unwrap().embed(&enc, Provenance::Pseudo).unwrap();
        for k in 0..bank.k() {
            let c = bank.anchor_cosine(k);
            if setting == PromptSetting::OneClass {
                assert!((c - 1.0).abs() < 1e-6);
            } else {
                assert!(c < 1.0 - 1e-3, "{setting:?} class {k}: {c}");
            }
        }
    }
}

#[test]
fn label_order_follows_the_class_list() {
    let enc = PseudoTextEncoder::new(16, 1).unwrap();
    let classes = names(&["zeta", "alpha", "mid"]);
    let bank = PromptBook::build(&classes, &PromptAssets::default(), None).unwrap().embed(&enc, Provenance::Pseudo).unwrap();
    assert_eq!(bank.classes(), classes.as_slice());
    assert_eq!(bank.class_index("alpha"), Some(1));
    let solo = PromptBook::build(&names(&["alpha"]), &PromptAssets::default(), None).unwrap().embed(&enc, Provenance::Pseudo).unwrap();
    assert_eq!(solo.normal_row(0), bank.normal_row(1));
    assert!(PromptBook::build(&names(&["a", "a"]), &PromptAssets::default(), None).is_err());
}

#[test]
fn prompt_json_roundtrip() {
    let book = PromptBook::for_setting(&names(&["screw", "grid"]), PromptSetting::IndustrialAssociation).unwrap();
    let json = book.to_json();
    assert!(json.contains("\"schema\": \"tab/1\""));
    assert!(json.contains("\"industrial_association\""));
    assert_eq!(PromptBook::from_json(&json).unwrap(), book);
    assert!(PromptBook::from_json("{\"classes\": 3}").is_err());
}

#[test]
fn assets_load_from_text_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("templates.txt"), "A {state} {class}.\n\nOne {state} {class}\n").unwrap();
    std::fs::write(dir.path().join("states_normal.txt"), "good\n").unwrap();
    std::fs::write(dir.path().join("states_abnormal.txt"), "bad\nbroken\n").unwrap();
    let a = PromptAssets::from_dir(dir.path()).unwrap();
    assert_eq!(a.templates.len(), 2);
    assert!(a.keywords.is_empty());
    let (n, ab) = expand_prompts("gear", &a).unwrap();
    assert_eq!(n, ["A good gear.", "One good gear"]);
    assert_eq!(ab.len(), 4);
    std::fs::write(dir.path().join("templates.txt"), "A photo.\n").unwrap();
    assert!(PromptAssets::from_dir(dir.path()).is_err());
}

fn small_bank() -> EmbeddingBank {
    let enc = PseudoTextEncoder::new(4, 9).unwrap();
    PromptBook::build(&names(&["ab", "xyz"]), &PromptAssets::default(), None)
        .unwrap()
        .embed(&enc, Provenance::Pseudo)
        .unwrap()
}

#[test]
fn bank_file_size_follows_the_layout() {
    let bytes = small_bank().to_bytes();
    // magic + K + C, then u16-prefixed names, then two K×C f32 blocks
    let expected = 8 + 4 + 4 + (2 + 2) + (2 + 3) + 2 * 2 * 4 * 4;
    assert_eq!(bytes.len(), expected);
}

#[test]
fn bank_roundtrip_is_bit_exact_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.temb");
    let bank = small_bank();
    save_bank(&bank, &p, Some(serde_json::json!({"kind": "pseudo", "seed": 9}))).unwrap();
    let back = load_bank(&p).unwrap();
    assert_eq!(back, bank);
    assert_eq!(back.provenance(), Provenance::Pseudo);
    assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
    std::fs::remove_file(sidecar_path(&p)).unwrap();
    assert_eq!(load_bank(&p).unwrap().provenance(), Provenance::Unknown);
}

#[test]
fn corrupt_banks_name_the_offset() {
    let good = small_bank().to_bytes();
    let fmt = |b: &[u8]| match EmbeddingBank::from_bytes(b) {
        Err(PromptError::Format { offset, .. }) => offset,
        other => panic!("expected format error, got {other:?}"),
    };
    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(fmt(&bad), 0);
    for cut in [3, 12, 18, good.len() - 1] {
        assert!(fmt(&good[..cut]) <= cut);
    }
    let mut long = good.clone();
    long.push(0);
    fmt(&long);
    let floats = good.len() - 64;
    let mut nan = good.clone();
    nan[floats + 8..floats + 12].copy_from_slice(&f32::NAN.to_le_bytes());
    assert_eq!(fmt(&nan), floats + 8);
    let mut scaled = good.clone();
    let v = f32::from_le_bytes(scaled[floats + 16..floats + 20].try_into().unwrap());
    scaled[floats + 16..floats + 20].copy_from_slice(&(v * 1.5 + 0.1).to_le_bytes());
    assert_eq!(fmt(&scaled), floats + 16);
}

#[test]
fn bank_written_by_python_loads() {
    let p = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/python_bank.temb");
    let bank = load_bank(&p).unwrap();
    assert_eq!(bank.classes(), ["screw", "metal_nut"]);
    assert_eq!(bank.dim(), 4);
    assert_eq!(bank.normal_row(0), [0.6f32, 0.8, 0.0, 0.0]);
    assert_eq!(bank.abnormal_row(1), [0.5f32; 4]);
    assert!(bank.anchor_cosine(0).abs() < 1e-6);
    assert_eq!(bank.to_bytes(), std::fs::read(&p).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_is_invariant_to_duplication(seed in 0u64..1000, n in 1usize..6) {
        let enc = PseudoTextEncoder::new(32, seed).unwrap();
        let sentences: Vec<String> = (0..n).map(|i| format!("sentence number {i} of {seed}")).collect();
        let doubled: Vec<String> = sentences.iter().chain(&sentences).cloned().collect();
        let a = pool_class_embedding(&sentences, &enc).unwrap();
        let b = pool_class_embedding(&doubled, &enc).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        prop_assert!((cosine(&a, &a) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn random_banks_roundtrip(k in 1usize..5, c in 2usize..9, seed in 0u64..1000) {
        let enc = PseudoTextEncoder::new(c, seed).unwrap();
        let classes: Vec<String> = (0..k).map(|i| format!("class_{i}_é")).collect();
        let bank = PromptBook::build(&classes, &PromptAssets::default(), None).unwrap().embed(&enc, Provenance::Pseudo).unwrap();
        let back = EmbeddingBank::from_bytes(&bank.to_bytes()).unwrap();
        prop_assert_eq!(back.with_provenance(Provenance::Pseudo), bank);
    }
}
