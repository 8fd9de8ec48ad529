use std::collections::BTreeMap;
use std::path::Path;
use tab_core::data::{build_toy_dataset, content_hash, generate_toy_dataset, load_folder_dataset, DataError, DatasetSpec, MANIFEST_FILE};
use tab_core::imaging::{encode_mask_png, encode_png, Image, Mask, Rect};

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        train_normals: 6,
        test_normals: 3,
        test_anomalies: 5,
        ..DatasetSpec::default()
    }
}

fn tree_digest(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn file_counts_match_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let (ds, manifest) = generate_toy_dataset(&spec, 3, dir.path()).unwrap();
    assert_eq!(ds.classes, ["blob_object", "checker_texture", "striped_texture"]);
    let files = tree_digest(dir.path());
    for class in &ds.classes {
        let count = |prefix: &str| files.keys().filter(|k| k.starts_with(&format!("{class}/{prefix}"))).count();
        assert_eq!(count("train/good/"), 6);
        assert_eq!(count("test/good/"), 3);
        assert_eq!(count("test/") - count("test/good/"), 5);
        assert_eq!(count("ground_truth/"), 5);
    }
    assert_eq!(files.len(), 3 * (6 + 3 + 5 + 5) + 1);
    assert!(files.contains_key(MANIFEST_FILE));
    assert_eq!(manifest.classes.len(), 3);
    assert_eq!(manifest.classes[1].train.len(), 6);
    assert_eq!(manifest.classes[1].test.len(), 8);
}

#[test]
fn same_spec_and_seed_give_identical_trees() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_toy_dataset(&small_spec(), 9, a.path()).unwrap();
    generate_toy_dataset(&small_spec(), 9, b.path()).unwrap();
    generate_toy_dataset(&small_spec(), 10, c.path()).unwrap();
    assert_eq!(tree_digest(a.path()), tree_digest(b.path()));
    assert_ne!(tree_digest(a.path()), tree_digest(c.path()));
}

#[test]
fn every_injected_anomaly_has_a_nonempty_mask() {
    let ds = build_toy_dataset(
        &DatasetSpec {
            test_anomalies: 24,
            ..small_spec()
        },
        4,
    )
    .unwrap();
    let anomalies: Vec<_> = ds.test.iter().filter(|s| s.anomalous).collect();
    assert_eq!(anomalies.len(), 72);
    for s in anomalies {
        let m = s.mask.as_ref().expect("mask");
        assert!(!m.is_empty());
        assert_eq!((m.width(), m.height()), s.image.dims());
    }
    // all four injector methods appear as defect types
    let mut kinds: Vec<_> = ds.test.iter().filter_map(|s| s.defect.clone()).collect();
    kinds.sort();
    kinds.dedup();
    assert_eq!(kinds, ["cutpaste", "mask", "nsa", "perlin"]);
}

#[test]
fn generated_tree_loads_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = generate_toy_dataset(&small_spec(), 5, dir.path()).unwrap();
    let back = load_folder_dataset(dir.path()).unwrap();
    assert_eq!(back.classes, ds.classes);
    let key = |s: &tab_core::data::Sample| (s.class, s.defect.clone(), s.stem.clone());
    let mut want = ds.test.clone();
    want.sort_by_key(key);
    let mut got = back.test.clone();
    got.sort_by_key(key);
    assert_eq!(got, want);
    assert_eq!(back.train, ds.train);
    for s in back.test.iter().filter(|s| !s.anomalous) {
        assert!(s.mask.is_none() && s.defect.is_none());
    }
}

#[test]
fn no_content_shared_between_splits() {
    let ds = build_toy_dataset(&DatasetSpec::default(), 0).unwrap();
    let train: std::collections::HashSet<_> = ds.train.iter().map(|s| content_hash(&s.image)).collect();
    assert_eq!(train.len(), ds.train.len());
    assert!(ds.test.iter().all(|s| !train.contains(&content_hash(&s.image))));
    assert_eq!(ds.train.len(), 600);
    assert_eq!(ds.test.len(), 300);
}

fn write_img(path: &Path, rgb: [u8; 3]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    encode_png(&Image::filled(8, 8, rgb), path).unwrap();
}

#[test]
fn classes_sort_regardless_of_creation_order() {
    let dir = tempfile::tempdir().unwrap();
    for (i, name) in ["zipper", "bottle", "cable"].iter().enumerate() {
        write_img(&dir.path().join(name).join("train/good/000.png"), [i as u8, 0, 0]);
    }
    let ds = load_folder_dataset(dir.path()).unwrap();
    assert_eq!(ds.classes, ["bottle", "cable", "zipper"]);
    assert_eq!(ds.train[0].image.get(0, 0), [1, 0, 0]);
    assert_eq!(ds.train[2].class, 2);
}

#[test]
fn missing_mask_flags_image_level_only() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("screw");
    write_img(&root.join("train/good/a.png"), [1, 1, 1]);
    write_img(&root.join("test/good/b.png"), [2, 2, 2]);
    write_img(&root.join("test/scratch/c.png"), [3, 3, 3]);
    write_img(&root.join("test/scratch/d.png"), [4, 4, 4]);
    std::fs::create_dir_all(root.join("ground_truth/scratch")).unwrap();
    let m = Mask::from_rect(8, 8, Rect::new(1, 1, 2, 2));
    encode_mask_png(&m, &root.join("ground_truth/scratch/d_mask.png")).unwrap();
    // a class with only empty folders is skipped
    std::fs::create_dir_all(dir.path().join("empty/train/good")).unwrap();

    let ds = load_folder_dataset(dir.path()).unwrap();
    assert_eq!(ds.classes, ["screw"]);
    let by_stem = |st: &str| ds.test.iter().find(|s| s.stem == st).unwrap();
    assert!(!by_stem("b").anomalous);
    assert!(by_stem("c").anomalous && by_stem("c").image_level_only());
    assert_eq!(by_stem("d").mask.as_ref(), Some(&m));
    assert!(!by_stem("d").image_level_only());
}

#[test]
fn duplicate_content_across_splits_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("bottle");
    write_img(&root.join("train/good/000.png"), [9, 9, 9]);
    write_img(&root.join("test/good/000.png"), [9, 9, 9]);
    assert!(matches!(load_folder_dataset(dir.path()), Err(DataError::Duplicate { .. })));
}

#[test]
fn bad_roots_and_specs_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_folder_dataset(&dir.path().join("nope")).is_err());
    assert!(load_folder_dataset(dir.path()).is_err());
    for spec in [
        DatasetSpec {
            train_normals: 0,
            ..small_spec()
        },
        DatasetSpec {
            classes: vec![],
            ..small_spec()
        },
        DatasetSpec {
            defect_methods: vec![],
            ..small_spec()
        },
    ] {
        assert!(matches!(build_toy_dataset(&spec, 0), Err(DataError::Config(_))));
    }
    let mut dup = small_spec();
    dup.classes[1].name = dup.classes[0].name.clone();
    assert!(build_toy_dataset(&dup, 0).is_err());
}

#[test]
fn spec_json_roundtrip() {
    let spec = DatasetSpec::default();
    let s = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<DatasetSpec>(&s).unwrap(), spec);
    assert!(s.contains("\"pattern\":\"blobs\""));
    let partial: DatasetSpec = serde_json::from_str(r#"{"train_normals": 10}"#).unwrap();
    assert_eq!(partial.train_normals, 10);
    assert_eq!(partial.classes.len(), 3);
}
