use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

const CONFIG: &str = r#"{
  "dataset": {"train_normals": 8, "test_normals": 4, "test_anomalies": 4, "image_size": 32},
  "train": {"epochs": 2, "batch_size": 8,
            "backbone": {"input_size": 32, "stage_channels": [4, 8], "blocks_per_stage": 1, "embed_dim": 8}}
}"#;

fn tab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tab"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = tab(dir, args);
    assert!(out.status.success(), "tab {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// A scratch dir with the small config, a toy dataset and a bank.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    ok(dir.path(), &["--config", "cfg.json", "gen-toy", "--out", "toy", "--seed", "1"]);
    ok(dir.path(), &["--config", "cfg.json", "prompts", "--data", "toy", "--out", "bank.temb"]);
    dir
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn without_timestamps(mut v: Value) -> Value {
    let m = v.as_object_mut().unwrap();
    m.remove("started_unix_ms").unwrap();
    m.remove("wall_ms").unwrap();
    v
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn gen_toy_is_reproducible_and_manifests_differ_only_in_time() {
    let (a, b) = (workspace(), workspace());
    let ta: Vec<_> = tree(&a.path().join("toy")).into_iter().filter(|(p, _)| p != "run_manifest.json").collect();
    let tb: Vec<_> = tree(&b.path().join("toy")).into_iter().filter(|(p, _)| p != "run_manifest.json").collect();
    assert_eq!(ta.len(), 8 * 3 + 8 * 3 + 4 * 3 + 1, "train, test and mask PNGs plus the dataset manifest");
    assert!(ta == tb);
    for rel in ["toy/run_manifest.json", "bank.temb.manifest.json"] {
        let (ma, mb) = (json_file(&a.path().join(rel)), json_file(&b.path().join(rel)));
        assert_eq!(ma["schema"], "tab/1");
        assert_eq!(without_timestamps(ma), without_timestamps(mb), "{rel}");
    }
    let m = json_file(&a.path().join("toy/run_manifest.json"));
    assert_eq!(m["subcommand"], "gen-toy");
    assert_eq!(m["seeds"]["dataset"], 1);
    assert_eq!(m["config"]["dataset"]["image_size"], 32);

    ok(a.path(), &["--config", "cfg.json", "gen-toy", "--out", "other", "--seed", "2"]);
    let other: Vec<_> = tree(&a.path().join("other")).into_iter().filter(|(p, _)| p.ends_with(".png")).collect();
    assert!(other != ta.into_iter().filter(|(p, _)| p.ends_with(".png")).collect::<Vec<_>>());
}

#[test]
fn pretrain_with_a_fixed_seed_is_reproducible() {
    let w = workspace();
    let d = w.path();
    for out in ["a.tabckpt", "b.tabckpt"] {
        ok(d, &["--config", "cfg.json", "pretrain", "--data", "toy", "--bank", "bank.temb", "--out", out, "--seed", "1"]);
    }
    let (a, b) = (std::fs::read(d.join("a.tabckpt")).unwrap(), std::fs::read(d.join("b.tabckpt")).unwrap());
    assert_eq!(&a[..8], b"TABCKPT1");
    assert!(a == b);
    assert!(std::fs::read(d.join("a.final.tabckpt")).unwrap() == std::fs::read(d.join("b.final.tabckpt")).unwrap());
    assert_eq!(std::fs::read(d.join("a.train.jsonl")).ok().map(|t| t.len() > 0), Some(true));

    let report = std::fs::read_to_string(d.join("a.train.jsonl")).unwrap();
    let lines: Vec<Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let keys: Vec<&str> = l.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 4);
        assert_eq!(l["epoch"], i + 1);
        assert!(l["mean_loss"].as_f64().unwrap().is_finite());
        assert!(l["lr"].is_number() && l["wall_ms"].is_number());
    }

    ok(d, &["--config", "cfg.json", "pretrain", "--data", "toy", "--bank", "bank.temb", "--out", "c.tabckpt", "--seed", "2"]);
    assert!(std::fs::read(d.join("c.tabckpt")).unwrap() != a);
}

#[test]
fn eval_emits_a_versioned_report() {
    let w = workspace();
    let d = w.path();
    ok(d, &["--config", "cfg.json", "pretrain", "--data", "toy", "--bank", "bank.temb", "--out", "ck.tabckpt"]);
    let out = ok(d, &["--config", "cfg.json", "eval", "--method", "padim", "--ckpt", "ck.tabckpt", "--data", "toy"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["schema"], "tab/1");
    let auroc = r["image_auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert!((0.0..=1.0).contains(&r["pixel_auroc"].as_f64().unwrap()));
    assert_eq!(r["per_class"].as_array().unwrap().len(), 3);
    assert_eq!(r["config"]["stages"], serde_json::json!([1, 2]));
    assert_eq!(r["checkpoint"], "ck.tabckpt");

    ok(d, &["--config", "cfg.json", "eval", "--ckpt", "ck.tabckpt", "--data", "toy", "--stages", "2", "--out", "e.json"]);
    let e = json_file(&d.join("e.json"));
    assert_eq!(e["config"]["stages"], serde_json::json!([2]));
    let bad = tab(d, &["--config", "cfg.json", "eval", "--ckpt", "ck.tabckpt", "--data", "toy", "--stages", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(d.join("e.json.manifest.json").exists());
}

#[test]
fn ablate_over_synthesis_methods_gives_one_row_each() {
    let w = workspace();
    let d = w.path();
    let out = ok(d, &["--config", "cfg.json", "ablate", "--axis", "synth", "--methods", "nsa,cutpaste,perlin,mask", "--data", "toy", "--epochs", "1"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = r["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|x| x["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["nsa", "cutpaste", "perlin", "mask"]);
    let mut ranks: Vec<u64> = rows.iter().map(|x| x["rank"].as_u64().unwrap()).collect();
    ranks.sort();
    assert_eq!(ranks, [1, 2, 3, 4]);
    assert_eq!(r["axis"], "synth");

    let out = tab(d, &["--config", "cfg.json", "ablate", "--axis", "synth", "--methods", "nsa,dream", "--data", "toy"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_triples_and_a_parameter_manifest() {
    let w = workspace();
    let d = w.path();
    ok(d, &["--config", "cfg.json", "synth", "--data", "toy", "--out", "syn", "--count", "3", "--method", "perlin", "--seed", "4"]);
    let m = json_file(&d.join("syn/synth_manifest.json"));
    let samples = m["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 3);
    assert_eq!(m["method"], "perlin");
    for s in samples {
        let stem = s["stem"].as_str().unwrap();
        for part in ["n", "a", "m"] {
            assert!(d.join(format!("syn/{stem}_{part}.png")).exists());
        }
        assert_eq!(s["seed"], 4);
    }
    assert!(d.join("syn/run_manifest.json").exists());
}

#[test]
fn prompts_write_a_loadable_bank_and_prompt_json() {
    let w = workspace();
    let d = w.path();
    let bank = tab_core::prompts::load_bank(&d.join("bank.temb")).unwrap();
    assert_eq!(bank.classes(), ["blob_object", "checker_texture", "striped_texture"]);
    assert_eq!(bank.dim(), 8);
    let book = tab_core::prompts::PromptBook::from_json(&std::fs::read_to_string(d.join("bank.prompts.json")).unwrap()).unwrap();
    assert_eq!(book.class_names(), bank.classes());

    ok(d, &["prompts", "--classes", "screw,bottle", "--setting", "two_class", "--dim", "16", "--out", "b2.temb"]);
    let b2 = tab_core::prompts::load_bank(&d.join("b2.temb")).unwrap();
    assert_eq!((b2.k(), b2.dim()), (2, 16));
    assert_eq!(b2.classes(), ["screw", "bottle"]);
}

#[test]
fn probe_and_feature_export() {
    let w = workspace();
    let d = w.path();
    ok(d, &["--config", "cfg.json", "gen-toy", "--out", "fit", "--seed", "9"]);
    ok(d, &["--config", "cfg.json", "pretrain", "--data", "toy", "--bank", "bank.temb", "--out", "ck.tabckpt"]);

    let out = ok(d, &["--config", "cfg.json", "probe", "--ckpt", "ck.tabckpt", "--data", "toy", "--fit-data", "fit"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["frozen"], true);
    assert_eq!(r["labels"][0], "good");
    assert_eq!(r["labels"].as_array().unwrap().len(), 5);
    for k in ["accuracy", "precision", "recall", "f1"] {
        assert!((0.0..=1.0).contains(&r[k].as_f64().unwrap()), "{k}");
    }
    let out = ok(d, &["--config", "cfg.json", "probe", "--random-init", "--data", "toy", "--labels", "class", "--unfreeze"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["frozen"], false);

    ok(d, &["--config", "cfg.json", "export-feats", "--ckpt", "ck.tabckpt", "--data", "toy", "--out", "f.csv"]);
    let text = std::fs::read_to_string(d.join("f.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 24 + 24);
    assert!(text.starts_with("sample_id,class,is_anomaly,f0,"));
}

#[test]
fn inputs_are_left_untouched() {
    let w = workspace();
    let d = w.path();
    let before = (tree(&d.join("toy")), std::fs::read(d.join("bank.temb")).unwrap());
    ok(d, &["--config", "cfg.json", "pretrain", "--data", "toy", "--bank", "bank.temb", "--out", "ck.tabckpt"]);
    ok(d, &["--config", "cfg.json", "eval", "--ckpt", "ck.tabckpt", "--data", "toy"]);
    let after = (tree(&d.join("toy")), std::fs::read(d.join("bank.temb")).unwrap());
    assert!(before == after);
}

#[test]
fn exit_codes() {
    let w = workspace();
    let d = w.path();
    let code = |args: &[&str]| tab(d, args).status.code();
    let out = tab(d, &["pretrain", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&["--config", "cfg.json", "eval", "--ckpt", "missing.tabckpt", "--data", "toy"]), Some(3));
    assert_eq!(code(&["--config", "cfg.json", "eval", "--ckpt", "bank.temb", "--data", "toy"]), Some(3));
    assert_eq!(code(&["--config", "cfg.json", "pretrain", "--data", "nowhere", "--bank", "bank.temb", "--out", "x.tabckpt"]), Some(3));
    assert_eq!(code(&["--config", "cfg.json", "pretrain", "--data", "toy", "--bank", "bank.temb", "--out", "x.tabckpt", "--tau", "0"]), Some(2));
    assert_eq!(code(&["--config", "cfg.json", "pretrain", "--data", "toy", "--out", "x.tabckpt"]), Some(2));
    assert_eq!(code(&["--config", "cfg.json", "eval", "--method", "knn", "--ckpt", "x", "--data", "toy"]), Some(2));
    assert_eq!(code(&["--config", "missing.json", "gen-toy", "--out", "t2"]), Some(2));
    std::fs::write(d.join("bad.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    assert_eq!(code(&["--config", "bad.json", "gen-toy", "--out", "t2"]), Some(2));

    // a bank without one of the dataset classes
    ok(d, &["--config", "cfg.json", "prompts", "--classes", "blob_object,checker_texture", "--out", "partial.temb"]);
    assert_eq!(code(&["--config", "cfg.json", "pretrain", "--data", "toy", "--bank", "partial.temb", "--out", "x.tabckpt"]), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_tab"))
        .args(["--config", "cfg.json", "eval", "--ckpt", "x", "--data", "toy"])
        .current_dir(d)
        .env("TAB_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn classification_mode_needs_no_bank_and_thread_cap_keeps_results() {
    let w = workspace();
    let d = w.path();
    ok(d, &["--config", "cfg.json", "pretrain", "--data", "toy", "--mode", "classification", "--out", "cls.tabckpt"]);
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_tab"))
            .args(["--config", "cfg.json", "pretrain", "--data", "toy", "--bank", "bank.temb", "--out", out])
            .current_dir(d)
            .env("TAB_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read(d.join(out)).unwrap()
    };
    assert!(run("1", "t1.tabckpt") == run("3", "t3.tabckpt"));
}
