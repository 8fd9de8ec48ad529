use crate::config::{parse_list, required, FileConfig};
use crate::manifest::Recorder;
use crate::{AblateArgs, CliError, EvalArgs, ExportArgs, GenToyArgs, PretrainArgs, ProbeArgs, PromptsArgs, SynthArgs};
use anyhow::Context;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use tab_core::backbone::{load_checkpoint, save_checkpoint, Backbone};
use tab_core::data::{generate_toy_dataset, load_folder_dataset, Dataset};
use tab_core::downstream::{embed_images, evaluate, export_features, finetune_probe, linear_probe, ProbeReport};
use tab_core::experiment::{self, AblationConfig, Axis, ProbeTask};
use tab_core::imaging::{encode_mask_png, encode_png, Image};
use tab_core::prompts::{load_bank, read_lines, save_bank, PromptAssets, PromptBook, PromptSetting, Provenance, PseudoTextEncoder};
use tab_core::rng::derive_rng;
use tab_core::synthesis::{synthesize, SynthRecord};
use tab_core::trainer;

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    load_folder_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn gen_toy(a: GenToyArgs, cfg: FileConfig) -> anyhow::Result<()> {
    let out = required(a.out, &cfg.out, "out")?;
    let seed = cfg.seed.unwrap_or(0);
    cfg.dataset.validate()?;
    if out.exists() && std::fs::read_dir(&out)?.next().is_some() {
        return Err(CliError::Config(format!("{} exists and is not empty", out.display())).into());
    }
    let mut rec = Recorder::start("gen-toy", &cfg);
    rec.seed("dataset", seed);
    let (ds, _) = generate_toy_dataset(&cfg.dataset, seed, &out)?;
    log::info!("wrote {} train and {} test images for {} classes to {}", ds.train.len(), ds.test.len(), ds.classes.len(), out.display());
    rec.output(&out)?;
    rec.finish(&out)?;
    Ok(())
}

#[derive(Serialize)]
struct SynthEntry<'a> {
    stem: String,
    class: &'a str,
    method: &'static str,
    seed: u64,
    noop: bool,
    mask_area: usize,
    params: SynthRecord,
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    schema: &'static str,
    method: &'static str,
    seed: u64,
    samples: Vec<SynthEntry<'a>>,
}

pub fn synth(a: SynthArgs, mut cfg: FileConfig) -> anyhow::Result<()> {
    let data = required(a.data, &cfg.data, "data")?;
    let out = required(a.out, &cfg.out, "out")?;
    if let Some(m) = &a.method {
        cfg.train.synth.method = m.parse()?;
    }
    cfg.train.synth.validate()?;
    let seed = cfg.seed.unwrap_or(0);
    let ds = load_data(&data)?;
    let pool: Vec<usize> = match &a.class {
        Some(c) => {
            let k = ds.class_index(c).ok_or_else(|| CliError::Config(format!("class `{c}` is not in {}", data.display())))?;
            (0..ds.train.len()).filter(|&i| ds.train[i].class == k).collect()
        }
        None => (0..ds.train.len()).collect(),
    };
    if pool.is_empty() {
        return Err(CliError::Data("no train normals to synthesize from".into()).into());
    }
    let mut rec = Recorder::start("synth", &cfg);
    rec.seed("synth", seed);
    rec.input(&data)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let method = cfg.train.synth.method;
    let mut samples = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let s = &ds.train[pool[i % pool.len()]];
        let peers: Vec<&Image> = ds.train.iter().filter(|p| p.class == s.class && !std::ptr::eq(*p, s)).map(|p| &p.image).collect();
        let mut rng = derive_rng(seed, &[i as u64]);
        let source = if peers.is_empty() { &s.image } else { peers[(i * 7 + 3) % peers.len()] };
        let sample = synthesize(&s.image, Some(source), &cfg.train.synth, &mut rng)?;
        let class = ds.classes[s.class].as_str();
        let stem = format!("{class}_{i:04}");
        encode_png(&sample.normal, &out.join(format!("{stem}_n.png")))?;
        encode_png(&sample.anomaly, &out.join(format!("{stem}_a.png")))?;
        encode_mask_png(&sample.mask, &out.join(format!("{stem}_m.png")))?;
        samples.push(SynthEntry {
            stem,
            class,
            method: method.name(),
            seed,
            noop: sample.noop,
            mask_area: sample.mask.area(),
            params: sample.record,
        });
    }
    let noops = samples.iter().filter(|s| s.noop).count();
    if noops > 0 {
        log::warn!("{noops} of {} samples came out unchanged", samples.len());
    }
    write_json(
        &out.join("synth_manifest.json"),
        &SynthManifest {
            schema: tab_core::SCHEMA,
            method: method.name(),
            seed,
            samples,
        },
    )?;
    rec.output(&out)?;
    rec.finish(&out)?;
    Ok(())
}

pub fn prompts(a: PromptsArgs, mut cfg: FileConfig) -> anyhow::Result<()> {
    let out = required(a.out, &cfg.out, "out")?;
    if let Some(s) = &a.setting {
        cfg.prompts.setting = s.parse()?;
    }
    if let Some(d) = a.dim {
        cfg.prompts.dim = Some(d);
    }
    if let Some(dir) = a.assets {
        cfg.prompts.assets = Some(dir);
    }
    if let Some(s) = cfg.seed {
        cfg.prompts.encoder_seed = s;
    }
    let mut rec = Recorder::start("prompts", &cfg);
    let classes: Vec<String> = if let Some(list) = &a.classes {
        parse_list(list, "class")?
    } else if let Some(data) = a.data.as_ref().or(cfg.data.as_ref()) {
        rec.input(data)?;
        load_data(data)?.classes
    } else if !cfg.prompts.classes.is_empty() {
        cfg.prompts.classes.clone()
    } else if let Some(dir) = &cfg.prompts.assets {
        read_lines(&dir.join("classes.txt"))?
    } else {
        return Err(CliError::Config("no classes: pass --classes, --data or an assets dir with classes.txt".into()).into());
    };
    let book = match &cfg.prompts.assets {
        Some(dir) => {
            rec.input(dir)?;
            PromptBook::build(&classes, &PromptAssets::from_dir(dir)?, None)?
        }
        None => PromptBook::for_setting(&classes, cfg.prompts.setting)?,
    };
    let dim = cfg.prompts.dim.unwrap_or(cfg.train.backbone.embed_dim);
    let encoder = PseudoTextEncoder::new(dim, cfg.prompts.encoder_seed)?;
    let bank = book.embed(&encoder, Provenance::Pseudo)?;
    rec.seed("encoder", cfg.prompts.encoder_seed);

    let prompts_out = a.prompts_out.unwrap_or_else(|| sibling(&out, ".prompts.json"));
    std::fs::write(&prompts_out, book.to_json() + "\n").with_context(|| format!("writing {}", prompts_out.display()))?;
    let encoder_info = serde_json::json!({ "name": "pseudo", "dim": dim, "seed": cfg.prompts.encoder_seed });
    save_bank(&bank, &out, Some(encoder_info))?;
    for k in 0..bank.k() {
        log::info!("{}: cos(normal, abnormal) = {:.4}", bank.classes()[k], bank.anchor_cosine(k));
    }
    rec.output(&out)?;
    rec.output(&prompts_out)?;
    rec.finish(&out)?;
    Ok(())
}

pub fn pretrain(a: PretrainArgs, mut cfg: FileConfig) -> anyhow::Result<()> {
    let data = required(a.data, &cfg.data, "data")?;
    let out = required(a.out, &cfg.out, "out")?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.tau {
        t.tau = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(m) = &a.method {
        t.synth.method = m.parse()?;
    }
    if let Some(m) = &a.mode {
        t.mode = m.parse()?;
    }
    t.validate()?;
    let bank_path = a.bank.or_else(|| cfg.bank.clone());
    if cfg.train.mode.uses_bank() && bank_path.is_none() {
        return Err(CliError::Config(format!("--bank is required in {} mode", cfg.train.mode.name())).into());
    }
    let report = a.report.or_else(|| cfg.report.clone()).unwrap_or_else(|| sibling(&out, ".train.jsonl"));

    let mut rec = Recorder::start("pretrain", &cfg);
    rec.seed("train", cfg.train.seed);
    rec.input(&data)?;
    let ds = load_data(&data)?;
    let bank = match (&bank_path, cfg.train.mode.uses_bank()) {
        (Some(p), true) => {
            rec.input(p)?;
            Some(load_bank(p).with_context(|| format!("loading bank {}", p.display()))?)
        }
        _ => None,
    };
    let mut lines = std::io::BufWriter::new(std::fs::File::create(&report).with_context(|| format!("creating {}", report.display()))?);
    let mut write_err = None;
    let outcome = trainer::pretrain(&ds, bank.as_ref(), &cfg.train, &mut |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(lines, "{line}").and_then(|_| lines.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", report.display()));
    }
    let final_path = {
        let ext = out.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
        sibling(&out, &format!(".final{ext}"))
    };
    save_checkpoint(&outcome.best, &out)?;
    save_checkpoint(&outcome.last, &final_path)?;
    let curve = outcome.loss_curve();
    log::info!(
        "loss {:.5} -> {:.5} over {} epochs; {}",
        curve[0],
        curve[curve.len() - 1],
        curve.len(),
        outcome.best.meta.notes.join(", ")
    );
    rec.output(&out)?;
    rec.output(&final_path)?;
    rec.output(&report)?;
    rec.finish(&out)?;
    Ok(())
}

fn backbone_from(ckpt: &Path) -> anyhow::Result<Backbone<f32>> {
    Ok(load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?.backbone)
}

pub fn eval(a: EvalArgs, mut cfg: FileConfig) -> anyhow::Result<()> {
    if a.method != "padim" {
        return Err(CliError::Config(format!("unknown evaluation method `{}` (only padim)", a.method)).into());
    }
    let ckpt = required(a.ckpt, &cfg.ckpt, "ckpt")?;
    let data = required(a.data, &cfg.data, "data")?;
    if let Some(s) = &a.stages {
        cfg.padim.stages = parse_list(s, "stage")?;
    }
    cfg.padim.validate()?;
    let out = a.out.or_else(|| cfg.out.clone());
    let mut rec = Recorder::start("eval", &cfg);
    rec.input(&ckpt)?;
    rec.input(&data)?;
    let net = backbone_from(&ckpt)?;
    let ds = load_data(&data)?;
    let report = evaluate(&net, &ds, &cfg.padim, &data.display().to_string(), &ckpt.display().to_string())?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if let Some(out) = out {
        write_json(&out, &report)?;
        rec.output(&out)?;
        rec.finish(&out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ProbeOutput {
    schema: &'static str,
    checkpoint: String,
    labels: Vec<String>,
    #[serde(flatten)]
    report: ProbeReport,
}

pub fn probe(a: ProbeArgs, cfg: FileConfig) -> anyhow::Result<()> {
    let data = required(a.data, &cfg.data, "data")?;
    let mut rec = Recorder::start("probe", &cfg);
    rec.seed("probe", cfg.probe.seed);
    let (net, checkpoint) = if a.random_init {
        let seed = cfg.train.seed;
        rec.seed("init", seed);
        (experiment::initial_backbone(&cfg.train.backbone, seed)?, format!("random-init/seed{seed}"))
    } else {
        let ckpt = required(a.ckpt, &cfg.ckpt, "ckpt")?;
        rec.input(&ckpt)?;
        (backbone_from(&ckpt)?, ckpt.display().to_string())
    };
    rec.input(&data)?;
    let ds = load_data(&data)?;

    let fit_ds;
    let (labels, train_imgs, train_y, test_imgs, test_y) = match a.labels.as_str() {
        "defect" => {
            let fit = a
                .fit_data
                .ok_or_else(|| CliError::Config("--fit-data is required for defect labels".into()))?;
            rec.input(&fit)?;
            fit_ds = load_data(&fit)?;
            let task = ProbeTask::from_datasets(&[&fit_ds, &ds]);
            let (tri, trl) = task.examples(&fit_ds)?;
            let (tei, tel) = task.examples(&ds)?;
            (task.labels, tri, trl, tei, tel)
        }
        "class" => {
            let (tri, trl) = ds.train.iter().map(|s| (&s.image, s.class)).unzip();
            let (tei, tel) = ds.test.iter().map(|s| (&s.image, s.class)).unzip();
            (ds.classes.clone(), tri, trl, tei, tel)
        }
        other => return Err(CliError::Config(format!("unknown probe labels `{other}` (expected defect or class)")).into()),
    };
    let report = if a.unfreeze {
        finetune_probe(&net, &train_imgs, &train_y, &test_imgs, &test_y, labels.len(), &cfg.probe)?
    } else {
        let tx = embed_images(&net, &train_imgs)?;
        let sx = embed_images(&net, &test_imgs)?;
        linear_probe(&tx, &train_y, &sx, &test_y, labels.len(), &cfg.probe)?
    };
    let output = ProbeOutput {
        schema: tab_core::SCHEMA,
        checkpoint,
        labels,
        report,
    };
    println!("{}", serde_json::to_string_pretty(&output).expect("report serializes"));
    if let Some(out) = a.out.or_else(|| cfg.out.clone()) {
        write_json(&out, &output)?;
        rec.output(&out)?;
        rec.finish(&out)?;
    }
    Ok(())
}

pub fn export_feats(a: ExportArgs, cfg: FileConfig) -> anyhow::Result<()> {
    let ckpt = required(a.ckpt, &cfg.ckpt, "ckpt")?;
    let data = required(a.data, &cfg.data, "data")?;
    let out = required(a.out, &cfg.out, "out")?;
    let mut rec = Recorder::start("export-feats", &cfg);
    rec.input(&ckpt)?;
    rec.input(&data)?;
    let net = backbone_from(&ckpt)?;
    let ds = load_data(&data)?;
    let rows = export_features(&net, &ds, &out)?;
    log::info!("wrote {rows} rows to {}", out.display());
    rec.output(&out)?;
    rec.finish(&out)?;
    Ok(())
}

pub fn ablate(a: AblateArgs, cfg: FileConfig) -> anyhow::Result<()> {
    let data = required(a.data, &cfg.data, "data")?;
    let out = a.out.or_else(|| cfg.out.clone());
    let axis: Axis = a
        .axis
        .as_deref()
        .or(cfg.ablation.axis.as_deref())
        .ok_or_else(|| CliError::Config("--axis is required".into()))?
        .parse()?;
    let variants = match &a.methods {
        Some(list) => parse_list(list, "variant")?,
        None => cfg.ablation.variants.clone(),
    };
    let seeds: Vec<u64> = match (&a.seeds, cfg.seed) {
        (Some(list), _) => parse_list(list, "seed")?,
        (None, _) if !cfg.ablation.seeds.is_empty() => cfg.ablation.seeds.clone(),
        (None, Some(s)) => vec![s],
        (None, None) => vec![0],
    };
    let mut train = cfg.train.clone();
    if let Some(e) = a.epochs {
        train.epochs = e;
    }
    let setting: PromptSetting = cfg.prompts.setting;
    let acfg = AblationConfig {
        axis,
        variants,
        seeds,
        train,
        padim: cfg.padim.clone(),
        setting,
        encoder_seed: cfg.prompts.encoder_seed,
        random_baseline: a.random_baseline || cfg.ablation.random_baseline,
    };
    let mut rec = Recorder::start("ablate", &acfg);
    for &s in &acfg.seeds {
        rec.seed(&format!("train{s}"), s);
    }
    rec.input(&data)?;
    let ds = load_data(&data)?;
    let bank = match a.bank.or_else(|| cfg.bank.clone()) {
        Some(p) => {
            rec.input(&p)?;
            Some(load_bank(&p)?)
        }
        None => None,
    };
    let report = experiment::ablate(&ds, &data.display().to_string(), &acfg, bank.as_ref(), &mut |variant, r| {
        log::info!("{variant} seed {}: image {:.4} pixel {:?} ({} ms)", r.seed, r.image_auroc, r.pixel_auroc, r.wall_ms);
    })?;
    log::info!("ranking: {}", report.ranking().join(" > "));
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if let Some(out) = out {
        write_json(&out, &report)?;
        rec.output(&out)?;
        rec.finish(&out)?;
    }
    Ok(())
}
