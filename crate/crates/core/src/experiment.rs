//! Seeded train-then-evaluate trials and one-axis ablations over them.
//! The CLI `ablate` command and the acceptance suite both run through here.

use crate::backbone::{Backbone, BackboneConfig, Checkpoint};
use crate::data::{Dataset, Sample};
use crate::downstream::{embed_images, evaluate, linear_probe, DownstreamError, EvalReport, PadimConfig, ProbeConfig, ProbeReport};
use crate::imaging::Image;
use crate::prompts::{EmbeddingBank, PromptBook, PromptError, PromptSetting, Provenance, PseudoTextEncoder};
use crate::rng::derive_rng;
use crate::synthesis::{synthesize, SynthMethod};
use crate::trainer::{cosine_gap, pretrain, TrainConfig, TrainError, TrainMode, TrainOutcome};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// The untrained network `pretrain` would start from with this seed.
pub fn initial_backbone(config: &BackboneConfig, seed: u64) -> Result<Backbone<f32>> {
    Ok(Backbone::init(config.clone(), &mut derive_rng(seed, &[0])).map_err(TrainError::from)?)
}

/// Pseudo-encoder bank for `classes` under a prompt setting.
pub fn pseudo_bank(classes: &[String], setting: PromptSetting, dim: usize, encoder_seed: u64) -> Result<EmbeddingBank> {
    let book = PromptBook::for_setting(classes, setting)?;
    Ok(book.embed(&PseudoTextEncoder::new(dim, encoder_seed)?, Provenance::Pseudo)?)
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub outcome: TrainOutcome,
    /// PaDiM on the best-loss checkpoint.
    pub report: EvalReport,
    pub wall_ms: u64,
}

impl Trial {
    pub fn checkpoint(&self) -> &Checkpoint {
        &self.outcome.best
    }
}

pub fn train_and_evaluate(ds: &Dataset, bank: Option<&EmbeddingBank>, train: &TrainConfig, padim: &PadimConfig, dataset_name: &str) -> Result<Trial> {
    let t0 = Instant::now();
    let outcome = pretrain(ds, bank, train, &mut |_| {})?;
    let name = format!("{}/seed{}/best", train.mode.name(), train.seed);
    let report = evaluate(&outcome.best.backbone, ds, padim, dataset_name, &name)?;
    Ok(Trial {
        outcome,
        report,
        wall_ms: t0.elapsed().as_millis() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Anomaly synthesis method, with two-sided alignment.
    Synth,
    /// Training objective.
    Align,
    /// Prompt setting of the pseudo bank.
    Prompt,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Synth => "synth",
            Axis::Align => "align",
            Axis::Prompt => "prompt",
        }
    }

    pub fn default_variants(self) -> Vec<String> {
        match self {
            Axis::Synth => SynthMethod::ALL.iter().map(|m| m.name().to_string()).collect(),
            Axis::Align => TrainMode::ALL.iter().map(|m| m.name().to_string()).collect(),
            Axis::Prompt => PromptSetting::ALL.iter().map(|s| s.name().to_string()).collect(),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(Axis::Synth),
            "align" => Ok(Axis::Align),
            "prompt" => Ok(Axis::Prompt),
            _ => Err(ExperimentError::Config(format!("unknown axis `{s}` (expected synth, align or prompt)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub axis: Axis,
    /// Empty means every variant of the axis.
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// Shared settings; the axis overrides one field per variant.
    pub train: TrainConfig,
    pub padim: PadimConfig,
    /// Bank setting for the synth and align axes.
    pub setting: PromptSetting,
    pub encoder_seed: u64,
    /// Also score the untrained network of every seed.
    pub random_baseline: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            axis: Axis::Synth,
            variants: vec![],
            seeds: vec![0, 1, 2, 3, 4],
            train: TrainConfig::default(),
            padim: PadimConfig::default(),
            setting: PromptSetting::IndustrialAssociation,
            encoder_seed: 0,
            random_baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub image_auroc: f64,
    pub pixel_auroc: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// 1 is best, by median image AUROC.
    pub rank: usize,
    pub image_auroc: f64,
    pub pixel_auroc: Option<f64>,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema: String,
    pub axis: Axis,
    pub dataset: String,
    /// Rows in the requested variant order; see `rank` for the ordering.
    pub rows: Vec<AblationRow>,
    pub random_baseline: Option<AblationRow>,
    pub config: AblationConfig,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Variant names from best to worst.
    pub fn ranking(&self) -> Vec<&str> {
        let mut rows: Vec<&AblationRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.rank);
        rows.into_iter().map(|r| r.variant.as_str()).collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn summarize(variant: String, per_seed: Vec<SeedResult>) -> AblationRow {
    let img: Vec<f64> = per_seed.iter().map(|r| r.image_auroc).collect();
    let px: Option<Vec<f64>> = per_seed.iter().map(|r| r.pixel_auroc).collect();
    AblationRow {
        variant,
        rank: 0,
        image_auroc: median(&img),
        pixel_auroc: px.map(|p| median(&p)),
        per_seed,
    }
}

/// One variant's training config and bank.
fn variant_setup(cfg: &AblationConfig, variant: &str, classes: &[String], fixed_bank: Option<&EmbeddingBank>) -> Result<(TrainConfig, Option<EmbeddingBank>)> {
    let mut train = cfg.train.clone();
    let dim = train.backbone.embed_dim;
    let default_bank = || -> Result<EmbeddingBank> {
        match fixed_bank {
            Some(b) => Ok(b.clone()),
            None => pseudo_bank(classes, cfg.setting, dim, cfg.encoder_seed),
        }
    };
    let bank = match cfg.axis {
        Axis::Synth => {
            train.mode = TrainMode::TwoSided;
            train.synth.method = variant.parse().map_err(|e: crate::synthesis::SynthError| ExperimentError::Config(e.to_string()))?;
            Some(default_bank()?)
        }
        Axis::Align => {
            train.mode = variant.parse()?;
            train.mode.uses_bank().then(default_bank).transpose()?
        }
        Axis::Prompt => {
            let setting: PromptSetting = variant.parse()?;
            train.mode = TrainMode::TwoSided;
            Some(pseudo_bank(classes, setting, dim, cfg.encoder_seed)?)
        }
    };
    Ok((train, bank))
}

/// Trains every (variant, seed) pair and ranks variants by median image
/// AUROC. `bank` replaces the pseudo bank on the synth and align axes.
/// `on_trial` sees each finished run.
pub fn ablate(
    ds: &Dataset,
    dataset_name: &str,
    cfg: &AblationConfig,
    bank: Option<&EmbeddingBank>,
    on_trial: &mut dyn FnMut(&str, &SeedResult),
) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(ExperimentError::Config("no seeds".into()));
    }
    let variants = if cfg.variants.is_empty() { cfg.axis.default_variants() } else { cfg.variants.clone() };
    for (i, v) in variants.iter().enumerate() {
        if variants[..i].contains(v) {
            return Err(ExperimentError::Config(format!("variant `{v}` listed twice")));
        }
    }
    // resolve every variant before spending time on training
    let setups: Vec<(TrainConfig, Option<EmbeddingBank>)> = variants.iter().map(|v| variant_setup(cfg, v, &ds.classes, bank)).collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(variants.len());
    for (variant, (train, bank)) in variants.iter().zip(&setups) {
        let mut per_seed = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let tc = TrainConfig { seed, ..train.clone() };
            let trial = train_and_evaluate(ds, bank.as_ref(), &tc, &cfg.padim, dataset_name)?;
            let r = SeedResult {
                seed,
                image_auroc: trial.report.image_auroc,
                pixel_auroc: trial.report.pixel_auroc,
                final_loss: trial.outcome.history.last().map(|h| h.mean_loss),
                wall_ms: trial.wall_ms,
            };
            on_trial(variant, &r);
            per_seed.push(r);
        }
        rows.push(summarize(variant.clone(), per_seed));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].image_auroc.total_cmp(&rows[a].image_auroc).then(a.cmp(&b)));
    for (rank, &i) in order.iter().enumerate() {
        rows[i].rank = rank + 1;
    }

    let random_baseline = if cfg.random_baseline {
        let mut per_seed = Vec::new();
        for &seed in &cfg.seeds {
            let t0 = Instant::now();
            let net = initial_backbone(&cfg.train.backbone, seed)?;
            let rep = evaluate(&net, ds, &cfg.padim, dataset_name, &format!("random/seed{seed}"))?;
            let r = SeedResult {
                seed,
                image_auroc: rep.image_auroc,
                pixel_auroc: rep.pixel_auroc,
                final_loss: None,
                wall_ms: t0.elapsed().as_millis() as u64,
            };
            on_trial("random_init", &r);
            per_seed.push(r);
        }
        Some(summarize("random_init".into(), per_seed))
    } else {
        None
    };

    Ok(AblationReport {
        schema: crate::SCHEMA.into(),
        axis: cfg.axis,
        dataset: dataset_name.into(),
        rows,
        random_baseline,
        config: cfg.clone(),
    })
}

/// Mean cosine gaps after training. The separation property holds when
/// held-out normals sit on the normal side (`normals > 0`) and synthetic
/// anomalies on the abnormal side (`synthetic < 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub normals: f64,
    pub synthetic: f64,
    pub test_anomalies: Option<f64>,
}

impl Separation {
    pub fn holds(&self) -> bool {
        self.normals > 0.0 && self.synthetic < 0.0
    }
}

/// Gaps on the test normals and on anomalies synthesized from them with
/// `train`'s synthesis settings under a stream disjoint from training.
pub fn separation(backbone: &Backbone<f32>, bank: &EmbeddingBank, ds: &Dataset, train: &TrainConfig) -> Result<Separation> {
    let normals: Vec<&Sample> = ds.test.iter().filter(|s| !s.anomalous).collect();
    if normals.is_empty() {
        return Err(ExperimentError::Config("no held-out normals".into()));
    }
    let mut synthetic = Vec::with_capacity(normals.len());
    for (i, s) in normals.iter().enumerate() {
        let peer = normals
            .iter()
            .cycle()
            .skip(i + 1)
            .take(normals.len())
            .find(|p| p.class == s.class && !std::ptr::eq(**p, *s))
            .map_or(&s.image, |p| &p.image);
        let mut rng = derive_rng(train.seed ^ 0x5e9a_7a7e, &[i as u64]);
        synthetic.push((synthesize(&s.image, Some(peer), &train.synth, &mut rng).map_err(TrainError::from)?.anomaly, s.class));
    }
    let gap = |items: &[(&Image, usize)]| cosine_gap(backbone, bank, &ds.classes, items);
    let normal_items: Vec<(&Image, usize)> = normals.iter().map(|s| (&s.image, s.class)).collect();
    let synth_items: Vec<(&Image, usize)> = synthetic.iter().map(|(im, c)| (im, *c)).collect();
    let anomalies: Vec<(&Image, usize)> = ds.test.iter().filter(|s| s.anomalous).map(|s| (&s.image, s.class)).collect();
    Ok(Separation {
        normals: gap(&normal_items)?,
        synthetic: gap(&synth_items)?,
        test_anomalies: if anomalies.is_empty() { None } else { Some(gap(&anomalies)?) },
    })
}

/// Defect-state labels for probing: `good` first, then the defect names in
/// sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub labels: Vec<String>,
}

impl ProbeTask {
    pub fn from_datasets(sets: &[&Dataset]) -> Self {
        let mut defects: Vec<String> = sets.iter().flat_map(|d| d.test.iter().filter_map(|s| s.defect.clone())).collect();
        defects.sort();
        defects.dedup();
        let mut labels = vec!["good".to_string()];
        labels.extend(defects);
        Self { labels }
    }

    /// Test-split images of `ds` with their label indices.
    pub fn examples<'a>(&self, ds: &'a Dataset) -> Result<(Vec<&'a Image>, Vec<usize>)> {
        let mut imgs = Vec::with_capacity(ds.test.len());
        let mut ys = Vec::with_capacity(ds.test.len());
        for s in &ds.test {
            let name = s.defect.as_deref().unwrap_or("good");
            let y = self
                .labels
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| ExperimentError::Config(format!("defect `{name}` is not a probe label")))?;
            imgs.push(&s.image);
            ys.push(y);
        }
        Ok((imgs, ys))
    }
}

/// Frozen linear probe over defect states: fit on the test split of
/// `fit_on`, score on the test split of `score_on`.
pub fn defect_probe(backbone: &Backbone<f32>, fit_on: &Dataset, score_on: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let task = ProbeTask::from_datasets(&[fit_on, score_on]);
    let (train_imgs, train_y) = task.examples(fit_on)?;
    let (test_imgs, test_y) = task.examples(score_on)?;
    let train_x = embed_images(backbone, &train_imgs)?;
    let test_x = embed_images(backbone, &test_imgs)?;
    Ok(linear_probe(&train_x, &train_y, &test_x, &test_y, task.labels.len(), cfg)?)
}

/// Frozen linear probe over object classes: fit on the train split, score
/// on the whole test split.
pub fn class_probe(backbone: &Backbone<f32>, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let (train_imgs, train_y): (Vec<&Image>, Vec<usize>) = ds.train.iter().map(|s| (&s.image, s.class)).unzip();
    let (test_imgs, test_y): (Vec<&Image>, Vec<usize>) = ds.test.iter().map(|s| (&s.image, s.class)).unzip();
    let train_x = embed_images(backbone, &train_imgs)?;
    let test_x = embed_images(backbone, &test_imgs)?;
    Ok(linear_probe(&train_x, &train_y, &test_x, &test_y, ds.classes.len(), cfg)?)
}
