//! Text-anchored pre-training: each normal image is paired with a synthetic
//! anomaly made from it, both are embedded, and the embeddings are pulled
//! toward the normal and abnormal text anchors of their class.

mod loss;

pub use loss::{alignment_loss, alignment_loss_var, logits_var, one_hot, similarity_logits};

use crate::backbone::{images_to_tensor, Backbone, BackboneConfig, BackboneError, Checkpoint, CheckpointMeta};
use crate::data::{Dataset, Sample};
use crate::imaging::Image;
use crate::prompts::EmbeddingBank;
use crate::rng::derive_rng;
use crate::synthesis::{synthesize, SynthConfig, SynthError};
use crate::tensor::{Adam, Element, Optimizer, Sgd, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Synthesis(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Normals toward normal anchors and anomalies toward abnormal anchors.
    TwoSided,
    /// Normals toward normal anchors only; no anomalies are synthesized.
    NormalOnly,
    /// Binary normal/anomalous head on pooled features; no text bank.
    Classification,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::TwoSided, TrainMode::NormalOnly, TrainMode::Classification];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::TwoSided => "two_sided",
            TrainMode::NormalOnly => "normal_only",
            TrainMode::Classification => "classification",
        }
    }

    pub fn uses_bank(self) -> bool {
        self != TrainMode::Classification
    }
}

impl std::str::FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown mode `{s}` (expected two_sided, normal_only or classification)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub optimizer: OptimizerKind,
    /// Online anomaly synthesis; a fresh draw per sample per epoch.
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    /// Caps the batches per epoch; `None` walks the whole train split.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            tau: 0.07,
            seed: 0,
            mode: TrainMode::TwoSided,
            optimizer: OptimizerKind::Adam,
            synth: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(TrainError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(TrainError::Config("max_batches_per_epoch must be at least 1".into()));
        }
        self.synth.validate()?;
        self.backbone.validate()?;
        Ok(())
    }
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights at the lowest epoch-mean loss.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Synthesis draws that left the image unchanged.
    pub noop_synth: usize,
}

impl TrainOutcome {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.mean_loss).collect()
    }
}

/// Frozen text anchors laid out for the logits matmul.
#[derive(Debug, Clone)]
pub struct Anchors<T: Element> {
    /// `[C, K]`
    pub normal_t: Tensor<T>,
    /// `[C, K]`
    pub abnormal_t: Tensor<T>,
}

impl<T: Element> Anchors<T> {
    pub fn from_bank(bank: &EmbeddingBank) -> Result<Self> {
        Ok(Self {
            normal_t: bank.normal_matrix().transposed()?.cast(),
            abnormal_t: bank.abnormal_matrix().transposed()?.cast(),
        })
    }
}

/// Two-way linear head used by the classification baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryHead<T: Element> {
    /// `[C_last, 2]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> BinaryHead<T> {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * 2).map(|_| T::cast_from(rng.random_range(-bound..bound))).collect();
        Self {
            weight: Tensor::new(vec![in_dim, 2], w).expect("shape matches"),
            bias: Tensor::zeros(vec![2]),
        }
    }

    /// `[B, 2]` logits from pooled features, given the head's tape handles.
    pub fn logits(tape: &mut Tape<T>, pooled: Var, vars: (Var, Var)) -> Result<Var> {
        let z = tape.matmul(pooled, vars.0)?;
        Ok(tape.add_bias(z, vars.1)?)
    }
}

/// Builds the scalar training loss for one paired batch. `x_a` may be `None`
/// only in normal-only mode; the head is required in classification mode.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Element>(
    tape: &mut Tape<T>,
    backbone: &Backbone<T>,
    vars: &[Var],
    head: Option<(Var, Var)>,
    mode: TrainMode,
    anchors: Option<&Anchors<T>>,
    tau: f64,
    x_n: &Tensor<T>,
    x_a: Option<&Tensor<T>>,
    y: &[usize],
) -> Result<Var> {
    let b = x_n.shape()[0];
    if y.len() != b {
        return Err(TrainError::Config(format!("{} labels for {b} images", y.len())));
    }
    let input = match (mode, x_a) {
        (TrainMode::NormalOnly, _) => x_n.clone(),
        (_, Some(x_a)) => {
            if x_a.shape() != x_n.shape() {
                return Err(TrainError::Config("anomaly batch does not match the normal batch".into()));
            }
            let mut data = x_n.data().to_vec();
            data.extend_from_slice(x_a.data());
            let mut shape = x_n.shape().to_vec();
            shape[0] = 2 * b;
            Tensor::new(shape, data)?
        }
        (_, None) => return Err(TrainError::Config(format!("{} mode needs an anomaly batch", mode.name()))),
    };
    let x = tape.constant(input);
    let f = backbone.forward(tape, vars, x)?;
    match mode {
        TrainMode::Classification => {
            let head = head.ok_or_else(|| TrainError::Config("classification mode needs a head".into()))?;
            let z = BinaryHead::logits(tape, f.pooled, head)?;
            let targets: Vec<usize> = (0..2 * b).map(|i| usize::from(i >= b)).collect();
            Ok(tape.softmax_cross_entropy(z, &targets)?)
        }
        TrainMode::TwoSided | TrainMode::NormalOnly => {
            let anchors = anchors.ok_or_else(|| TrainError::Config("alignment needs text anchors".into()))?;
            let an = tape.constant(anchors.normal_t.clone());
            if mode == TrainMode::NormalOnly {
                let m_n = logits_var(tape, f.embedding, an, tau)?;
                return Ok(alignment_loss_var(tape, m_n, None, y, 0.0)?);
            }
            let aa = tape.constant(anchors.abnormal_t.clone());
            let e_n = tape.slice_rows(f.embedding, 0, b)?;
            let e_a = tape.slice_rows(f.embedding, b, 2 * b)?;
            let m_n = logits_var(tape, e_n, an, tau)?;
            let m_a = logits_var(tape, e_a, aa, tau)?;
            Ok(alignment_loss_var(tape, m_n, Some(m_a), y, 1.0)?)
        }
    }
}

// Stream tags under derive_rng(seed, ...).
const INIT: u64 = 0;
const HEAD: u64 = 1;
const SHUFFLE: u64 = 2;
const SYNTH: u64 = 3;

/// Maps every dataset class to its bank row; errors before any training if
/// a class is missing.
pub fn bank_labels(ds: &Dataset, bank: &EmbeddingBank) -> Result<Vec<usize>> {
    ds.classes
        .iter()
        .map(|c| bank.class_index(c).ok_or_else(|| TrainError::Config(format!("class `{c}` is not in the embedding bank (bank has {:?})", bank.classes()))))
        .collect()
}

/// Synthetic anomaly for train sample `idx` in `epoch`. The NSA source is
/// drawn uniformly from the same class, the sample itself included; the
/// stream depends only on `(seed, epoch, idx)`, so worker count does not
/// matter.
fn draw_anomaly(ds: &Dataset, by_class: &[Vec<usize>], idx: usize, epoch: usize, cfg: &TrainConfig) -> Result<(Image, bool)> {
    let s: &Sample = &ds.train[idx];
    let mut rng = derive_rng(cfg.seed, &[SYNTH, epoch as u64, idx as u64]);
    let peers = &by_class[s.class];
    let source = &ds.train[peers[rng.random_range(0..peers.len())]].image;
    let out = synthesize(&s.image, Some(source), &cfg.synth, &mut rng)?;
    Ok((out.anomaly, out.noop))
}

/// Stored in every checkpoint: these choices are ours, not a published recipe.
pub const RUN_NOTES: [&str; 2] = [
    "schedule (optimizer, lr, batch size, epochs, online synthesis) is a local default",
    "backbone is a small residual CNN standing in for resnet18",
];

/// Runs pre-training. `bank` is required unless the mode is classification.
/// `on_epoch` sees each report line as it is produced.
pub fn pretrain(ds: &Dataset, bank: Option<&EmbeddingBank>, cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(TrainError::Config("train split is empty".into()));
    }
    let (labels, anchors) = if cfg.mode.uses_bank() {
        let bank = bank.ok_or_else(|| TrainError::Config(format!("{} mode needs an embedding bank", cfg.mode.name())))?;
        if bank.dim() != cfg.backbone.embed_dim {
            return Err(TrainError::Config(format!(
                "bank dimension {} does not match backbone embedding dimension {}",
                bank.dim(),
                cfg.backbone.embed_dim
            )));
        }
        (bank_labels(ds, bank)?, Some(Anchors::<f32>::from_bank(bank)?))
    } else {
        ((0..ds.classes.len()).collect(), None)
    };
    if let Some(s) = ds.train.iter().find(|s| s.image.dims() != (cfg.backbone.input_size, cfg.backbone.input_size)) {
        return Err(TrainError::Config(format!(
            "image {} is {:?}, backbone expects {}x{}",
            s.stem,
            s.image.dims(),
            cfg.backbone.input_size,
            cfg.backbone.input_size
        )));
    }

    let mut backbone: Backbone<f32> = Backbone::init(cfg.backbone.clone(), &mut derive_rng(cfg.seed, &[INIT]))?;
    let c_last = *cfg.backbone.stage_channels.last().expect("validated");
    let mut head = (cfg.mode == TrainMode::Classification).then(|| BinaryHead::<f32>::init(c_last, &mut derive_rng(cfg.seed, &[HEAD])));
    let mut opt: Box<dyn Optimizer> = match cfg.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(cfg.lr)),
        OptimizerKind::Sgd => Box::new(Sgd::new(cfg.lr)),
    };

    let mut by_class = vec![Vec::new(); ds.classes.len()];
    for (i, s) in ds.train.iter().enumerate() {
        by_class[s.class].push(i);
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Backbone<f32>)> = None;
    let mut noop_synth = 0;
    let mut steps = 0u64;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[SHUFFLE, epoch as u64]));
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if let Some(cap) = cfg.max_batches_per_epoch {
            batches.truncate(cap);
        }
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in batches {
            let normals: Vec<&Image> = batch.iter().map(|&i| &ds.train[i].image).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[ds.train[i].class]).collect();
            let x_n = images_to_tensor::<f32>(&normals)?;
            let x_a = if cfg.mode == TrainMode::NormalOnly {
                None
            } else {
                let drawn: Vec<(Image, bool)> = batch.par_iter().map(|&i| draw_anomaly(ds, &by_class, i, epoch, cfg)).collect::<Result<_>>()?;
                noop_synth += drawn.iter().filter(|d| d.1).count();
                let imgs: Vec<&Image> = drawn.iter().map(|d| &d.0).collect();
                Some(images_to_tensor::<f32>(&imgs)?)
            };

            let mut tape = Tape::new();
            let vars = backbone.bind(&mut tape, true);
            let head_vars = head.as_ref().map(|h| (tape.param(h.weight.clone()), tape.param(h.bias.clone())));
            let loss = batch_loss(&mut tape, &backbone, &vars, head_vars, cfg.mode, anchors.as_ref(), cfg.tau, &x_n, x_a.as_ref(), &y)?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(TrainError::Tensor(TensorError::Contract(format!("non-finite loss at epoch {epoch}"))));
            }
            tape.backward(loss)?;
            let mut grads: Vec<Tensor<f32>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
            if let (Some(h), Some((wv, bv))) = (head.as_mut(), head_vars) {
                grads.push(tape.grad_tensor(wv));
                grads.push(tape.grad_tensor(bv));
                let mut all: Vec<Tensor<f32>> = backbone.params().to_vec();
                all.push(h.weight.clone());
                all.push(h.bias.clone());
                opt.step(&mut all, &grads)?;
                h.bias = all.pop().expect("pushed");
                h.weight = all.pop().expect("pushed");
                backbone.params_mut().clone_from_slice(&all);
            } else {
                opt.step(backbone.params_mut(), &grads)?;
            }
            steps += 1;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / seen as f64,
            lr: opt.learning_rate(),
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        log::info!("epoch {} loss {:.5} ({} ms)", rec.epoch, rec.mean_loss, rec.wall_ms);
        if best.as_ref().is_none_or(|(b, _)| rec.mean_loss < *b) {
            best = Some((rec.mean_loss, backbone.clone()));
        }
        on_epoch(&rec);
        history.push(rec);
    }
    if noop_synth > 0 {
        log::warn!("{noop_synth} synthesized anomalies were unchanged normals");
    }

    let curve: Vec<f64> = history.iter().map(|r| r.mean_loss).collect();
    let meta = |selection: &str, epochs: usize| CheckpointMeta {
        seed: Some(cfg.seed),
        steps,
        epochs: epochs as u64,
        loss_curve: curve[..epochs].to_vec(),
        mode: Some(cfg.mode.name().into()),
        synth_method: (cfg.mode != TrainMode::NormalOnly).then(|| cfg.synth.method.name().into()),
        tau: cfg.mode.uses_bank().then_some(cfg.tau),
        classes: ds.classes.clone(),
        selection: Some(selection.into()),
        notes: RUN_NOTES.iter().map(|n| n.to_string()).collect(),
    };
    let (best_loss, best_net) = best.expect("at least one epoch");
    let best_epoch = curve.iter().position(|&l| l == best_loss).expect("best is in the curve") + 1;
    let mut best_meta = meta("best", cfg.epochs);
    best_meta.notes.insert(0, format!("best epoch {best_epoch}"));
    Ok(TrainOutcome {
        best: Checkpoint {
            backbone: best_net,
            meta: best_meta,
        },
        last: Checkpoint {
            backbone,
            meta: meta("final", cfg.epochs),
        },
        history,
        noop_synth,
    })
}

/// Mean over `samples` of `cos(f, t_n[y]) - cos(f, t_a[y])`. Positive means
/// the images sit closer to their class's normal anchor.
pub fn cosine_gap(backbone: &Backbone<f32>, bank: &EmbeddingBank, classes: &[String], samples: &[(&Image, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::Config("no samples for the cosine gap".into()));
    }
    let rows: Vec<usize> = classes
        .iter()
        .map(|c| bank.class_index(c).ok_or_else(|| TrainError::Config(format!("class `{c}` is not in the embedding bank"))))
        .collect::<Result<_>>()?;
    let c = bank.dim();
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| s.0).collect();
        let e = backbone.encode_global(&images_to_tensor(&imgs)?)?;
        for (row, &(_, k)) in e.data().chunks(c).zip(chunk) {
            let dot = |t: &[f32]| row.iter().zip(t).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
            total += dot(bank.normal_row(rows[k])) - dot(bank.abnormal_row(rows[k]));
        }
    }
    Ok(total / samples.len() as f64)
}
