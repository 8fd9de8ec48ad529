use super::metrics::{classification_report, ClassificationReport};
use super::{DownstreamError, Result};
use crate::backbone::{images_to_tensor, Backbone};
use crate::imaging::Image;
use crate::rng::derive_rng;
use crate::tensor::{Adam, Optimizer, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch steps for the frozen probe.
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Passes over the train set when the backbone is fine-tuned too.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            weight_decay: 1e-3,
            seed: 0,
            finetune_epochs: 5,
            finetune_lr: 1e-4,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `true` when only the linear layer was trained.
    pub frozen: bool,
    #[serde(flatten)]
    pub metrics: ClassificationReport,
}

fn check_labels(train_y: &[usize], test_y: &[usize], n_classes: usize) -> Result<()> {
    let mut present = vec![false; n_classes];
    for &y in train_y {
        *present.get_mut(y).ok_or_else(|| DownstreamError::Config(format!("label {y} outside {n_classes} classes")))? = true;
    }
    if let Some(&y) = test_y.iter().find(|&&y| y >= n_classes || !present[y]) {
        return Err(DownstreamError::Config(format!("class {y} has no training examples")));
    }
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(DownstreamError::Config(format!("class {c} has no training examples")));
    }
    Ok(())
}

fn init_head(d: usize, k: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = derive_rng(seed, &[0x9e0be]);
    let bound = (1.0 / d as f64).sqrt() as f32;
    let w = (0..d * k).map(|_| rng.random_range(-bound..bound)).collect();
    (Tensor::new(vec![d, k], w).expect("shape matches"), Tensor::zeros(vec![k]))
}

fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|r| r.iter().enumerate().fold((0, f32::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0)
        .collect()
}

/// Softmax regression on fixed features. Features are standardized with
/// train-split statistics; training is full-batch and deterministic.
pub fn linear_probe(train_x: &[Vec<f32>], train_y: &[usize], test_x: &[Vec<f32>], test_y: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() || train_x.is_empty() || test_x.is_empty() {
        return Err(DownstreamError::Config("feature and label counts differ or are empty".into()));
    }
    check_labels(train_y, test_y, n_classes)?;
    let d = train_x[0].len();
    if train_x.iter().chain(test_x).any(|r| r.len() != d) {
        return Err(DownstreamError::Config("feature rows differ in length".into()));
    }
    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train_x.iter().map(|r| r[j] as f64).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (train_x.iter().map(|r| (r[j] as f64 - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-6))
        .collect();
    let standardize = |rows: &[Vec<f32>]| -> Tensor<f32> {
        let data = rows.iter().flat_map(|r| r.iter().enumerate().map(|(j, &v)| ((v as f64 - mean[j]) / std[j]) as f32)).collect();
        Tensor::new(vec![rows.len(), d], data).expect("shape matches")
    };
    let (xtr, xte) = (standardize(train_x), standardize(test_x));

    let (w, b) = init_head(d, n_classes, cfg.seed);
    let mut params = vec![w, b];
    let mut opt = Adam::new(cfg.lr);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(xtr.clone());
        let (wv, bv) = (tape.param(params[0].clone()), tape.param(params[1].clone()));
        let z = tape.matmul(x, wv)?;
        let z = tape.add_bias(z, bv)?;
        let ce = tape.softmax_cross_entropy(z, train_y)?;
        let sq = tape.mul(wv, wv)?;
        let reg = tape.sum(sq)?;
        let reg = tape.scale(reg, cfg.weight_decay / 2.0)?;
        let loss = tape.add(ce, reg)?;
        tape.backward(loss)?;
        let grads = [tape.grad_tensor(wv), tape.grad_tensor(bv)];
        opt.step(&mut params, &grads)?;
    }
    let mut tape = Tape::new();
    let x = tape.constant(xte);
    let (wv, bv) = (tape.constant(params[0].clone()), tape.constant(params[1].clone()));
    let z = tape.matmul(x, wv)?;
    let z = tape.add_bias(z, bv)?;
    let pred = argmax_rows(tape.value(z));
    Ok(ProbeReport {
        frozen: true,
        metrics: classification_report(test_y, &pred, n_classes)?,
    })
}

/// Global embeddings for `images`, one row per image.
pub fn embed_images(backbone: &Backbone<f32>, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
    let c = backbone.config().embed_dim;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let e = backbone.encode_global(&images_to_tensor(chunk)?)?;
        out.extend(e.data().chunks(c).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Fine-tunes backbone and a linear head on the embeddings together, then
/// scores the test images. The input backbone is left untouched.
pub fn finetune_probe(
    backbone: &Backbone<f32>,
    train: &[&Image],
    train_y: &[usize],
    test: &[&Image],
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train.len() != train_y.len() || test.len() != test_y.len() || train.is_empty() || test.is_empty() {
        return Err(DownstreamError::Config("image and label counts differ or are empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(DownstreamError::Config("batch size must be at least 1".into()));
    }
    check_labels(train_y, test_y, n_classes)?;
    let mut net = backbone.clone();
    let (w, b) = init_head(net.config().embed_dim, n_classes, cfg.seed);
    let mut head = vec![w, b];
    let mut opt = Adam::new(cfg.finetune_lr);
    let mut head_opt = Adam::new(cfg.lr);
    for epoch in 0..cfg.finetune_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[0x5f1e, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Image> = batch.iter().map(|&i| train[i]).collect();
            let y: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape, true);
            let (wv, bv) = (tape.param(head[0].clone()), tape.param(head[1].clone()));
            let x = tape.constant(images_to_tensor(&imgs)?);
            let f = net.forward(&mut tape, &vars, x)?;
            let z = tape.matmul(f.embedding, wv)?;
            let z = tape.add_bias(z, bv)?;
            let loss = tape.softmax_cross_entropy(z, &y)?;
            tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
            opt.step(net.params_mut(), &grads)?;
            head_opt.step(&mut head, &[tape.grad_tensor(wv), tape.grad_tensor(bv)])?;
        }
    }
    let mut pred = Vec::with_capacity(test.len());
    for chunk in test.chunks(64) {
        let e = net.encode_global(&images_to_tensor(chunk)?)?;
        let mut tape = Tape::new();
        let x = tape.constant(e);
        let (wv, bv) = (tape.constant(head[0].clone()), tape.constant(head[1].clone()));
        let z = tape.matmul(x, wv)?;
        let z = tape.add_bias(z, bv)?;
        pred.extend(argmax_rows(tape.value(z)));
    }
    Ok(ProbeReport {
        frozen: false,
        metrics: classification_report(test_y, &pred, n_classes)?,
    })
}
