//! Downstream use of a backbone: PaDiM detection and localization, AUROC,
//! linear probes and raw feature export.

mod metrics;
mod padim;
mod probe;

pub use metrics::{auroc, classification_report, ClassMetrics, ClassificationReport};
pub use padim::{anomaly_map, cholesky, gaussian_blur, AnomalyMap, GaussianBank, Padim, PadimConfig, PatchFeatures};
pub use probe::{embed_images, finetune_probe, linear_probe, ProbeConfig, ProbeReport};

use crate::backbone::{Backbone, BackboneError};
use crate::data::{Dataset, Sample};
use crate::imaging::Image;
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DownstreamError {
    #[error("evaluation config: {0}")]
    Config(String),
    #[error("statistics: {0}")]
    Statistics(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DownstreamError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class: String,
    pub image_auroc: f64,
    /// `None` when no test anomaly of the class has a mask.
    pub pixel_auroc: Option<f64>,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

/// PaDiM results for one backbone over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub dataset: String,
    pub checkpoint: String,
    /// Mean of the per-class image AUROCs.
    pub image_auroc: f64,
    /// Over all pixels of every masked test image, pooled across classes.
    pub pixel_auroc: Option<f64>,
    pub per_class: Vec<ClassEval>,
    pub config: PadimConfig,
}

/// Scored test images of one class, in dataset order.
#[derive(Debug, Clone)]
pub struct ClassScores<'a> {
    pub samples: Vec<&'a Sample>,
    pub maps: Vec<AnomalyMap>,
}

/// Fits one Gaussian bank per class on its train normals and scores that
/// class's test images.
pub fn padim_class_scores<'a>(backbone: &Backbone<f32>, ds: &'a Dataset, cfg: &PadimConfig) -> Result<Vec<ClassScores<'a>>> {
    let mut out = Vec::with_capacity(ds.classes.len());
    for (k, name) in ds.classes.iter().enumerate() {
        let normals: Vec<&Image> = ds.train_of(k).map(|s| &s.image).collect();
        let samples: Vec<&Sample> = ds.test_of(k).collect();
        if samples.is_empty() {
            log::warn!("class `{name}` has no test images");
            out.push(ClassScores { samples, maps: vec![] });
            continue;
        }
        let model = Padim::fit(backbone, &normals, cfg).map_err(|e| match e {
            DownstreamError::Statistics(m) => DownstreamError::Statistics(format!("class `{name}`: {m}")),
            other => other,
        })?;
        let imgs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let maps = model.score(backbone, &imgs)?;
        out.push(ClassScores { samples, maps });
    }
    Ok(out)
}

fn pixel_labels(scores: &[ClassScores<'_>]) -> (Vec<f64>, Vec<bool>) {
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for cs in scores {
        for (sample, map) in cs.samples.iter().zip(&cs.maps) {
            if sample.image_level_only() {
                continue;
            }
            let mask = sample.mask_or_empty();
            s.extend(map.scores.iter().map(|&v| v as f64));
            l.extend_from_slice(mask.bits());
        }
    }
    (s, l)
}

/// Image AUROC per class (mean reported) and pixel AUROC pooled over all
/// masked test images.
pub fn evaluate(backbone: &Backbone<f32>, ds: &Dataset, cfg: &PadimConfig, dataset: &str, checkpoint: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let scores = padim_class_scores(backbone, ds, cfg)?;
    let mut per_class = Vec::new();
    for (name, cs) in ds.classes.iter().zip(&scores) {
        let img_scores: Vec<f64> = cs.maps.iter().map(|m| m.image_score).collect();
        let labels: Vec<bool> = cs.samples.iter().map(|s| s.anomalous).collect();
        let image_auroc = auroc(&img_scores, &labels).map_err(|e| DownstreamError::Metric(format!("class `{name}`: {e}")))?;
        let (ps, pl) = pixel_labels(std::slice::from_ref(cs));
        per_class.push(ClassEval {
            class: name.clone(),
            image_auroc,
            pixel_auroc: auroc(&ps, &pl).ok(),
            n_normal: labels.iter().filter(|&&l| !l).count(),
            n_anomalous: labels.iter().filter(|&&l| l).count(),
        });
    }
    let (ps, pl) = pixel_labels(&scores);
    Ok(EvalReport {
        schema: crate::SCHEMA.into(),
        dataset: dataset.into(),
        checkpoint: checkpoint.into(),
        image_auroc: per_class.iter().map(|c| c.image_auroc).sum::<f64>() / per_class.len() as f64,
        pixel_auroc: auroc(&ps, &pl).ok(),
        per_class,
        config: cfg.clone(),
    })
}

/// Writes one row per sample (train then test): `sample_id, class,
/// is_anomaly, f0..f{C-1}`. Returns the number of rows.
pub fn export_features(backbone: &Backbone<f32>, ds: &Dataset, path: &Path) -> Result<usize> {
    let io = |e: &dyn std::fmt::Display| DownstreamError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    let c = backbone.config().embed_dim;
    let mut header = vec!["sample_id".to_string(), "class".into(), "is_anomaly".into()];
    header.extend((0..c).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| io(&e))?;
    let mut rows = 0;
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        let imgs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        if imgs.is_empty() {
            continue;
        }
        let feats = embed_images(backbone, &imgs)?;
        for (s, f) in samples.iter().zip(feats) {
            let class = &ds.classes[s.class];
            let mut rec = vec![
                format!("{class}/{split}/{}/{}", s.defect.as_deref().unwrap_or("good"), s.stem),
                class.clone(),
                u8::from(s.anomalous).to_string(),
            ];
            // shortest repr that reparses to the same f32
            rec.extend(f.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| io(&e))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| io(&e))?;
    Ok(rows)
}
