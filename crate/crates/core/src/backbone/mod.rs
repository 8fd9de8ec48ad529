//! Mini residual CNN with per-stage feature taps and a linear projection to
//! the text-embedding dimension.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CKPT_MAGIC};

use crate::imaging::Image;
use crate::tensor::{Element, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("backbone config: {0}")]
    Config(String),
    #[error("checkpoint format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Projection output size; must equal the embedding bank's dim.
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            embed_dim: 128,
        }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// He-normal with this fan-in.
    Kaiming(usize),
    /// Normal with std `1/sqrt(fan_in)`.
    Linear(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(BackboneError::Config("stage_channels must be nonempty and positive".into()));
        }
        if self.blocks_per_stage == 0 || self.embed_dim == 0 {
            return Err(BackboneError::Config("blocks_per_stage and embed_dim must be positive".into()));
        }
        let factor = 1usize << self.stage_channels.len();
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(BackboneError::Config(format!(
                "input_size {} must be a positive multiple of {factor}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial side of stage `s` (1-based): `input_size / 2^s`.
    pub fn stage_size(&self, s: usize) -> usize {
        self.input_size >> s
    }

    /// Every parameter in forward order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize| {
            out.push(ParamSpec {
                name: format!("{prefix}.conv.weight"),
                shape: vec![cout, cin, k, k],
                init: Init::Kaiming(cin * k * k),
            });
            out.push(ParamSpec {
                name: format!("{prefix}.norm.weight"),
                shape: vec![cout],
                init: Init::Ones,
            });
            out.push(ParamSpec {
                name: format!("{prefix}.norm.bias"),
                shape: vec![cout],
                init: Init::Zeros,
            });
        };
        let c0 = self.stage_channels[0];
        conv(&mut out, "stem", 3, c0, 3);
        let mut cin = c0;
        for (s, &c) in self.stage_channels.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let p = format!("stage{}.block{}", s + 1, b + 1);
                conv(&mut out, &format!("{p}.conv1"), cin, c, 3);
                conv(&mut out, &format!("{p}.conv2"), c, c, 3);
                if block_stride(s, b) != 1 || cin != c {
                    conv(&mut out, &format!("{p}.shortcut"), cin, c, 1);
                }
                cin = c;
            }
        }
        out.push(ParamSpec {
            name: "head.weight".into(),
            shape: vec![cin, self.embed_dim],
            init: Init::Linear(cin),
        });
        out.push(ParamSpec {
            name: "head.bias".into(),
            shape: vec![self.embed_dim],
            init: Init::Zeros,
        });
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

fn block_stride(stage: usize, block: usize) -> usize {
    if stage > 0 && block == 0 {
        2
    } else {
        1
    }
}

/// Named parameter tensors in [`BackboneConfig::param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T: Element = f32> {
    config: BackboneConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Post-activation output of every stage, `[B, C_s, H_s, W_s]`.
    pub stages: Vec<Var>,
    /// Global-average-pooled last stage, `[B, C_last]`.
    pub pooled: Var,
    /// Unit-norm projection, `[B, embed_dim]`.
    pub embedding: Var,
}

impl<T: Element> Backbone<T> {
    /// Random initialization; identical seeds give identical weights.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Kaiming(fan_in) | Init::Linear(fan_in) => {
                    let gain = if matches!(spec.init, Init::Kaiming(_)) { 2.0 } else { 1.0 };
                    let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                    (0..n).map(|_| T::cast_from(dist.sample(rng))).collect()
                }
                Init::Ones => vec![T::one(); n],
                Init::Zeros => vec![T::zero(); n],
            };
            names.push(spec.name);
            params.push(Tensor::new(spec.shape, data)?);
        }
        Ok(Self { config, names, params })
    }

    /// Assembles a backbone from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_named(config: BackboneConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if named.len() != specs.len() {
            return Err(BackboneError::Config(format!("expected {} tensors, got {}", specs.len(), named.len())));
        }
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = std::collections::HashMap::new();
        for (n, t) in named {
            if by_name.insert(n.clone(), t).is_some() {
                return Err(BackboneError::Config(format!("duplicate tensor `{n}`")));
            }
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = by_name
                .remove(&spec.name)
                .ok_or_else(|| BackboneError::Config(format!("missing tensor `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(BackboneError::Config(format!("`{}` has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)));
            }
            if !t.is_finite() {
                return Err(BackboneError::Config(format!("`{}` holds non-finite values", spec.name)));
            }
            names.push(spec.name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn cast<U: Element>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter on `tape`, trainable or not.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    /// Runs the network on `input` (`[B, 3, S, S]`, values in `[-1, 1]`)
    /// using parameter handles from [`Backbone::bind`].
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], input: Var) -> Result<Forward> {
        let s = self.config.input_size;
        let shape = tape.shape(input);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(BackboneError::Config(format!("input {shape:?} does not match [B, 3, {s}, {s}]")));
        }
        if vars.len() != self.params.len() {
            return Err(BackboneError::Config("parameter handles do not match the backbone".into()));
        }
        let mut next = vars.iter().copied();
        let mut conv_norm = |tape: &mut Tape<T>, x: Var, stride: usize, pad: usize| -> Result<Var> {
            let (w, g, b) = (next.next().unwrap(), next.next().unwrap(), next.next().unwrap());
            let y = tape.conv2d(x, w, stride, pad)?;
            Ok(tape.instance_norm(y, g, b)?)
        };
        let stem = conv_norm(tape, input, 2, 1)?;
        let mut x = tape.relu(stem)?;
        let mut cin = self.config.stage_channels[0];
        let mut stages = Vec::with_capacity(self.config.num_stages());
        for (si, &c) in self.config.stage_channels.iter().enumerate() {
            for bi in 0..self.config.blocks_per_stage {
                let stride = block_stride(si, bi);
                let h = conv_norm(tape, x, stride, 1)?;
                let h = tape.relu(h)?;
                let h = conv_norm(tape, h, 1, 1)?;
                let skip = if stride != 1 || cin != c { conv_norm(tape, x, stride, 0)? } else { x };
                let sum = tape.add(h, skip)?;
                x = tape.relu(sum)?;
                cin = c;
            }
            stages.push(x);
        }
        let pooled = tape.global_avg_pool(x)?;
        let (hw, hb) = (vars[vars.len() - 2], vars[vars.len() - 1]);
        let proj = tape.matmul(pooled, hw)?;
        let proj = tape.add_bias(proj, hb)?;
        let embedding = tape.l2_normalize_rows(proj)?;
        Ok(Forward { stages, pooled, embedding })
    }

    /// Unit-norm global embeddings `[B, embed_dim]`.
    pub fn encode_global(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let f = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(f.embedding).clone())
    }

    /// Stage activations for the requested 1-based stage ids, in request order.
    pub fn feature_maps(&self, images: &Tensor<T>, stages: &[usize]) -> Result<Vec<Tensor<T>>> {
        Ok(self.features(images, stages)?.0)
    }

    /// Stage maps plus global embeddings from a single pass.
    pub fn features(&self, images: &Tensor<T>, stages: &[usize]) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        for &s in stages {
            if s == 0 || s > self.config.num_stages() {
                return Err(BackboneError::Config(format!(
                    "unknown stage {s}; valid stages are 1..={}",
                    self.config.num_stages()
                )));
            }
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let f = self.forward(&mut tape, &vars, x)?;
        let maps = stages.iter().map(|&s| tape.value(f.stages[s - 1]).clone()).collect();
        Ok((maps, tape.value(f.embedding).clone()))
    }
}

/// Stacks images into `[B, 3, H, W]` with pixels mapped to `[-1, 1]`.
pub fn images_to_tensor<T: Element>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| BackboneError::Config("empty image batch".into()))?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.dims() != (w, h) {
            return Err(BackboneError::Config(format!("mixed image sizes {:?} and {:?}", (w, h), img.dims())));
        }
        data.extend(img.to_planar_f32().into_iter().map(|v| T::cast_from(v as f64 * 2.0 - 1.0)));
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}
