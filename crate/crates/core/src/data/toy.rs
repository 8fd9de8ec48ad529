use super::{DataError, Dataset, Result, Sample};
use crate::imaging::Image;
use crate::rng::{derive_rng, seeded};
use crate::synthesis::{synthesize, SynthConfig, SynthMethod};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f32::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Stripes,
    Checker,
    Blobs,
    GradientObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub pattern: Pattern,
    /// Fixes the class look (colours, period, shape); per-image jitter comes
    /// from the dataset seed.
    pub palette_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: Vec<ClassSpec>,
    pub train_normals: usize,
    pub test_normals: usize,
    pub test_anomalies: usize,
    pub image_size: usize,
    /// Base config for the defect injector. Its seed is mixed into the
    /// injector streams, which are disjoint from the normal-image streams.
    pub injector: SynthConfig,
    /// Injector methods, cycled over anomaly indices. Each becomes a defect
    /// directory.
    pub defect_methods: Vec<SynthMethod>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let class = |name: &str, pattern, palette_seed| ClassSpec {
            name: name.into(),
            pattern,
            palette_seed,
        };
        Self {
            classes: vec![
                class("blob_object", Pattern::Blobs, 11),
                class("checker_texture", Pattern::Checker, 23),
                class("striped_texture", Pattern::Stripes, 37),
            ],
            train_normals: 200,
            test_normals: 50,
            test_anomalies: 50,
            image_size: 64,
            // test defects stay local: smaller, fewer patches than training draws
            injector: SynthConfig {
                patch_scale: [0.02, 0.12],
                repeats: [1, 2],
                seed: 0x5eed_0f_defec7,
                ..SynthConfig::default()
            },
            defect_methods: SynthMethod::ALL.to_vec(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(DataError::Config("no classes".into()));
        }
        if self.train_normals == 0 || self.test_normals == 0 || self.test_anomalies == 0 {
            return Err(DataError::Config("split counts must be at least 1".into()));
        }
        if self.image_size < 16 {
            return Err(DataError::Config(format!("image size {} is below 16", self.image_size)));
        }
        if self.defect_methods.is_empty() {
            return Err(DataError::Config("no defect methods".into()));
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Config("duplicate class names".into()));
        }
        if let Some(bad) = names.iter().find(|n| n.is_empty() || n.contains(['/', '\\']) || n.starts_with('.')) {
            return Err(DataError::Config(format!("class name `{bad}` is not a valid directory name")));
        }
        self.injector.validate()?;
        Ok(())
    }
}

// Stream tags under derive_seed(seed, [class, tag, index]).
const TRAIN: u64 = 0;
const TEST_GOOD: u64 = 1;
const DEFECT_BASE: u64 = 2;
const DEFECT_SOURCE: u64 = 3;
const DEFECT_DRAW: u64 = 4;
const MAX_DEFECT_TRIES: u64 = 32;

type Rgb = [f32; 3];

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Two colours far enough apart to give the pattern contrast.
fn palette(seed: u64) -> (Rgb, Rgb, impl Rng) {
    let mut r = seeded(seed);
    let col = |r: &mut _| -> Rgb { std::array::from_fn(|_| Rng::random_range(r, 30.0f32..225.0)) };
    let a = col(&mut r);
    let mut b = col(&mut r);
    while a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f32>() < 180.0 {
        b = col(&mut r);
    }
    (a, b, r)
}

/// Renders one image of the class. Class traits come from the palette seed;
/// pose, phase and noise come from `rng`.
pub fn render_pattern<R: Rng + ?Sized>(class: &ClassSpec, size: usize, rng: &mut R) -> Image {
    let (c1, c2, mut pr) = palette(class.palette_seed);
    let s = size as f32;
    let jitter = Normal::new(0.0f32, 1.0).expect("unit normal");
    let shape: Box<dyn Fn(f32, f32) -> Rgb> = match class.pattern {
        Pattern::Stripes => {
            let period = pr.random_range(6.0f32..10.0) * rng.random_range(0.95f32..1.05);
            let angle = pr.random_range(0.0f32..PI) + 0.05 * jitter.sample(rng);
            let phase = rng.random_range(0.0f32..2.0 * PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            Box::new(move |x, y| {
                let v = (2.0 * PI * (x * ca + y * sa) / period + phase).sin();
                lerp(c1, c2, 0.5 + 0.5 * (2.5 * v).tanh())
            })
        }
        Pattern::Checker => {
            let cell = pr.random_range(6.0f32..10.0) * rng.random_range(0.95f32..1.05);
            let angle = 0.05 * jitter.sample(rng);
            let (ox, oy) = (rng.random_range(0.0..2.0 * cell), rng.random_range(0.0..2.0 * cell));
            let (ca, sa) = (angle.cos(), angle.sin());
            Box::new(move |x, y| {
                let u = x * ca - y * sa + ox;
                let v = x * sa + y * ca + oy;
                let parity = ((u / cell).floor() + (v / cell).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    c1
                } else {
                    c2
                }
            })
        }
        Pattern::Blobs => {
            let lobes = pr.random_range(3..6) as f32;
            let depth = pr.random_range(0.08f32..0.18);
            let hole = pr.random_range(0.2f32..0.35);
            let radius = 0.3 * s * rng.random_range(0.95f32..1.05);
            let rot = rng.random_range(0.0f32..2.0 * PI);
            let (cx, cy) = (s / 2.0 + 1.5 * jitter.sample(rng), s / 2.0 + 1.5 * jitter.sample(rng));
            Box::new(move |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let d = (dx * dx + dy * dy).sqrt();
                let edge = radius * (1.0 + depth * (lobes * (dy.atan2(dx) + rot)).cos());
                if d <= edge && d >= hole * radius {
                    let t = d / edge;
                    lerp(c2, [0.0; 3], 0.35 * t * t)
                } else {
                    c1
                }
            })
        }
        Pattern::GradientObject => {
            let dir = pr.random_range(0.0f32..2.0 * PI) + 0.1 * jitter.sample(rng);
            let (hw, hh) = (pr.random_range(0.18f32..0.3) * s, pr.random_range(0.18f32..0.3) * s);
            let corner = 0.3 * hw.min(hh);
            let rot = 0.08 * jitter.sample(rng);
            let (cx, cy) = (s / 2.0 + 1.5 * jitter.sample(rng), s / 2.0 + 1.5 * jitter.sample(rng));
            let dark = lerp(c1, [0.0; 3], 0.45);
            let (dc, ds, rc, rs) = (dir.cos(), dir.sin(), rot.cos(), rot.sin());
            Box::new(move |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = ((dx * rc + dy * rs).abs(), (-dx * rs + dy * rc).abs());
                let (qx, qy) = ((u - hw + corner).max(0.0), (v - hh + corner).max(0.0));
                if u <= hw && v <= hh && qx * qx + qy * qy <= corner * corner {
                    c2
                } else {
                    let t = 0.5 + 0.5 * ((x - s / 2.0) * dc + (y - s / 2.0) * ds) / (0.71 * s);
                    lerp(c1, dark, t.clamp(0.0, 1.0))
                }
            })
        }
    };

    // soft illumination ramp plus sensor noise
    let light = [rng.random_range(-8.0f32..8.0), rng.random_range(-8.0f32..8.0)];
    let noise = Normal::new(0.0f32, 3.0).expect("valid sigma");
    let mut img = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            // 2x2 supersampling keeps edges anti-aliased
            let mut acc = [0.0f32; 3];
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let c = shape(x as f32 + sx, y as f32 + sy);
                for ch in 0..3 {
                    acc[ch] += 0.25 * c[ch];
                }
            }
            let ramp = light[0] * (x as f32 / s - 0.5) + light[1] * (y as f32 / s - 0.5);
            let px = std::array::from_fn(|ch| (acc[ch] + ramp + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
            img.put(x, y, px);
        }
    }
    img
}

/// Builds the toy dataset in memory. Identical `(spec, seed)` gives an
/// identical dataset; classes come out sorted by name.
pub fn build_toy_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut order: Vec<&ClassSpec> = spec.classes.iter().collect();
    order.sort_by(|a, b| a.name.cmp(&b.name));
    let size = spec.image_size;
    let mut ds = Dataset {
        classes: order.iter().map(|c| c.name.clone()).collect(),
        train: vec![],
        test: vec![],
    };
    let normal = |k: usize, class_id: u64, tag: u64, i: usize| Sample {
        image: render_pattern(order[k], size, &mut derive_rng(seed, &[class_id, tag, i as u64])),
        class: k,
        anomalous: false,
        defect: None,
        mask: None,
        stem: format!("{i:03}"),
    };
    for (k, class) in order.iter().enumerate() {
        // streams key on the palette seed so adding a class does not move others
        let cid = class.palette_seed;
        ds.train.extend((0..spec.train_normals).map(|i| normal(k, cid, TRAIN, i)));
        ds.test.extend((0..spec.test_normals).map(|i| normal(k, cid, TEST_GOOD, i)));
        for i in 0..spec.test_anomalies {
            let method = spec.defect_methods[i % spec.defect_methods.len()];
            let cfg = SynthConfig {
                method,
                ..spec.injector.clone()
            };
            let mut made = None;
            for t in 0..MAX_DEFECT_TRIES {
                let j = i as u64 * MAX_DEFECT_TRIES + t;
                let base = render_pattern(class, size, &mut derive_rng(seed, &[cid, DEFECT_BASE, j]));
                let source = render_pattern(class, size, &mut derive_rng(seed, &[cid, DEFECT_SOURCE, j]));
                let mut r = derive_rng(seed ^ spec.injector.seed, &[cid, DEFECT_DRAW, j]);
                let s = synthesize(&base, Some(&source), &cfg, &mut r)?;
                if !s.noop && !s.mask.is_empty() {
                    made = Some(s);
                    break;
                }
            }
            let s = made.ok_or_else(|| DataError::Config(format!("injector `{}` produced no defect for {} #{i}", method.name(), class.name)))?;
            ds.test.push(Sample {
                image: s.anomaly,
                class: k,
                anomalous: true,
                defect: Some(method.name().to_string()),
                mask: Some(s.mask),
                stem: format!("{i:03}"),
            });
        }
    }
    ds.validate()?;
    Ok(ds)
}
