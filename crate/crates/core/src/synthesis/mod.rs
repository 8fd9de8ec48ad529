//! Synthetic anomaly generation: NSA-style crop/resize/blend pastes and the
//! simpler CutPaste, rectangle-fill and Perlin-blob variants.

mod perlin;
mod poisson;

pub use perlin::perlin_field;
pub use poisson::{poisson_blend, BlendOutcome, BlendParams};

use crate::imaging::{quantize, resize_planes_bilinear, Image, Mask, Rect};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("synthesis contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Three stacked channel planes in `[0, 1]` (values may leave the range
/// while blending; they are clamped on conversion back).
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Planes {
    pub fn from_image(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.to_planar_f32(),
        }
    }

    pub fn to_image(&self) -> Image {
        Image::from_planar_f32(self.width, self.height, &self.data)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.width * self.height;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.width * self.height;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Planes {
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            let p = self.channel(c);
            for row in y..y + h {
                data.extend_from_slice(&p[row * self.width + x..row * self.width + x + w]);
            }
        }
        Planes { width: w, height: h, data }
    }

    pub fn resize(&self, w: usize, h: usize) -> Planes {
        Planes {
            width: w,
            height: h,
            data: resize_planes_bilinear(&self.data, 3, self.width, self.height, w, h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMethod {
    Nsa,
    Cutpaste,
    Perlin,
    Mask,
}

impl SynthMethod {
    pub const ALL: [SynthMethod; 4] = [Self::Nsa, Self::Cutpaste, Self::Perlin, Self::Mask];

    pub fn name(self) -> &'static str {
        match self {
            Self::Nsa => "nsa",
            Self::Cutpaste => "cutpaste",
            Self::Perlin => "perlin",
            Self::Mask => "mask",
        }
    }
}

impl std::str::FromStr for SynthMethod {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SynthError::Config(format!("unknown synthesis method `{s}`")))
    }
}

impl std::fmt::Display for SynthMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub method: SynthMethod,
    /// Area of the cropped patch as a fraction of the image.
    pub patch_scale: [f64; 2],
    /// Width/height ratio of the crop, sampled log-uniformly.
    pub aspect_ratio: [f64; 2],
    pub repeats: [u32; 2],
    /// NSA only: linear resize factor applied to the crop before pasting.
    pub resize_scale: [f64; 2],
    /// Perlin lattice cell size in pixels; a power of two is drawn in this range.
    pub perlin_cell: [usize; 2],
    pub perlin_octaves: u32,
    pub perlin_threshold: [f64; 2],
    /// Per-channel difference (0..1) above which an NSA pixel counts as defect.
    pub diff_threshold: f64,
    /// Accepted mask area as a fraction of the image.
    pub mask_area: [f64; 2],
    /// Placement retries per paste before the repeat is skipped.
    pub placement_retries: u32,
    /// Whole-sample retries when the mask misses `mask_area`.
    pub sample_retries: u32,
    pub blend_max_iters: usize,
    pub blend_tol: f64,
    pub blend_omega: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            method: SynthMethod::Nsa,
            patch_scale: [0.06, 0.35],
            aspect_ratio: [0.5, 2.0],
            repeats: [1, 4],
            resize_scale: [0.5, 2.0],
            perlin_cell: [8, 32],
            perlin_octaves: 3,
            perlin_threshold: [0.15, 0.35],
            diff_threshold: 8.0 / 255.0,
            mask_area: [0.002, 0.8],
            placement_retries: 10,
            sample_retries: 8,
            blend_max_iters: 5_000,
            blend_tol: 1e-4,
            blend_omega: None,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
        return Err(SynthError::Config(format!("{name} range {r:?} is empty")));
    }
    if positive && r[0] <= 0.0 {
        return Err(SynthError::Config(format!("{name} range {r:?} must be positive")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn with_method(method: SynthMethod) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        check_range("patch_scale", self.patch_scale, true)?;
        check_range("aspect_ratio", self.aspect_ratio, true)?;
        check_range("resize_scale", self.resize_scale, true)?;
        check_range("perlin_threshold", self.perlin_threshold, false)?;
        check_range("mask_area", self.mask_area, false)?;
        if self.patch_scale[1] > 1.0 {
            return Err(SynthError::Config("patch_scale exceeds the image".into()));
        }
        if self.mask_area[0] < 0.0 || self.mask_area[1] > 1.0 {
            return Err(SynthError::Config(format!("mask_area {:?} outside [0, 1]", self.mask_area)));
        }
        if self.repeats[0] == 0 || self.repeats[0] > self.repeats[1] {
            return Err(SynthError::Config(format!("repeats {:?} must be a nonempty range from 1", self.repeats)));
        }
        if self.perlin_cell[0] == 0 || self.perlin_cell[0] > self.perlin_cell[1] || self.perlin_octaves == 0 {
            return Err(SynthError::Config("perlin cell range and octaves must be positive".into()));
        }
        if !(self.diff_threshold > 0.0 && self.diff_threshold < 1.0) {
            return Err(SynthError::Config(format!("diff_threshold {} outside (0, 1)", self.diff_threshold)));
        }
        if self.blend_max_iters == 0 || !(self.blend_tol > 0.0) {
            return Err(SynthError::Config("blend iterations and tolerance must be positive".into()));
        }
        if let Some(w) = self.blend_omega {
            if !(w > 0.0 && w < 2.0) {
                return Err(SynthError::Config(format!("blend_omega {w} outside (0, 2)")));
            }
        }
        Ok(())
    }

    fn blend_params(&self) -> BlendParams {
        BlendParams {
            max_iters: self.blend_max_iters,
            tol: self.blend_tol,
            omega: self.blend_omega,
        }
    }

    fn area_ok(&self, area: usize, total: usize) -> bool {
        let f = area as f64 / total as f64;
        area > 0 && f >= self.mask_area[0] && f <= self.mask_area[1]
    }
}

/// One crop-and-paste: `src` is cut from the source image and resampled to
/// the size of `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paste {
    pub src: Rect,
    pub dst: Rect,
}

/// Sampled parameters, kept for manifests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub attempts: u32,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub pastes: Vec<Paste>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fill: Option<[u8; 3]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perlin_cell: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perlin_threshold: Option<f64>,
    pub unconverged_blends: u32,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub normal: Image,
    pub anomaly: Image,
    pub mask: Mask,
    pub method: SynthMethod,
    /// Nothing usable was synthesized; `anomaly == normal` and the mask is empty.
    pub noop: bool,
    pub record: SynthRecord,
}

impl SynthSample {
    fn noop(normal: &Image, method: SynthMethod, record: SynthRecord) -> Self {
        Self {
            normal: normal.clone(),
            anomaly: normal.clone(),
            mask: Mask::empty(normal.width(), normal.height()),
            method,
            noop: true,
            record,
        }
    }

    /// Checks the pixel-locality and area contracts.
    pub fn check(&self, cfg: &SynthConfig) -> Result<()> {
        let (w, h) = self.normal.dims();
        if self.anomaly.dims() != (w, h) || self.mask.width() != w || self.mask.height() != h {
            return Err(SynthError::Contract("sample parts disagree in size".into()));
        }
        if self.noop {
            if !self.mask.is_empty() || self.anomaly != self.normal {
                return Err(SynthError::Contract("no-op sample carries changes".into()));
            }
            return Ok(());
        }
        if !cfg.area_ok(self.mask.area(), w * h) {
            return Err(SynthError::Contract(format!("mask area {} outside bounds", self.mask.area())));
        }
        let grown = self.mask.dilate();
        for y in 0..h {
            for x in 0..w {
                if !grown.get(x, y) && self.anomaly.get(x, y) != self.normal.get(x, y) {
                    return Err(SynthError::Contract(format!("pixel ({x},{y}) changed outside the mask")));
                }
            }
        }
        Ok(())
    }
}

/// Dispatches on `cfg.method`. NSA crops from `source` (the normal image
/// itself when `None`); the other methods ignore it.
pub fn synthesize<R: Rng + ?Sized>(normal: &Image, source: Option<&Image>, cfg: &SynthConfig, rng: &mut R) -> Result<SynthSample> {
    match cfg.method {
        SynthMethod::Nsa => synth_nsa(normal, source.unwrap_or(normal), cfg, rng),
        _ => synth_simple(normal, cfg, rng),
    }
}

fn sample_crop_dims<R: Rng + ?Sized>(cfg: &SynthConfig, w: usize, h: usize, rng: &mut R) -> (usize, usize) {
    let frac = rng.random_range(cfg.patch_scale[0]..=cfg.patch_scale[1]);
    let (la, lb) = (cfg.aspect_ratio[0].ln(), cfg.aspect_ratio[1].ln());
    let ar = rng.random_range(la..=lb).exp();
    let area = frac * (w * h) as f64;
    let pw = (area * ar).sqrt().round().max(1.0) as usize;
    let ph = (area / ar).sqrt().round().max(1.0) as usize;
    (pw, ph)
}

fn random_rect<R: Rng + ?Sized>(pw: usize, ph: usize, w: usize, h: usize, rng: &mut R) -> Rect {
    Rect::new(rng.random_range(0..=w - pw), rng.random_range(0..=h - ph), pw, ph)
}

/// NSA: crop, resize and Poisson-blend `repeats` patches of `source` into
/// `normal`.
pub fn synth_nsa<R: Rng + ?Sized>(normal: &Image, source: &Image, cfg: &SynthConfig, rng: &mut R) -> Result<SynthSample> {
    cfg.validate()?;
    if source.dims() != normal.dims() {
        return Err(SynthError::Contract(format!("source {:?} and normal {:?} differ in size", source.dims(), normal.dims())));
    }
    let (w, h) = normal.dims();
    let mut attempts = 0;
    while attempts < cfg.sample_retries.max(1) {
        attempts += 1;
        let repeats = rng.random_range(cfg.repeats[0]..=cfg.repeats[1]);
        let mut pastes = Vec::with_capacity(repeats as usize);
        for _ in 0..repeats {
            for _ in 0..cfg.placement_retries.max(1) {
                let (sw, sh) = sample_crop_dims(cfg, w, h, rng);
                let s = rng.random_range(cfg.resize_scale[0]..=cfg.resize_scale[1]);
                let (dw, dh) = ((sw as f64 * s).round() as usize, (sh as f64 * s).round() as usize);
                if sw > w || sh > h || dw > w || dh > h || dw < 3 || dh < 3 {
                    continue;
                }
                let src = random_rect(sw, sh, w, h, rng);
                let dst = random_rect(dw, dh, w, h, rng);
                pastes.push(Paste { src, dst });
                break;
            }
        }
        let mut sample = apply_nsa_pastes(normal, source, &pastes, cfg)?;
        sample.record.attempts = attempts;
        if !sample.noop {
            return Ok(sample);
        }
    }
    Ok(SynthSample::noop(normal, SynthMethod::Nsa, SynthRecord { attempts, ..Default::default() }))
}

/// Deterministic NSA core: blends the given pastes, derives the difference
/// mask and reverts every pixel outside its one-pixel dilation. Returns a
/// no-op sample when the mask misses the configured area bounds.
pub fn apply_nsa_pastes(normal: &Image, source: &Image, pastes: &[Paste], cfg: &SynthConfig) -> Result<SynthSample> {
    let (w, h) = normal.dims();
    let src_planes = Planes::from_image(source);
    let mut canvas = Planes::from_image(normal);
    let mut rects = Mask::empty(w, h);
    let mut record = SynthRecord {
        attempts: 1,
        pastes: pastes.to_vec(),
        ..Default::default()
    };
    for p in pastes {
        if !p.src.fits(w, h) || !p.dst.fits(w, h) {
            return Err(SynthError::Contract(format!("paste {p:?} leaves the {w}x{h} image")));
        }
        let patch = src_planes.crop(p.src.x, p.src.y, p.src.w, p.src.h).resize(p.dst.w, p.dst.h);
        let region = Mask::from_rect(p.dst.w, p.dst.h, Rect::new(0, 0, p.dst.w, p.dst.h));
        let out = poisson_blend(&canvas, &patch, &region, (p.dst.x, p.dst.y), cfg.blend_params())?;
        if !out.converged {
            record.unconverged_blends += 1;
        }
        canvas = out.result;
        rects.fill_rect(p.dst);
    }
    let blended = canvas.to_image();
    let diff = difference_mask(normal, &blended, cfg.diff_threshold);
    let mask = diff.close().intersect(&rects);
    if !cfg.area_ok(mask.area(), w * h) {
        return Ok(SynthSample::noop(normal, SynthMethod::Nsa, record));
    }
    let anomaly = restrict_changes(normal, &blended, &mask.dilate());
    Ok(SynthSample {
        normal: normal.clone(),
        anomaly,
        mask,
        method: SynthMethod::Nsa,
        noop: false,
        record,
    })
}

/// Copies each `src` crop of `source` (resampled to the `dst` size) over
/// `normal` without blending. The mask is the set of changed pixels.
pub fn apply_hard_pastes(normal: &Image, source: &Image, pastes: &[Paste]) -> Result<SynthSample> {
    let (w, h) = normal.dims();
    let mut anomaly = normal.clone();
    for p in pastes {
        if !p.src.fits(w, h) || !p.dst.fits(w, h) {
            return Err(SynthError::Contract(format!("paste {p:?} leaves the {w}x{h} image")));
        }
        let crop = source.crop(p.src);
        let patch = if (p.src.w, p.src.h) == (p.dst.w, p.dst.h) {
            crop
        } else {
            crop.resize_bilinear(p.dst.w, p.dst.h)
        };
        for y in 0..p.dst.h {
            for x in 0..p.dst.w {
                anomaly.put(p.dst.x + x, p.dst.y + y, patch.get(x, y));
            }
        }
    }
    let mask = difference_mask(normal, &anomaly, 0.0);
    let noop = mask.is_empty();
    Ok(SynthSample {
        normal: normal.clone(),
        anomaly,
        mask,
        method: SynthMethod::Cutpaste,
        noop,
        record: SynthRecord {
            attempts: 1,
            pastes: pastes.to_vec(),
            ..Default::default()
        },
    })
}

/// Pixels whose largest per-channel difference exceeds `threshold` (0..1).
pub fn difference_mask(a: &Image, b: &Image, threshold: f64) -> Mask {
    let (w, h) = a.dims();
    let mut m = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let (pa, pb) = (a.get(x, y), b.get(x, y));
            let d = (0..3).map(|c| pa[c].abs_diff(pb[c])).max().unwrap_or(0);
            if d as f64 / 255.0 > threshold {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn restrict_changes(normal: &Image, changed: &Image, keep: &Mask) -> Image {
    let mut out = normal.clone();
    let (w, h) = normal.dims();
    for y in 0..h {
        for x in 0..w {
            if keep.get(x, y) {
                out.put(x, y, changed.get(x, y));
            }
        }
    }
    out
}

/// CutPaste, rectangle fill or Perlin blob, per `cfg.method`.
pub fn synth_simple<R: Rng + ?Sized>(normal: &Image, cfg: &SynthConfig, rng: &mut R) -> Result<SynthSample> {
    cfg.validate()?;
    match cfg.method {
        SynthMethod::Nsa => Err(SynthError::Config("synth_simple does not handle nsa".into())),
        SynthMethod::Cutpaste => synth_cutpaste(normal, cfg, rng),
        SynthMethod::Mask => synth_mask(normal, cfg, rng),
        SynthMethod::Perlin => synth_perlin(normal, cfg, rng),
    }
}

fn synth_cutpaste<R: Rng + ?Sized>(normal: &Image, cfg: &SynthConfig, rng: &mut R) -> Result<SynthSample> {
    let (w, h) = normal.dims();
    for attempt in 1..=cfg.sample_retries.max(1) {
        let (pw, ph) = sample_crop_dims(cfg, w, h, rng);
        if pw > w || ph > h {
            continue;
        }
        let src = random_rect(pw, ph, w, h, rng);
        let dst = random_rect(pw, ph, w, h, rng);
        let mut sample = apply_hard_pastes(normal, normal, &[Paste { src, dst }])?;
        sample.record.attempts = attempt;
        if !sample.noop && cfg.area_ok(sample.mask.area(), w * h) {
            return Ok(sample);
        }
    }
    Ok(SynthSample::noop(
        normal,
        SynthMethod::Cutpaste,
        SynthRecord {
            attempts: cfg.sample_retries.max(1),
            ..Default::default()
        },
    ))
}

fn synth_mask<R: Rng + ?Sized>(normal: &Image, cfg: &SynthConfig, rng: &mut R) -> Result<SynthSample> {
    let (w, h) = normal.dims();
    for attempt in 1..=cfg.sample_retries.max(1) {
        let (pw, ph) = sample_crop_dims(cfg, w, h, rng);
        let fill: [u8; 3] = rng.random();
        if pw > w || ph > h || !cfg.area_ok(pw * ph, w * h) {
            continue;
        }
        let rect = random_rect(pw, ph, w, h, rng);
        let mut anomaly = normal.clone();
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                anomaly.put(x, y, fill);
            }
        }
        return Ok(SynthSample {
            normal: normal.clone(),
            anomaly,
            mask: Mask::from_rect(w, h, rect),
            method: SynthMethod::Mask,
            noop: false,
            record: SynthRecord {
                attempts: attempt,
                pastes: vec![Paste { src: rect, dst: rect }],
                fill: Some(fill),
                ..Default::default()
            },
        });
    }
    Ok(SynthSample::noop(normal, SynthMethod::Mask, SynthRecord::default()))
}

fn synth_perlin<R: Rng + ?Sized>(normal: &Image, cfg: &SynthConfig, rng: &mut R) -> Result<SynthSample> {
    let (w, h) = normal.dims();
    let lo = cfg.perlin_cell[0].next_power_of_two();
    let cells: Vec<usize> = std::iter::successors(Some(lo), |c| Some(c * 2)).take_while(|&c| c <= cfg.perlin_cell[1]).collect();
    let cell = if cells.is_empty() { cfg.perlin_cell[0] } else { cells[rng.random_range(0..cells.len())] };
    let field = perlin_field(w, h, cell, cfg.perlin_octaves, rng);
    let mut record = SynthRecord {
        perlin_cell: Some(cell),
        ..Default::default()
    };
    // one resample of the threshold, then give up
    let mut mask = None;
    for attempt in 1..=2 {
        let t = rng.random_range(cfg.perlin_threshold[0]..=cfg.perlin_threshold[1]);
        let bits: Vec<bool> = field.iter().map(|&v| v as f64 > t).collect();
        let m = Mask::from_bits(w, h, bits).expect("field matches image size");
        record.attempts = attempt;
        record.perlin_threshold = Some(t);
        if cfg.area_ok(m.area(), w * h) {
            mask = Some(m);
            break;
        }
    }
    let Some(mask) = mask else {
        return Ok(SynthSample::noop(normal, SynthMethod::Perlin, record));
    };
    let noise = Normal::new(0.0f32, 0.04).expect("valid sigma");
    let shift: [f32; 3] = std::array::from_fn(|_| {
        let mag = rng.random_range(0.15f32..=0.45);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    });
    let mut anomaly = normal.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let px = normal.get(x, y);
            let out: [u8; 3] = std::array::from_fn(|c| quantize(px[c] as f32 / 255.0 + shift[c] + noise.sample(rng)));
            anomaly.put(x, y, out);
        }
    }
    Ok(SynthSample {
        normal: normal.clone(),
        anomaly,
        mask,
        method: SynthMethod::Perlin,
        noop: false,
        record,
    })
}

/// Mean absolute luma step over 4-neighbour pairs that straddle the mask
/// boundary; `None` when the mask has no boundary.
pub fn seam_gradient(image: &Image, mask: &Mask) -> Option<f64> {
    let (w, h) = image.dims();
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let m = mask.get(x, y);
            if x + 1 < w && mask.get(x + 1, y) != m {
                sum += (image.luma(x, y) - image.luma(x + 1, y)).abs();
                n += 1;
            }
            if y + 1 < h && mask.get(x, y + 1) != m {
                sum += (image.luma(x, y) - image.luma(x, y + 1)).abs();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
