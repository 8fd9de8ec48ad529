use super::{DownstreamError, Result};
use crate::backbone::{images_to_tensor, Backbone};
use crate::imaging::{resize_planes_bilinear, Image};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PadimConfig {
    /// 1-based backbone stages whose maps are concatenated.
    pub stages: Vec<usize>,
    /// Added to every covariance diagonal.
    pub eps: f64,
    /// Gaussian smoothing of the upsampled map, in pixels.
    pub sigma: f64,
    /// Images per feature-extraction pass.
    pub chunk: usize,
}

impl Default for PadimConfig {
    fn default() -> Self {
        Self {
            stages: vec![1, 2],
            eps: 0.01,
            sigma: 4.0,
            chunk: 32,
        }
    }
}

impl PadimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(DownstreamError::Config("no feature stages selected".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(DownstreamError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DownstreamError::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.chunk == 0 {
            return Err(DownstreamError::Config("chunk must be at least 1".into()));
        }
        Ok(())
    }
}

/// Patch embeddings on a common grid: `data[(n * positions + p) * dim + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub count: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PatchFeatures {
    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn vector(&self, n: usize, p: usize) -> &[f64] {
        let at = (n * self.positions() + p) * self.dim;
        &self.data[at..at + self.dim]
    }

    /// Concatenates `[B, C_s, H_s, W_s]` maps after nearest-neighbour
    /// resampling each onto the coarsest grid.
    pub fn from_maps(maps: &[(Vec<usize>, &[f32])]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| DownstreamError::Config("no feature maps".into()))?;
        let count = first.0[0];
        if maps.iter().any(|(s, d)| s.len() != 4 || s[0] != count || d.len() != s.iter().product::<usize>()) {
            return Err(DownstreamError::Config("feature maps disagree on batch size or shape".into()));
        }
        let grid_h = maps.iter().map(|(s, _)| s[2]).min().expect("nonempty");
        let grid_w = maps.iter().map(|(s, _)| s[3]).min().expect("nonempty");
        let dim: usize = maps.iter().map(|(s, _)| s[1]).sum();
        let positions = grid_h * grid_w;
        let mut data = vec![0.0; count * positions * dim];
        let mut offset = 0;
        for (shape, map) in maps {
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let src = |i: usize, n_out: usize, n_in: usize| (((2 * i + 1) * n_in) / (2 * n_out)).min(n_in - 1);
            for n in 0..count {
                for gy in 0..grid_h {
                    let sy = src(gy, grid_h, h);
                    for gx in 0..grid_w {
                        let sx = src(gx, grid_w, w);
                        let at = (n * positions + gy * grid_w + gx) * dim + offset;
                        for ch in 0..c {
                            data[at + ch] = map[((n * c + ch) * h + sy) * w + sx] as f64;
                        }
                    }
                }
            }
            offset += c;
        }
        Ok(Self {
            count,
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    pub fn extract(backbone: &Backbone<f32>, images: &[&Image], cfg: &PadimConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(DownstreamError::Config("no images".into()));
        }
        let mut parts = Vec::new();
        for chunk in images.chunks(cfg.chunk) {
            let maps = backbone.feature_maps(&images_to_tensor(chunk)?, &cfg.stages)?;
            let views: Vec<(Vec<usize>, &[f32])> = maps.iter().map(|m| (m.shape().to_vec(), m.data())).collect();
            parts.push(Self::from_maps(&views)?);
        }
        let mut all = parts.remove(0);
        for p in parts {
            all.count += p.count;
            all.data.extend(p.data);
        }
        Ok(all)
    }
}

/// Per-position Gaussian of nominal patch embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBank {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub eps: f64,
    /// `[P, d]`
    pub mean: Vec<f64>,
    /// `[P, d, d]`, regularized.
    pub cov: Vec<f64>,
    /// `[P, d, d]`, inverse of `cov`.
    pub precision: Vec<f64>,
}

/// Lower Cholesky factor of a symmetric positive-definite `n x n` matrix.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverse of an SPD matrix from its Cholesky factor: `L^-T L^-1`.
fn spd_inverse(l: &[f64], n: usize) -> Vec<f64> {
    // columns of L^-1 by forward substitution
    let mut linv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (col..i).map(|k| l[i * n + k] * linv[k * n + col]).sum();
            linv[i * n + col] = (rhs - s) / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = (i..n).map(|k| linv[k * n + i] * linv[k * n + j]).sum();
            inv[i * n + j] = v;
            inv[j * n + i] = v;
        }
    }
    inv
}

impl GaussianBank {
    /// Builds a bank from explicit statistics; `cov` is used as given (no
    /// extra regularization) and must be positive definite.
    pub fn from_parts(grid_h: usize, grid_w: usize, dim: usize, eps: f64, mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let p = grid_h * grid_w;
        if mean.len() != p * dim || cov.len() != p * dim * dim {
            return Err(DownstreamError::Config("statistics do not match the grid".into()));
        }
        let precision: Vec<Vec<f64>> = cov
            .par_chunks(dim * dim)
            .enumerate()
            .map(|(pos, c)| {
                cholesky(c, dim)
                    .map(|l| spd_inverse(&l, dim))
                    .ok_or_else(|| DownstreamError::Statistics(format!("covariance at position {pos} is not positive definite")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            eps,
            mean,
            cov,
            precision: precision.concat(),
        })
    }

    /// Per-position mean and covariance (normalized by N) plus `eps * I`.
    pub fn fit(feats: &PatchFeatures, eps: f64) -> Result<Self> {
        let n = feats.count;
        if n < 2 {
            return Err(DownstreamError::Statistics(format!("need at least 2 nominal images, got {n}")));
        }
        let d = feats.dim;
        if n * 4 < d {
            log::warn!("{n} nominal images for {d}-dimensional patches; covariance will lean on eps");
        }
        let stats: Vec<(Vec<f64>, Vec<f64>)> = (0..feats.positions())
            .into_par_iter()
            .map(|p| {
                let mut mu = vec![0.0; d];
                for i in 0..n {
                    for (m, x) in mu.iter_mut().zip(feats.vector(i, p)) {
                        *m += x;
                    }
                }
                mu.iter_mut().for_each(|m| *m /= n as f64);
                let mut cov = vec![0.0; d * d];
                let mut centered = vec![0.0; d];
                for i in 0..n {
                    for ((c, x), m) in centered.iter_mut().zip(feats.vector(i, p)).zip(&mu) {
                        *c = x - m;
                    }
                    for a in 0..d {
                        let ca = centered[a];
                        let row = &mut cov[a * d..a * d + a + 1];
                        for (b, v) in row.iter_mut().enumerate() {
                            *v += ca * centered[b];
                        }
                    }
                }
                for a in 0..d {
                    for b in 0..=a {
                        let v = cov[a * d + b] / n as f64 + if a == b { eps } else { 0.0 };
                        cov[a * d + b] = v;
                        cov[b * d + a] = v;
                    }
                }
                (mu, cov)
            })
            .collect();
        let (mean, cov): (Vec<_>, Vec<_>) = stats.into_iter().unzip();
        Self::from_parts(feats.grid_h, feats.grid_w, d, eps, mean.concat(), cov.concat())
    }

    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn mahalanobis(&self, p: usize, x: &[f64]) -> f64 {
        let d = self.dim;
        let mu = &self.mean[p * d..(p + 1) * d];
        let prec = &self.precision[p * d * d..(p + 1) * d * d];
        let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for a in 0..d {
            let row = &prec[a * d..(a + 1) * d];
            q += diff[a] * row.iter().zip(&diff).map(|(w, v)| w * v).sum::<f64>();
        }
        q.max(0.0).sqrt()
    }

    /// Grid distances `[N, P]` for every image in `feats`.
    pub fn distances(&self, feats: &PatchFeatures) -> Result<Vec<Vec<f64>>> {
        if (feats.grid_h, feats.grid_w, feats.dim) != (self.grid_h, self.grid_w, self.dim) {
            return Err(DownstreamError::Config(format!(
                "features on a {}x{}x{} grid, bank fitted on {}x{}x{}",
                feats.grid_h, feats.grid_w, feats.dim, self.grid_h, self.grid_w, self.dim
            )));
        }
        Ok((0..feats.count)
            .into_par_iter()
            .map(|n| (0..self.positions()).map(|p| self.mahalanobis(p, feats.vector(n, p))).collect())
            .collect())
    }
}

/// Per-pixel anomaly scores at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f32>,
    /// Maximum of `scores`.
    pub image_score: f64,
}

/// Separable Gaussian blur with symmetric border reflection; the kernel is
/// cut at four sigma.
pub fn gaussian_blur(plane: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let period = 2 * n;
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - 1 - m }) as usize
    };
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + reflect(x as isize + k as isize - radius, w)] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                .sum::<f64>() as f32;
        }
    }
    out
}

/// Upsamples grid distances to `width x height` and smooths them.
pub fn anomaly_map(grid: &[f64], grid_w: usize, grid_h: usize, width: usize, height: usize, sigma: f64) -> AnomalyMap {
    let g: Vec<f32> = grid.iter().map(|&v| v as f32).collect();
    let up = resize_planes_bilinear(&g, 1, grid_w, grid_h, width, height);
    let scores = gaussian_blur(&up, width, height, sigma);
    let image_score = scores.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    AnomalyMap {
        width,
        height,
        scores,
        image_score,
    }
}

/// A fitted PaDiM model for one category.
#[derive(Debug, Clone)]
pub struct Padim {
    pub config: PadimConfig,
    pub bank: GaussianBank,
}

impl Padim {
    pub fn fit(backbone: &Backbone<f32>, normals: &[&Image], cfg: &PadimConfig) -> Result<Self> {
        cfg.validate()?;
        if normals.len() < 2 {
            return Err(DownstreamError::Statistics(format!("need at least 2 nominal images, got {}", normals.len())));
        }
        let feats = PatchFeatures::extract(backbone, normals, cfg)?;
        Ok(Self {
            config: cfg.clone(),
            bank: GaussianBank::fit(&feats, cfg.eps)?,
        })
    }

    pub fn score(&self, backbone: &Backbone<f32>, images: &[&Image]) -> Result<Vec<AnomalyMap>> {
        if images.is_empty() {
            return Ok(vec![]);
        }
        let feats = PatchFeatures::extract(backbone, images, &self.config)?;
        let grids = self.bank.distances(&feats)?;
        Ok(grids
            .par_iter()
            .zip(images.par_iter())
            .map(|(g, img)| anomaly_map(g, self.bank.grid_w, self.bank.grid_h, img.width(), img.height(), self.config.sigma))
            .collect())
    }
}
