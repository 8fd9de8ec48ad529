//! Test-only oracles shared by integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tab_core::tensor::{Element, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::cast_from(z * std)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// A randomly shaped small differentiable network ending in a scalar loss.
/// Parameters live outside the tape so finite differences can perturb them.
#[derive(Debug, Clone)]
pub struct RandomNet {
    pub kind: NetKind,
    pub params: Vec<Tensor<f64>>,
    pub input: Tensor<f64>,
    pub text: Tensor<f64>,
    pub targets: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    /// linear -> bias -> relu -> linear -> bias -> cross-entropy
    Mlp,
    /// conv -> instance norm -> relu -> conv -> pool -> linear -> l2 norm ->
    /// text similarity -> cross-entropy
    Conv,
}

impl RandomNet {
    /// Two-layer perceptron with a cross-entropy head.
    pub fn mlp(seed: u64) -> Self {
        let mut r = rng(seed);
        let batch = r.random_range(2..6);
        let d_in = r.random_range(2..8);
        let hidden = r.random_range(3..10);
        let classes = r.random_range(2..6);
        let params = vec![
            randn(&mut r, vec![d_in, hidden], 0.8),
            randn(&mut r, vec![hidden], 0.3),
            randn(&mut r, vec![hidden, classes], 0.8),
            randn(&mut r, vec![classes], 0.3),
        ];
        let input = randn(&mut r, vec![batch, d_in], 1.0);
        let targets = (0..batch).map(|_| r.random_range(0..classes)).collect();
        Self {
            kind: NetKind::Mlp,
            params,
            input,
            text: Tensor::zeros(vec![1, 1]),
            targets,
            stride: 1,
            padding: 0,
            tau: 1.0,
        }
    }

    pub fn conv(seed: u64) -> Self {
        let mut r = rng(seed);
        let batch = r.random_range(1..4);
        let c_in = r.random_range(1..4);
        let c_mid = r.random_range(2..6);
        let c_out = r.random_range(2..6);
        let size = r.random_range(5..9);
        let stride = r.random_range(1..3);
        let padding = r.random_range(0..2);
        let embed = r.random_range(3..8);
        let classes = r.random_range(2..5);
        let params = vec![
            randn(&mut r, vec![c_mid, c_in, 3, 3], 0.6),
            Tensor::new(
                vec![c_mid],
                (0..c_mid).map(|_| 1.0 + 0.2 * r.random::<f64>()).collect(),
            )
            .unwrap(),
            randn(&mut r, vec![c_mid], 0.2),
            randn(&mut r, vec![c_out, c_mid, 3, 3], 0.6),
            randn(&mut r, vec![c_out, embed], 0.8),
            randn(&mut r, vec![embed], 0.2),
        ];
        let input = randn(&mut r, vec![batch, c_in, size, size], 1.0);
        let text = unit_rows(randn(&mut r, vec![classes, embed], 1.0));
        let targets = (0..batch).map(|_| r.random_range(0..classes)).collect();
        Self {
            kind: NetKind::Conv,
            params,
            input,
            text,
            targets,
            stride,
            padding,
            tau: 0.5,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Records the forward pass on a fresh tape.
    pub fn forward<T: Element>(&self, params: &[Tensor<T>]) -> (Tape<T>, Vec<Var>, Var) {
        let (mut tape, vars, logits) = self.forward_logits(params);
        let loss = tape.softmax_cross_entropy(logits, &self.targets).unwrap();
        (tape, vars, loss)
    }

    /// Forward pass up to (not including) the cross-entropy.
    pub fn forward_logits<T: Element>(&self, params: &[Tensor<T>]) -> (Tape<T>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let x = tape.constant(self.input.cast());
        let logits = match self.kind {
            NetKind::Mlp => {
                let h = tape.matmul(x, vars[0]).unwrap();
                let h = tape.add_bias(h, vars[1]).unwrap();
                let h = tape.relu(h).unwrap();
                let z = tape.matmul(h, vars[2]).unwrap();
                tape.add_bias(z, vars[3]).unwrap()
            }
            NetKind::Conv => {
                let h = tape.conv2d(x, vars[0], self.stride, self.padding).unwrap();
                let h = tape.instance_norm(h, vars[1], vars[2]).unwrap();
                let h = tape.relu(h).unwrap();
                let h = tape.conv2d(h, vars[3], 1, 1).unwrap();
                let p = tape.global_avg_pool(h).unwrap();
                let e = tape.matmul(p, vars[4]).unwrap();
                let e = tape.add_bias(e, vars[5]).unwrap();
                let e = tape.l2_normalize_rows(e).unwrap();
                let text_t = tape.constant(self.text.transposed().unwrap().cast());
                let m = tape.matmul(e, text_t).unwrap();
                tape.scale(m, 1.0 / self.tau).unwrap()
            }
        };
        (tape, vars, logits)
    }

    pub fn loss_value(&self, params: &[Tensor<f64>]) -> f64 {
        let (tape, _, loss) = self.forward(params);
        tape.value(loss).item().unwrap()
    }

    pub fn analytic_grads(&self) -> Vec<Tensor<f64>> {
        let (mut tape, vars, loss) = self.forward(&self.params);
        tape.backward(loss).unwrap();
        vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    }
}

pub fn unit_rows(t: Tensor<f64>) -> Tensor<f64> {
    let [r, c] = [t.shape()[0], t.shape()[1]];
    let mut data = t.into_data();
    for i in 0..r {
        let n = data[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
        data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(vec![r, c], data).unwrap()
}

/// Central-difference gradient of one coordinate.
pub fn central_difference(net: &RandomNet, tensor: usize, index: usize, h: f64) -> f64 {
    let mut plus = net.params.clone();
    plus[tensor].data_mut()[index] += h;
    let mut minus = net.params.clone();
    minus[tensor].data_mut()[index] -= h;
    (net.loss_value(&plus) - net.loss_value(&minus)) / (2.0 * h)
}

/// Relative error with an absolute floor so that gradients which are zero
/// up to rounding do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Relative errors for up to `max_coords` randomly sampled parameter
/// coordinates (all coordinates when the net is small enough).
pub fn fd_errors(net: &RandomNet, h: f64, max_coords: usize, seed: u64) -> Vec<f64> {
    let grads = net.analytic_grads();
    let mut coords: Vec<(usize, usize)> = net
        .params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.numel()).map(move |i| (t, i)))
        .collect();
    if coords.len() > max_coords {
        let mut r = rng(seed);
        for i in 0..max_coords {
            let j = r.random_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }
    coords
        .into_iter()
        .map(|(t, i)| relative_error(grads[t].data()[i], central_difference(net, t, i, h)))
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// O(N^2) pair-count AUROC: P(score_pos > score_neg) + 0.5 P(tie).
pub fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Direct log-sum-exp cross-entropy, batch mean.
pub fn cross_entropy_oracle(logits: &[f64], k: usize, targets: &[usize]) -> f64 {
    let b = targets.len();
    let mut total = 0.0;
    for i in 0..b {
        let row = &logits[i * k..(i + 1) * k];
        let sum: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[targets[i]].exp() / sum).ln();
    }
    total / b as f64
}

pub fn checkerboard(w: usize, h: usize, cell: usize, a: [u8; 3], b: [u8; 3]) -> tab_core::imaging::Image {
    let mut img = tab_core::imaging::Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            img.put(x, y, if (x / cell + y / cell) % 2 == 0 { a } else { b });
        }
    }
    img
}

/// Smooth two-tone texture with mild noise, closer to real surfaces than a checkerboard.
pub fn noisy_texture(w: usize, h: usize, seed: u64) -> tab_core::imaging::Image {
    let mut r = rng(seed);
    let phase: f64 = r.random::<f64>() * 6.0;
    let mut img = tab_core::imaging::Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let s = ((x as f64 * 0.4 + y as f64 * 0.15 + phase).sin() * 0.5 + 0.5) * 120.0 + 60.0;
            let n: f64 = r.random_range(-10.0..10.0);
            let v = (s + n).clamp(0.0, 255.0) as u8;
            img.put(x, y, [v, v.saturating_sub(20), v / 2 + 40]);
        }
    }
    img
}

pub fn random_planes(w: usize, h: usize, seed: u64) -> tab_core::synthesis::Planes {
    let mut r = rng(seed);
    tab_core::synthesis::Planes {
        width: w,
        height: h,
        data: (0..3 * w * h).map(|_| r.random::<f32>()).collect(),
    }
}

/// Independent residual: 5-point Laplacian of result minus that of source,
/// over pixels whose whole stencil lies inside the region.
pub fn laplacian_residual(result: &tab_core::synthesis::Planes, source: &tab_core::synthesis::Planes, region: &tab_core::imaging::Mask, ox: usize, oy: usize) -> f64 {
    let mut worst = 0.0f64;
    for c in 0..3 {
        let r = result.channel(c);
        let s = source.channel(c);
        for y in 1..source.height - 1 {
            for x in 1..source.width - 1 {
                let inside = [(x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)].iter().all(|&(a, b)| region.get(a, b));
                if !inside {
                    continue;
                }
                let lap = |p: &[f32], w: usize, x: usize, y: usize| -> f64 {
                    4.0 * p[y * w + x] as f64 - p[y * w + x - 1] as f64 - p[y * w + x + 1] as f64 - p[(y - 1) * w + x] as f64 - p[(y + 1) * w + x] as f64
                };
                let lr = lap(r, result.width, ox + x, oy + y);
                let ls = lap(s, source.width, x, y);
                worst = worst.max((lr - ls).abs());
            }
        }
    }
    worst
}
