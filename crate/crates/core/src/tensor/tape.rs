use super::{gemm, Element, Result, Tensor, TensorError};
use rayon::prelude::*;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    SliceRows(Var, usize),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    GlobalAvgPool(Var),
    L2NormalizeRows(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op,
    // Op-specific values cached by the forward pass (normalized activations,
    // inverse norms, softmax probabilities).
    saved: Vec<T>,
}

/// Ordered record of executed operations. Inputs of every node precede it,
/// so the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

const INSTANCE_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zeros when `v` was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient shape matches value"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op, inputs: &[Var], saved: Vec<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: kind,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2("matmul")?;
        let [k2, n] = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b], Vec::new())
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transposed()?;
        self.push("transpose", value, Op::Transpose(a), &[a], Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b], Vec::new())
    }

    /// Adds a `[N]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = *vx.shape().last().ok_or_else(|| dim_err("add_bias", "scalar input".into()))?;
        if vb.shape() != [n] {
            return Err(dim_err("add_bias", format!("bias {:?} for input {:?}", vb.shape(), vx.shape())));
        }
        let b = vb.data();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias], Vec::new())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b], Vec::new())
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::cast_from(factor);
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * f).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(a, factor), &[a], Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push("sum", Tensor::scalar(T::cast_from(s)), Op::Sum(a), &[a], Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s: f64 = va.data().iter().map(|v| v.as_f64()).sum();
        let m = s / va.numel() as f64;
        self.push("mean", Tensor::scalar(T::cast_from(m)), Op::Mean(a), &[a], Vec::new())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(a), &[a], Vec::new())
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let rows = *va.shape().first().ok_or_else(|| dim_err("slice_rows", "scalar input".into()))?;
        if start >= end || end > rows {
            return Err(dim_err("slice_rows", format!("range {start}..{end} of {rows} rows")));
        }
        let row_len = va.numel() / rows;
        let data = va.data()[start * row_len..end * row_len].to_vec();
        let mut shape = va.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        self.push("slice_rows", value, Op::SliceRows(a, start), &[a], Vec::new())
    }

    /// Cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [b, c_in, h, w] = self.value(input).dims4("conv2d")?;
        let [c_out, kc, kh, kw] = self.value(kernel).dims4("conv2d")?;
        if kc != c_in {
            return Err(dim_err("conv2d", format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        if kh != kw {
            return Err(dim_err("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be positive".into()));
        }
        let geo = ConvGeometry::new(c_in, h, w, kh, stride, padding)?;
        let out_hw = geo.out_h * geo.out_w;
        let kdim = c_in * kh * kh;
        let mut out = vec![T::zero(); b * c_out * out_hw];
        let x = self.value(input).data();
        let wk = self.value(kernel).data();
        // images are independent; each worker keeps its own column buffer
        out.par_chunks_mut(c_out * out_hw).enumerate().for_each_init(
            || vec![T::zero(); kdim * out_hw],
            |col, (bi, dst)| {
                geo.im2col(&x[bi * c_in * h * w..(bi + 1) * c_in * h * w], col);
                gemm(false, false, c_out, kdim, out_hw, T::one(), wk, col, T::zero(), dst);
            },
        );
        let value = Tensor::new(vec![b, c_out, geo.out_h, geo.out_w], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
            Vec::new(),
        )
    }

    /// Per-sample, per-channel normalization over the spatial axes followed by
    /// a per-channel affine transform.
    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("instance_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(dim_err(
                "instance_norm",
                format!(
                    "affine params {:?}/{:?} for {c} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![T::zero(); x.len()];
        // saved: normalized activations followed by one inverse std per (b, c)
        let mut saved = vec![T::zero(); x.len() + b * c];
        for bc in 0..b * c {
            let ch = bc % c;
            let plane = &x[bc * hw..(bc + 1) * hw];
            let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / hw as f64;
            let inv_std = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            saved[x.len() + bc] = T::cast_from(inv_std);
            for (i, &v) in plane.iter().enumerate() {
                let xh = T::cast_from((v.as_f64() - mean) * inv_std);
                saved[bc * hw + i] = xh;
                out[bc * hw + i] = g[ch] * xh + be[ch];
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        self.push(
            "instance_norm",
            value,
            Op::InstanceNorm { input, gamma, beta },
            &[input, gamma, beta],
            saved,
        )
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("global_avg_pool")?;
        let hw = h * w;
        let x = self.value(input).data();
        let data = (0..b * c)
            .map(|bc| T::cast_from(x[bc * hw..(bc + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
            .collect();
        let value = Tensor::new(vec![b, c], data)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(input), &[input], Vec::new())
    }

    /// Scales each row of a `[B, C]` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let [b, c] = self.value(input).dims2("l2_normalize_rows")?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); b * c];
        let mut norms = vec![T::zero(); b];
        for i in 0..b {
            let row = &x[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(L2_EPS);
            norms[i] = T::cast_from(norm);
            for j in 0..c {
                out[i * c + j] = T::cast_from(row[j].as_f64() / norm);
            }
        }
        let value = Tensor::new(vec![b, c], out)?;
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows(input), &[input], norms)
    }

    /// Batch mean of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [b, k] = self.value(logits).dims2("softmax_cross_entropy")?;
        if targets.len() != b {
            return Err(dim_err(
                "softmax_cross_entropy",
                format!("{} targets for {b} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Index {
                op: "softmax_cross_entropy",
                index: bad,
                size: k,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut total = 0.0f64;
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[targets[i]].as_f64();
            for j in 0..k {
                probs[i * k + j] = T::cast_from((row[j].as_f64() - lse).exp());
            }
        }
        let value = Tensor::scalar(T::cast_from(total / b as f64));
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
            probs,
        )
    }

    /// Reverse sweep from a single-element `loss`. Gradients of earlier
    /// calls are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got {numel} elements"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            let Some(upstream) = node.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let contributions = input_grads(before, node, upstream)?;
            for (var, g) in contributions {
                let target = &mut before[var.0];
                if !target.requires_grad {
                    continue;
                }
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn needs(nodes: &[Node<impl Element>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Vector-Jacobian products of one node with respect to its inputs.
fn input_grads<T: Element>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
    let val = |v: Var| &nodes[v.0].value;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let [m, k] = val(*a).dims2("matmul")?;
            let [_, n] = val(*b).dims2("matmul")?;
            if needs(nodes, *a) {
                let mut ga = vec![T::zero(); m * k];
                gemm(false, true, m, n, k, T::one(), g, val(*b).data(), T::zero(), &mut ga);
                out.push((*a, ga));
            }
            if needs(nodes, *b) {
                let mut gb = vec![T::zero(); k * n];
                gemm(true, false, k, m, n, T::one(), val(*a).data(), g, T::zero(), &mut gb);
                out.push((*b, gb));
            }
        }
        Op::Transpose(a) => {
            let [r, c] = val(*a).dims2("transpose")?;
            let mut ga = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            out.push((*a, ga));
        }
        Op::Add(a, b) => {
            out.push((*a, g.to_vec()));
            out.push((*b, g.to_vec()));
        }
        Op::AddBias(x, bias) => {
            let n = val(*bias).numel();
            let mut gb = vec![T::zero(); n];
            for (i, &v) in g.iter().enumerate() {
                gb[i % n] = gb[i % n] + v;
            }
            out.push((*x, g.to_vec()));
            out.push((*bias, gb));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            out.push((*a, g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect()));
            out.push((*b, g.iter().zip(va).map(|(&gi, &x)| gi * x).collect()));
        }
        Op::Scale(a, f) => {
            let f = T::cast_from(*f);
            out.push((*a, g.iter().map(|&gi| gi * f).collect()));
        }
        Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).numel()])),
        Op::Mean(a) => {
            let n = val(*a).numel();
            out.push((*a, vec![T::cast_from(g[0].as_f64() / n as f64); n]));
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            out.push((
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect(),
            ));
        }
        Op::SliceRows(a, start) => {
            let va = val(*a);
            let rows = va.shape()[0];
            let row_len = va.numel() / rows;
            let mut ga = vec![T::zero(); va.numel()];
            ga[start * row_len..start * row_len + g.len()].copy_from_slice(g);
            out.push((*a, ga));
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let [b, c_in, h, w] = val(*input).dims4("conv2d")?;
            let [c_out, _, k, _] = val(*kernel).dims4("conv2d")?;
            let geo = ConvGeometry::new(c_in, h, w, k, *stride, *padding)?;
            let out_hw = geo.out_h * geo.out_w;
            let kdim = c_in * k * k;
            let x = val(*input).data();
            let wk = val(*kernel).data();
            let want_x = needs(nodes, *input);
            let want_w = needs(nodes, *kernel);
            let in_len = c_in * h * w;
            let mut gx = vec![T::zero(); if want_x { x.len() } else { 0 }];
            // per-image weight gradients, summed afterwards in image order so
            // the result does not depend on the thread count
            let mut gw_parts = vec![T::zero(); if want_w { b * wk.len() } else { 0 }];
            let gx_chunks: Vec<&mut [T]> = if want_x { gx.chunks_mut(in_len).collect() } else { (0..b).map(|_| Default::default()).collect() };
            let gw_chunks: Vec<&mut [T]> = if want_w { gw_parts.chunks_mut(wk.len()).collect() } else { (0..b).map(|_| Default::default()).collect() };
            gx_chunks.into_par_iter().zip(gw_chunks).enumerate().for_each_init(
                || (vec![T::zero(); kdim * out_hw], vec![T::zero(); kdim * out_hw]),
                |(col, gcol), (bi, (gx_i, gw_i))| {
                    let gout = &g[bi * c_out * out_hw..(bi + 1) * c_out * out_hw];
                    if want_w {
                        geo.im2col(&x[bi * in_len..(bi + 1) * in_len], col);
                        gemm(false, true, c_out, out_hw, kdim, T::one(), gout, col, T::zero(), gw_i);
                    }
                    if want_x {
                        gemm(true, false, kdim, c_out, out_hw, T::one(), wk, gout, T::zero(), gcol);
                        geo.col2im(gcol, gx_i);
                    }
                },
            );
            if want_x {
                out.push((*input, gx));
            }
            if want_w {
                let mut gw = vec![T::zero(); wk.len()];
                for part in gw_parts.chunks(wk.len()) {
                    gw.iter_mut().zip(part).for_each(|(a, &v)| *a = *a + v);
                }
                out.push((*kernel, gw));
            }
        }
        Op::InstanceNorm { input, gamma, beta } => {
            let [b, c, h, w] = val(*input).dims4("instance_norm")?;
            let hw = h * w;
            let n = b * c * hw;
            let (xhat, inv_std) = node.saved.split_at(n);
            let gam = val(*gamma).data();
            let mut gg = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            let mut gx = vec![T::zero(); n];
            for bc in 0..b * c {
                let ch = bc % c;
                let range = bc * hw..(bc + 1) * hw;
                let (gp, xp) = (&g[range.clone()], &xhat[range.clone()]);
                let mut sum_g = 0.0f64;
                let mut sum_gx = 0.0f64;
                for (&gi, &xi) in gp.iter().zip(xp) {
                    sum_g += gi.as_f64();
                    sum_gx += gi.as_f64() * xi.as_f64();
                }
                gbeta[ch] = gbeta[ch] + T::cast_from(sum_g);
                gg[ch] = gg[ch] + T::cast_from(sum_gx);
                let gm = gam[ch].as_f64();
                let is = inv_std[bc].as_f64();
                let mean_dxh = gm * sum_g / hw as f64;
                let mean_dxh_xh = gm * sum_gx / hw as f64;
                for (i, (&gi, &xi)) in gp.iter().zip(xp).enumerate() {
                    let dxh = gm * gi.as_f64();
                    gx[bc * hw + i] = T::cast_from(is * (dxh - mean_dxh - xi.as_f64() * mean_dxh_xh));
                }
            }
            out.push((*input, gx));
            out.push((*gamma, gg));
            out.push((*beta, gbeta));
        }
        Op::GlobalAvgPool(input) => {
            let [_, _, h, w] = val(*input).dims4("global_avg_pool")?;
            let hw = h * w;
            let inv = T::cast_from(1.0 / hw as f64);
            let mut gx = vec![T::zero(); val(*input).numel()];
            for (bc, &gi) in g.iter().enumerate() {
                gx[bc * hw..(bc + 1) * hw].fill(gi * inv);
            }
            out.push((*input, gx));
        }
        Op::L2NormalizeRows(input) => {
            let [b, c] = val(*input).dims2("l2_normalize_rows")?;
            let y = node.value.data();
            let mut gx = vec![T::zero(); b * c];
            for i in 0..b {
                let yr = &y[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                let norm = node.saved[i].as_f64();
                for j in 0..c {
                    gx[i * c + j] = T::cast_from((gr[j].as_f64() - yr[j].as_f64() * dot) / norm);
                }
            }
            out.push((*input, gx));
        }
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let [b, k] = val(*logits).dims2("softmax_cross_entropy")?;
            let scale = g[0].as_f64() / b as f64;
            let mut gz = vec![T::zero(); b * k];
            for i in 0..b {
                for j in 0..k {
                    let p = node.saved[i * k + j].as_f64();
                    let t = if j == targets[i] { 1.0 } else { 0.0 };
                    gz[i * k + j] = T::cast_from((p - t) * scale);
                }
            }
            out.push((*logits, gz));
        }
    }
    Ok(out)
}

/// Index arithmetic shared by the convolution forward and backward passes.
#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if k == 0 || k > ph || k > pw {
            return Err(dim_err(
                "conv2d",
                format!("kernel {k} does not fit padded input {ph}x{pw}"),
            ));
        }
        let out_h = (ph - k) / stride + 1;
        let out_w = (pw - k) / stride + 1;
        Ok(Self {
            c_in,
            h,
            w,
            k,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    /// Column index range of output `(ky, kx)` taps that land inside the
    /// unpadded row/column, written as `(first_out, last_out_exclusive)`.
    #[inline]
    fn valid_range(&self, tap: usize, size: usize, out: usize) -> (usize, usize) {
        // input = o * stride + tap - padding must lie in [0, size)
        let lo = if tap >= self.padding {
            0
        } else {
            (self.padding - tap).div_ceil(self.stride)
        };
        let hi_num = size + self.padding;
        let hi = if hi_num > tap {
            ((hi_num - tap - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        let out_hw = self.out_h * self.out_w;
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy0, oy1) = self.valid_range(ky, self.h, self.out_h);
                for kx in 0..self.k {
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.out_w);
                    let row = ((c * self.k + ky) * self.k + kx) * out_hw;
                    let dst = &mut col[row..row + out_hw];
                    dst.fill(T::zero());
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.padding;
                        let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                        let drow = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            let ix0 = ox0 + kx - self.padding;
                            drow[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox] = src_row[ox * self.stride + kx - self.padding];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], gx: &mut [T]) {
        let out_hw = self.out_h * self.out_w;
        for c in 0..self.c_in {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy0, oy1) = self.valid_range(ky, self.h, self.out_h);
                for kx in 0..self.k {
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.out_w);
                    let row = ((c * self.k + ky) * self.k + kx) * out_hw;
                    let src = &col[row..row + out_hw];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.padding;
                        let srow = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let prow = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in ox0..ox1 {
                            let ix = ox * self.stride + kx - self.padding;
                            prow[ix] = prow[ix] + srow[ox];
                        }
                    }
                }
            }
        }
    }
}
