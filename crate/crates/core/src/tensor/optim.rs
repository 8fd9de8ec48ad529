use super::{Result, Tensor, TensorError};

/// Parameter update rule. `params` and `grads` are parallel slices.
pub trait Optimizer {
    fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()>;
    fn learning_rate(&self) -> f64;
}

fn check_pairs(params: &[Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TensorError::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TensorError::Dimension {
                op: "optimizer_step",
                detail: format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            });
        }
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Contract(format!(
                "non-finite gradient in parameter {i} at element {pos}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
        check_pairs(params, grads)?;
        let lr = self.lr as f32;
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
        check_pairs(params, grads)?;
        if self.t == 0 {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(TensorError::Contract(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = self.lr / bc1;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let d = d as f64;
                let mn = b1 * (*mi as f64) + (1.0 - b1) * d;
                let vn = b2 * (*vi as f64) + (1.0 - b2) * d * d;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = step * mn / ((vn / bc2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}
