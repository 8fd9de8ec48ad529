use crate::tensor::{Element, Result, Tape, Tensor, TensorError, Var};

/// `[B, K]` indicator matrix of the labels.
pub fn one_hot(y: &[usize], k: usize) -> Result<Tensor<f64>> {
    let mut out = vec![0.0; y.len() * k];
    for (i, &c) in y.iter().enumerate() {
        if c >= k {
            return Err(TensorError::Index {
                op: "one_hot",
                index: c,
                size: k,
            });
        }
        out[i * k + c] = 1.0;
    }
    Tensor::new(vec![y.len(), k], out)
}

/// `M[i][k] = f_v[i] . f_t[k] / tau` for `f_v: [B, C]` and `f_t: [K, C]`.
/// Rows are expected to be unit length already; nothing is renormalized.
pub fn similarity_logits<T: Element>(f_v: &Tensor<T>, f_t: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    check_tau(tau)?;
    let mut tape = Tape::new();
    let v = tape.constant(f_v.clone());
    let t = tape.constant(f_t.transposed()?);
    let m = logits_var(&mut tape, v, t, tau)?;
    Ok(tape.value(m).clone())
}

/// Weighted mean of the normal and anomaly cross-entropies:
/// `(CE(M_n, y) + w * CE(M_a, y)) / (1 + w)`. `w = 1` is the plain average,
/// `w = 0` drops the anomaly term.
pub fn alignment_loss(m_n: &Tensor<f64>, m_a: &Tensor<f64>, y: &[usize], anomaly_weight: f64) -> Result<f64> {
    if m_n.shape() != m_a.shape() {
        return Err(TensorError::Dimension {
            op: "alignment_loss",
            detail: format!("{:?} vs {:?}", m_n.shape(), m_a.shape()),
        });
    }
    let mut tape = Tape::new();
    let n = tape.constant(m_n.clone());
    let a = tape.constant(m_a.clone());
    let l = alignment_loss_var(&mut tape, n, Some(a), y, anomaly_weight)?;
    tape.value(l).item().map(|v| v.as_f64())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Contract(format!("temperature must be positive, got {tau}")))
    }
}

/// Graph version of [`similarity_logits`]; `anchors_t` is `[C, K]`.
pub fn logits_var<T: Element>(tape: &mut Tape<T>, f_v: Var, anchors_t: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let m = tape.matmul(f_v, anchors_t)?;
    tape.scale(m, 1.0 / tau)
}

/// Graph version of [`alignment_loss`]. With `m_a = None` this is the
/// normal-only objective.
pub fn alignment_loss_var<T: Element>(tape: &mut Tape<T>, m_n: Var, m_a: Option<Var>, y: &[usize], anomaly_weight: f64) -> Result<Var> {
    if !(anomaly_weight >= 0.0 && anomaly_weight.is_finite()) {
        return Err(TensorError::Contract(format!("anomaly weight must be finite and non-negative, got {anomaly_weight}")));
    }
    let ce_n = tape.softmax_cross_entropy(m_n, y)?;
    let Some(m_a) = m_a else {
        return Ok(ce_n);
    };
    if tape.shape(m_n) != tape.shape(m_a) {
        return Err(TensorError::Dimension {
            op: "alignment_loss",
            detail: format!("{:?} vs {:?}", tape.shape(m_n), tape.shape(m_a)),
        });
    }
    let ce_a = tape.softmax_cross_entropy(m_a, y)?;
    let ce_a = tape.scale(ce_a, anomaly_weight)?;
    let total = tape.add(ce_n, ce_a)?;
    tape.scale(total, 1.0 / (1.0 + anomaly_weight))
}
