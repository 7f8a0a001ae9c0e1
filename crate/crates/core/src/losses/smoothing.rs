use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Default smoothing strength for local training.
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

/// Soft target distribution over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedLabel {
    probs: Vec<f64>,
}

impl SmoothedLabel {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// `(1 - alpha) * onehot(y) + alpha / C`.
pub fn smooth_labels(y: usize, classes: usize, alpha: f64) -> Result<SmoothedLabel> {
    if y >= classes {
        return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("smoothing {alpha} outside [0, 1)")));
    }
    let off = alpha / classes as f64;
    let mut probs = vec![off; classes];
    probs[y] += 1.0 - alpha;
    Ok(SmoothedLabel { probs })
}

fn check_logits<T: Real>(logits: &Tensor<T>, batch: usize, classes: usize) -> Result<()> {
    if logits.shape() != [batch, classes] {
        return Err(Error::ShapeMismatch {
            expected: vec![batch, classes],
            actual: logits.shape().to_vec(),
        });
    }
    if batch == 0 {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    Ok(())
}

/// Mean soft-target cross-entropy and its gradient w.r.t. the logits.
/// `targets` is `batch x classes`, row-major.
fn soft_ce_grad<T: Real>(logits: &Tensor<T>, targets: &[f64], classes: usize) -> (T, Tensor<T>) {
    let batch = logits.rows();
    let inv_b = 1.0 / batch as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(batch * classes);
    for (row, p) in logits.data().chunks_exact(classes).zip(targets.chunks_exact(classes)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64_lossy()));
        let lse = max + row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum::<f64>().ln();
        for (&z, &pc) in row.iter().zip(p) {
            let log_q = z.to_f64_lossy() - lse;
            loss -= pc * log_q;
            grad.push(T::from_f64_lossy((log_q.exp() - pc) * inv_b));
        }
    }
    (
        T::from_f64_lossy(loss * inv_b),
        Tensor::from_vec(&[batch, classes], grad).expect("grad shape"),
    )
}

pub fn smoothed_ce_grad<T: Real>(logits: &Tensor<T>, targets: &[SmoothedLabel]) -> Result<(T, Tensor<T>)> {
    let classes = targets.first().map_or(0, |t| t.probs.len());
    check_logits(logits, targets.len(), classes)?;
    if targets.iter().any(|t| t.probs.len() != classes) {
        return Err(Error::invalid("targets disagree on class count"));
    }
    let flat: Vec<f64> = targets.iter().flat_map(|t| t.probs.iter().copied()).collect();
    Ok(soft_ce_grad(logits, &flat, classes))
}

/// `-mean_b sum_c p_c log softmax(logits)_c`.
pub fn smoothed_ce<T: Real>(logits: &Tensor<T>, targets: &[SmoothedLabel]) -> Result<T> {
    Ok(smoothed_ce_grad(logits, targets)?.0)
}

/// Cross-entropy against hard labels smoothed by `alpha` (`alpha = 0` is plain
/// cross-entropy).
pub fn label_smoothed_ce_grad<T: Real>(logits: &Tensor<T>, labels: &[usize], alpha: f64) -> Result<(T, Tensor<T>)> {
    let classes = logits.shape().get(1).copied().unwrap_or(0);
    check_logits(logits, labels.len(), classes)?;
    let off = alpha / classes as f64;
    let mut flat = vec![off; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        flat[i * classes + y] += 1.0 - alpha;
    }
    Ok(soft_ce_grad(logits, &flat, classes))
}

pub fn cross_entropy_grad<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    label_smoothed_ce_grad(logits, labels, 0.0)
}

pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(cross_entropy_grad(logits, labels)?.0)
}
