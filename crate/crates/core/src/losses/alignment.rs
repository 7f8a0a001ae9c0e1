//! Cross-layer alignment between the trainable model's features and the
//! frozen local model's features, after projection to a common shape.

use crate::error::{Error, Result};
use crate::losses::attention::AttentionMatrix;
use crate::losses::mmd::{Discrepancy, KernelConfig};
use crate::models::{FeatureTap, ProjectionHead};
use crate::tensor::{Real, Tensor};

/// Row-major `|R| x |R|` table of `D(fused_l, local_m)` over projected taps.
pub fn pairwise_discrepancy_table<T: Real>(
    fused: &FeatureTap<T>,
    local: &FeatureTap<T>,
    disc: &Discrepancy,
) -> Result<Vec<f64>> {
    check_layers(fused, local)?;
    let mut table = Vec::with_capacity(fused.len() * local.len());
    for f in fused.values() {
        for l in local.values() {
            table.push(disc.value(f, l)?.to_f64_lossy());
        }
    }
    Ok(table)
}

fn check_layers<T: Real>(fused: &FeatureTap<T>, local: &FeatureTap<T>) -> Result<()> {
    if fused.is_empty() || !fused.keys().eq(local.keys()) {
        return Err(Error::invalid(
            "fused and local taps must list the same layers in the same order",
        ));
    }
    Ok(())
}

fn check_alpha<T: Real>(fused: &FeatureTap<T>, alpha: &AttentionMatrix) -> Result<()> {
    let r = fused.len();
    if alpha.size() != r || alpha.alpha.len() != r * r {
        return Err(Error::ShapeMismatch {
            expected: vec![r, r],
            actual: vec![alpha.size(), alpha.alpha.len() / alpha.size().max(1)],
        });
    }
    Ok(())
}

/// Value of the weighted alignment sum and its gradients w.r.t. the already
/// projected taps. `table` holds the unweighted pair discrepancies.
#[derive(Clone, Debug)]
pub struct AlignmentGrad<T> {
    pub value: f64,
    pub table: Vec<f64>,
    pub d_fused: FeatureTap<T>,
    pub d_local: FeatureTap<T>,
}

/// `sum_{l,m} alpha_lm D(fused_l, local_m)` on projected taps, with gradients.
pub fn projected_alignment_grad<T: Real>(
    fused: &FeatureTap<T>,
    local: &FeatureTap<T>,
    alpha: &AttentionMatrix,
    disc: &Discrepancy,
) -> Result<AlignmentGrad<T>> {
    check_layers(fused, local)?;
    check_alpha(fused, alpha)?;
    let r = fused.len();
    let mut d_fused: FeatureTap<T> = fused
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect();
    let mut d_local: FeatureTap<T> = local
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect();
    let mut value = 0.0;
    let mut table = vec![0.0; r * r];
    for (l, f) in fused.values().enumerate() {
        for (m, g) in local.values().enumerate() {
            let a = alpha.get(l, m);
            let res = disc.with_grad(f, g)?;
            let v = res.value.to_f64_lossy();
            table[l * r + m] = v;
            value += a * v;
            if a != 0.0 {
                d_fused[l].axpy(T::from_f64_lossy(a), &res.grad_x);
                d_local[m].axpy(T::from_f64_lossy(a), &res.grad_y);
            }
        }
    }
    Ok(AlignmentGrad {
        value,
        table,
        d_fused,
        d_local,
    })
}

/// Alignment loss over raw taps: both sides go through `proj`, then every
/// fused/local layer pair contributes `alpha_lm * D`.
pub fn alignment_loss_with<T: Real>(
    fused: &FeatureTap<T>,
    local: &FeatureTap<T>,
    proj: &ProjectionHead<T>,
    alpha: &AttentionMatrix,
    disc: &Discrepancy,
) -> Result<T> {
    let (pf, _) = proj.project(fused)?;
    let (pl, _) = proj.project(local)?;
    let g = projected_alignment_grad(&pf, &pl, alpha, disc)?;
    Ok(T::from_f64_lossy(g.value))
}

/// Alignment loss with the MMD discrepancy.
pub fn alignment_loss<T: Real>(
    fused: &FeatureTap<T>,
    local: &FeatureTap<T>,
    proj: &ProjectionHead<T>,
    alpha: &AttentionMatrix,
    k: &KernelConfig,
) -> Result<T> {
    alignment_loss_with(fused, local, proj, alpha, &Discrepancy::Mmd(k.clone()))
}

/// `lambda * l_al + l_ar`.
pub fn calibration_loss(l_al: f64, l_ar: f64, lambda: f64) -> f64 {
    lambda * l_al + l_ar
}
