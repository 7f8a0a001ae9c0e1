//! The per-batch calibration objective: weighted cross-layer alignment plus
//! the retraining cross-entropy, with gradients for the trainable model and
//! the projection head.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::alignment::projected_alignment_grad;
use crate::losses::attention::{attention_backward, attention_weights_variant, AttentionMatrix, AttentionVariant};
use crate::losses::mmd::Discrepancy;
use crate::losses::smoothing::cross_entropy_grad;
use crate::models::{Cnn, FeatureTap, ParameterTree, ProjectionHead};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub lambda: f64,
    pub discrepancy: Discrepancy,
    pub attention: AttentionVariant,
    /// Align only matching layers (identity pair weights).
    pub same_layer_only: bool,
    pub alignment: bool,
    pub retraining_ce: bool,
    /// Let gradients flow through the pair weights.
    pub attention_grad: bool,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            lambda: 0.6,
            discrepancy: Discrepancy::default(),
            attention: AttentionVariant::Full,
            same_layer_only: false,
            alignment: true,
            retraining_ce: true,
            attention_grad: false,
        }
    }
}

impl CalibrationSettings {
    pub fn aligns(&self) -> bool {
        self.alignment && self.lambda > 0.0
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationOutput<T> {
    pub total: f64,
    pub l_al: f64,
    pub l_ar: f64,
    pub model_grads: ParameterTree<T>,
    pub proj_grads: ParameterTree<T>,
    pub attention: Option<AttentionMatrix>,
}

/// Loss and gradients on one batch. `frozen` only supplies features.
pub fn calibration_objective<T: Real>(
    model: &Cnn<T>,
    frozen: &Cnn<T>,
    proj: &ProjectionHead<T>,
    x: &Tensor<T>,
    labels: &[usize],
    settings: &CalibrationSettings,
) -> Result<CalibrationOutput<T>> {
    let (logits, taps, cache) = model.forward_train(x)?;
    let mut proj_grads = proj.params().zeros_like();

    let (l_ar, d_logits) = if settings.retraining_ce {
        cross_entropy_grad(&logits, labels)?
    } else {
        (T::zero(), Tensor::zeros(logits.shape()))
    };
    let l_ar = l_ar.to_f64_lossy();

    if !settings.aligns() {
        let model_grads = model.backward(&cache, &d_logits, None);
        return Ok(CalibrationOutput {
            total: l_ar,
            l_al: 0.0,
            l_ar,
            model_grads,
            proj_grads,
            attention: None,
        });
    }

    let (_, local_taps) = frozen.forward_with_features(x)?;
    let (pf, fcache) = proj.project(&taps)?;
    let (pl, lcache) = proj.project(&local_taps)?;
    let layers: Vec<String> = pf.keys().cloned().collect();
    let alpha = if settings.same_layer_only {
        AttentionMatrix::same_layer(layers)
    } else {
        attention_weights_variant(&pf, &pl, settings.attention)?
    };
    let mut al = projected_alignment_grad(&pf, &pl, &alpha, &settings.discrepancy)?;
    if settings.attention_grad && !settings.same_layer_only {
        let (gf, gl) = attention_backward(&pf, &pl, &alpha, settings.attention, &al.table)?;
        for (d, g) in al.d_fused.values_mut().zip(gf.values()) {
            d.axpy(T::one(), g);
        }
        for (d, g) in al.d_local.values_mut().zip(gl.values()) {
            d.axpy(T::one(), g);
        }
    }
    let lam = T::from_f64_lossy(settings.lambda);
    let mut tap_grads = FeatureTap::new();
    for (layer, d) in &al.d_fused {
        let mut d = d.clone();
        d.scale(lam);
        let dx = proj.backward_layer(layer, &d, fcache[layer].as_ref(), &mut proj_grads, true);
        tap_grads.insert(layer.clone(), dx.expect("requested"));
    }
    for (layer, d) in &al.d_local {
        let mut d = d.clone();
        d.scale(lam);
        proj.backward_layer(layer, &d, lcache[layer].as_ref(), &mut proj_grads, false);
    }
    let model_grads = model.backward(&cache, &d_logits, Some(&tap_grads));
    Ok(CalibrationOutput {
        total: settings.lambda * al.value + l_ar,
        l_al: al.value,
        l_ar,
        model_grads,
        proj_grads,
        attention: Some(alpha),
    })
}
