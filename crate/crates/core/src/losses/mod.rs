//! Training objectives: smoothed cross-entropy, MMD, cross-layer attention
//! and the alignment/calibration losses.

mod alignment;
mod attention;
mod calibration;
mod mmd;
mod smoothing;

pub use alignment::{
    alignment_loss, alignment_loss_with, calibration_loss, pairwise_discrepancy_table, projected_alignment_grad,
    AlignmentGrad,
};
pub use attention::{
    attention_backward, attention_weights, attention_weights_variant, AttentionMatrix, AttentionVariant,
};
pub use calibration::{calibration_objective, CalibrationOutput, CalibrationSettings};
pub use mmd::{mmd, mmd_with_grad, mse_with_grad, Bandwidth, Discrepancy, DiscrepancyGrad, KernelConfig};
pub use smoothing::{
    cross_entropy, cross_entropy_grad, label_smoothed_ce_grad, smooth_labels, smoothed_ce, smoothed_ce_grad,
    SmoothedLabel, DEFAULT_LABEL_SMOOTHING,
};
