//! Cross-layer pair weights from position-wise and channel-wise similarity.
//!
//! Each projected feature map of one sample is viewed as a `c x d` matrix
//! (`d = g * w`). For fused layer `l` (matrix `A`) and local layer `m` (matrix
//! `B`) the position score is the mean entry of `A^T B` and the channel score
//! the mean entry of `A B^T`, both averaged over the batch. Rows of the score
//! matrices go through a max-shifted softmax over `m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::FeatureTap;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Mean of the position and channel weights.
    #[default]
    Full,
    PositionOnly,
    ChannelOnly,
    /// Every pair weighted `1 / |R|`.
    Uniform,
}

/// Row-stochastic `|R| x |R|` weights; row `l` is a fused layer, column `m` a
/// local layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub layers: Vec<String>,
    pub alpha: Vec<f64>,
    pub position: Vec<f64>,
    pub channel: Vec<f64>,
}

impl AttentionMatrix {
    pub fn size(&self) -> usize {
        self.layers.len()
    }

    pub fn get(&self, l: usize, m: usize) -> f64 {
        self.alpha[l * self.size() + m]
    }

    pub fn uniform(layers: Vec<String>) -> Self {
        let r = layers.len();
        let v = vec![1.0 / r as f64; r * r];
        AttentionMatrix {
            layers,
            alpha: v.clone(),
            position: v.clone(),
            channel: v,
        }
    }

    /// Weight 1 on matching layers only.
    pub fn same_layer(layers: Vec<String>) -> Self {
        let r = layers.len();
        let mut v = vec![0.0; r * r];
        for i in 0..r {
            v[i * r + i] = 1.0;
        }
        AttentionMatrix {
            layers,
            alpha: v.clone(),
            position: v.clone(),
            channel: v,
        }
    }

    /// Largest deviation of any row sum from 1 over the three matrices.
    pub fn max_row_error(&self) -> f64 {
        let r = self.size();
        [&self.alpha, &self.position, &self.channel]
            .iter()
            .flat_map(|m| m.chunks_exact(r).map(|row| (row.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

fn check_taps<T: Real>(fused: &FeatureTap<T>, local: &FeatureTap<T>) -> Result<Vec<usize>> {
    if fused.is_empty() || fused.len() != local.len() {
        return Err(Error::invalid(
            "fused and local taps must cover the same non-empty layer set",
        ));
    }
    let shape = fused[0].shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(format!("features must be (B, c, g, w), got {shape:?}")));
    }
    for (name, t) in fused.iter().chain(local.iter()) {
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: shape.clone(),
                actual: t.shape().to_vec(),
            });
        }
        if !fused.contains_key(name) || !local.contains_key(name) {
            return Err(Error::invalid(format!("layer `{name}` missing from one side")));
        }
    }
    Ok(shape)
}

/// Per-sample sums over positions (`B x c`) and over channels (`B x d`).
fn marginals<T: Real>(t: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let (b, c, d) = (s[0], s[1], s[2] * s[3]);
    let mut by_channel = vec![0.0; b * c];
    let mut by_position = vec![0.0; b * d];
    for n in 0..b {
        for i in 0..c {
            let row = &t.data()[(n * c + i) * d..(n * c + i + 1) * d];
            for (p, &v) in row.iter().enumerate() {
                let v = v.to_f64_lossy();
                by_channel[n * c + i] += v;
                by_position[n * d + p] += v;
            }
        }
    }
    (by_channel, by_position)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_rows(scores: &[f64], r: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(scores.len());
    for row in scores.chunks_exact(r) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

struct Scores {
    layers: Vec<String>,
    position: Vec<f64>,
    channel: Vec<f64>,
    // Per layer: (by_channel, by_position) marginals for fused and local.
    fused: Vec<(Vec<f64>, Vec<f64>)>,
    local: Vec<(Vec<f64>, Vec<f64>)>,
    dims: (usize, usize, usize),
}

fn scores<T: Real>(fused: &FeatureTap<T>, local: &FeatureTap<T>) -> Result<Scores> {
    let shape = check_taps(fused, local)?;
    let (b, c, d) = (shape[0], shape[1], shape[2] * shape[3]);
    let layers: Vec<String> = fused.keys().cloned().collect();
    let fm: Vec<_> = layers.iter().map(|l| marginals(&fused[l])).collect();
    let lm: Vec<_> = layers.iter().map(|l| marginals(&local[l])).collect();
    let r = layers.len();
    let mut position = vec![0.0; r * r];
    let mut channel = vec![0.0; r * r];
    for l in 0..r {
        for m in 0..r {
            // mean(A^T B) = sum_i rowsum(A)_i rowsum(B)_i / d^2
            // mean(A B^T) = sum_p colsum(A)_p colsum(B)_p / c^2
            let mut sp = 0.0;
            let mut sc = 0.0;
            for n in 0..b {
                sp += dot(&fm[l].0[n * c..(n + 1) * c], &lm[m].0[n * c..(n + 1) * c]);
                sc += dot(&fm[l].1[n * d..(n + 1) * d], &lm[m].1[n * d..(n + 1) * d]);
            }
            position[l * r + m] = sp / (b * d * d) as f64;
            channel[l * r + m] = sc / (b * c * c) as f64;
        }
    }
    Ok(Scores {
        layers,
        position,
        channel,
        fused: fm,
        local: lm,
        dims: (b, c, d),
    })
}

/// Pair weights for projected fused and local features over the same layers.
pub fn attention_weights<T: Real>(fused: &FeatureTap<T>, local: &FeatureTap<T>) -> Result<AttentionMatrix> {
    attention_weights_variant(fused, local, AttentionVariant::Full)
}

pub fn attention_weights_variant<T: Real>(
    fused: &FeatureTap<T>,
    local: &FeatureTap<T>,
    variant: AttentionVariant,
) -> Result<AttentionMatrix> {
    let s = scores(fused, local)?;
    let r = s.layers.len();
    let position = softmax_rows(&s.position, r);
    let channel = softmax_rows(&s.channel, r);
    let alpha = match variant {
        AttentionVariant::Full => position.iter().zip(&channel).map(|(p, c)| 0.5 * (p + c)).collect(),
        AttentionVariant::PositionOnly => position.clone(),
        AttentionVariant::ChannelOnly => channel.clone(),
        AttentionVariant::Uniform => vec![1.0 / r as f64; r * r],
    };
    Ok(AttentionMatrix {
        layers: s.layers,
        alpha,
        position,
        channel,
    })
}

/// Backpropagate `d_alpha = dL/d alpha` into the projected features.
/// Returns gradients for the fused and local taps.
pub fn attention_backward<T: Real>(
    fused: &FeatureTap<T>,
    local: &FeatureTap<T>,
    att: &AttentionMatrix,
    variant: AttentionVariant,
    d_alpha: &[f64],
) -> Result<(FeatureTap<T>, FeatureTap<T>)> {
    let s = scores(fused, local)?;
    let r = s.layers.len();
    let (wp, wc) = match variant {
        AttentionVariant::Full => (0.5, 0.5),
        AttentionVariant::PositionOnly => (1.0, 0.0),
        AttentionVariant::ChannelOnly => (0.0, 1.0),
        AttentionVariant::Uniform => (0.0, 0.0),
    };
    // Softmax backward per row: ds_lm = a_lm (g_lm - sum_k a_lk g_lk).
    let softmax_back = |a: &[f64], w: f64| -> Vec<f64> {
        let mut ds = vec![0.0; r * r];
        for l in 0..r {
            let row = &a[l * r..(l + 1) * r];
            let g = &d_alpha[l * r..(l + 1) * r];
            let inner: f64 = row.iter().zip(g).map(|(a, g)| a * g * w).sum();
            for m in 0..r {
                ds[l * r + m] = row[m] * (g[m] * w - inner);
            }
        }
        ds
    };
    let dsp = softmax_back(&att.position, wp);
    let dsc = softmax_back(&att.channel, wc);
    let (b, c, d) = s.dims;
    let kp = 1.0 / (b * d * d) as f64;
    let kc = 1.0 / (b * c * c) as f64;

    let shape = fused[0].shape().to_vec();
    let mut gf = FeatureTap::new();
    let mut gl = FeatureTap::new();
    for (side, out) in [(0, &mut gf), (1, &mut gl)] {
        for (idx, name) in s.layers.iter().enumerate() {
            // Accumulate the marginals of the other side, weighted by the score gradients.
            let mut by_channel = vec![0.0; b * c];
            let mut by_position = vec![0.0; b * d];
            for other in 0..r {
                let (ds_p, ds_c, marg) = if side == 0 {
                    (dsp[idx * r + other], dsc[idx * r + other], &s.local[other])
                } else {
                    (dsp[other * r + idx], dsc[other * r + idx], &s.fused[other])
                };
                for (acc, &v) in by_channel.iter_mut().zip(&marg.0) {
                    *acc += ds_p * kp * v;
                }
                for (acc, &v) in by_position.iter_mut().zip(&marg.1) {
                    *acc += ds_c * kc * v;
                }
            }
            let mut g = vec![T::zero(); b * c * d];
            for n in 0..b {
                for i in 0..c {
                    let ci = by_channel[n * c + i];
                    for p in 0..d {
                        g[(n * c + i) * d + p] = T::from_f64_lossy(ci + by_position[n * d + p]);
                    }
                }
            }
            out.insert(name.clone(), Tensor::from_vec(&shape, g)?);
        }
    }
    Ok((gf, gl))
}
