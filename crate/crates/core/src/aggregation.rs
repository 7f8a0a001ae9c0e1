//! Layer-wise fusion of client parameter trees.
//!
//! All arithmetic is done in f64 in schema order, and each fused element is
//! clamped into the range spanned by its inputs, so fusing copies of one tree
//! returns it exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParameterTree;
use crate::tensor::{Real, Tensor};

/// Total distance below which the weighted rules fall back to uniform weights.
pub const FUSION_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    L2,
    L1,
    Cosine,
}

impl DistanceMetric {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::L2 => "l2",
            DistanceMetric::L1 => "l1",
            DistanceMetric::Cosine => "cosine",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Larger weight for layers far from the average.
    #[default]
    Divergence,
    /// Larger weight for layers close to the average (reconstructed rule).
    Similarity,
    /// Equal weights.
    Average,
}

impl FusionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Divergence => "divergence",
            FusionStrategy::Similarity => "similarity",
            FusionStrategy::Average => "average",
        }
    }
}

/// Distance between two flattened layer groups.
pub fn layer_distance<T: Real>(a: &[T], b: &[T], metric: DistanceMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    let pairs = a.iter().zip(b).map(|(x, y)| (x.to_f64_lossy(), y.to_f64_lossy()));
    Ok(match metric {
        DistanceMetric::L2 => pairs.map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        DistanceMetric::L1 => pairs.map(|(x, y)| (x - y).abs()).sum(),
        DistanceMetric::Cosine => {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (x, y) in pairs {
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            if aa == 0.0 || bb == 0.0 {
                log::warn!("cosine distance with a zero vector; treating as no divergence");
                0.0
            } else {
                (1.0 - ab / (aa.sqrt() * bb.sqrt())).max(0.0)
            }
        }
    })
}

/// Weights and distances used for one layer group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFusion {
    pub layer: String,
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
    /// True when the distance sum was below [`FUSION_EPS`].
    pub uniform_fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub strategy: FusionStrategy,
    pub metric: DistanceMetric,
    pub domains: Vec<String>,
    pub layers: Vec<LayerFusion>,
}

impl FusionReport {
    pub fn with_domains(mut self, domains: &[String]) -> Self {
        self.domains = domains.to_vec();
        self
    }

    pub fn layer(&self, name: &str) -> Option<&LayerFusion> {
        self.layers.iter().find(|l| l.layer == name)
    }

    /// Weight of source `h` averaged over layer groups.
    pub fn mean_weight(&self, h: usize) -> f64 {
        self.layers.iter().map(|l| l.weights[h]).sum::<f64>() / self.layers.len().max(1) as f64
    }
}

/// Write `round,layer,domain,distance,weight` rows for each report.
pub fn write_fusion_csv<W: Write>(out: W, reports: &[(usize, &FusionReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "layer", "domain", "distance", "weight"])?;
    for (round, rep) in reports {
        for lf in &rep.layers {
            for (h, (d, wt)) in lf.distances.iter().zip(&lf.weights).enumerate() {
                let domain = rep.domains.get(h).cloned().unwrap_or_else(|| h.to_string());
                w.write_record([
                    round.to_string(),
                    lf.layer.clone(),
                    domain,
                    d.to_string(),
                    wt.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn check_trees<T: Real>(trees: &[ParameterTree<T>]) -> Result<()> {
    let first = trees
        .first()
        .ok_or_else(|| Error::invalid("fusion needs at least one parameter tree"))?;
    for t in &trees[1..] {
        first.check_same_schema(t)?;
    }
    Ok(())
}

/// Weighted sum of one tensor across trees, clamped into the input range.
fn combine<T: Real>(parts: &[&Tensor<T>], weights: &[f64]) -> Tensor<T> {
    let n = parts[0].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (p, &w) in parts.iter().zip(weights) {
            let v = p.data()[i].to_f64_lossy();
            acc += w * v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        out.push(T::from_f64_lossy(acc.clamp(lo, hi)));
    }
    Tensor::from_vec(parts[0].shape(), out).expect("same shape")
}

/// Fuse per layer group with the given per-layer weight vectors.
fn fuse_with<T: Real>(trees: &[ParameterTree<T>], weights: &[Vec<f64>]) -> ParameterTree<T> {
    let mut out = ParameterTree::new();
    for (gi, (layer, group)) in trees[0].groups().enumerate() {
        for name in group.keys() {
            let parts: Vec<&Tensor<T>> = trees.iter().map(|t| t.tensor(layer, name)).collect();
            out.insert(layer, name, combine(&parts, &weights[gi]));
        }
    }
    out
}

/// Element-wise mean of the trees.
pub fn average_parameters<T: Real>(trees: &[ParameterTree<T>]) -> Result<ParameterTree<T>> {
    check_trees(trees)?;
    let h = trees.len();
    let w = vec![vec![1.0 / h as f64; h]; trees[0].num_layers()];
    Ok(fuse_with(trees, &w))
}

/// Data-size weighted sum `sum_h n_h / N * tree_h`.
pub fn fuse_fedavg<T: Real>(trees: &[ParameterTree<T>], sizes: &[usize]) -> Result<ParameterTree<T>> {
    check_trees(trees)?;
    if sizes.len() != trees.len() {
        return Err(Error::invalid(format!(
            "{} sizes for {} trees",
            sizes.len(),
            trees.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("client sizes must be positive"));
    }
    let total: usize = sizes.iter().sum();
    let w: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    Ok(fuse_with(trees, &vec![w; trees[0].num_layers()]))
}

/// Distance of every tree's layer group to the group average.
fn distances_to_average<T: Real>(
    trees: &[ParameterTree<T>],
    avg: &ParameterTree<T>,
    metric: DistanceMetric,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for layer in avg.layer_names() {
        let g_avg = avg.flatten_group(layer)?;
        let d = trees
            .iter()
            .map(|t| layer_distance(&t.flatten_group(layer)?, &g_avg, metric))
            .collect::<Result<Vec<_>>>()?;
        out.push((layer.to_string(), d));
    }
    Ok(out)
}

/// Per-layer weights for a strategy given distances to the average.
pub fn strategy_weights(strategy: FusionStrategy, distances: &[f64]) -> (Vec<f64>, bool) {
    let h = distances.len();
    let total: f64 = distances.iter().sum();
    let uniform = vec![1.0 / h as f64; h];
    match strategy {
        FusionStrategy::Average => (uniform, false),
        _ if total < FUSION_EPS || h < 2 => (uniform, true),
        FusionStrategy::Divergence => (distances.iter().map(|d| d / total).collect(), false),
        FusionStrategy::Similarity => {
            let denom = (h - 1) as f64 * total;
            (distances.iter().map(|d| (total - d) / denom).collect(), false)
        }
    }
}

/// Fuse with the chosen strategy and report per-layer weights.
pub fn fuse_layerwise<T: Real>(
    trees: &[ParameterTree<T>],
    strategy: FusionStrategy,
    metric: DistanceMetric,
) -> Result<(ParameterTree<T>, FusionReport)> {
    check_trees(trees)?;
    let avg = average_parameters(trees)?;
    let dists = distances_to_average(trees, &avg, metric)?;
    let mut layers = Vec::with_capacity(dists.len());
    let mut weights = Vec::with_capacity(dists.len());
    for (layer, d) in dists {
        let (w, fallback) = strategy_weights(strategy, &d);
        weights.push(w.clone());
        layers.push(LayerFusion {
            layer,
            distances: d,
            weights: w,
            uniform_fallback: fallback,
        });
    }
    let fused = fuse_with(trees, &weights);
    let report = FusionReport {
        strategy,
        metric,
        domains: (0..trees.len()).map(|h| h.to_string()).collect(),
        layers,
    };
    Ok((fused, report))
}

/// Divergence-weighted fusion: per layer, `w_h = d_h / sum d`.
pub fn fuse_divergence_weighted<T: Real>(
    trees: &[ParameterTree<T>],
    metric: DistanceMetric,
) -> Result<(ParameterTree<T>, FusionReport)> {
    if trees.len() < 2 {
        return Err(Error::invalid("divergence-weighted fusion needs at least two trees"));
    }
    fuse_layerwise(trees, FusionStrategy::Divergence, metric)
}

/// Similarity-weighted fusion: per layer, `w_h = (sum d - d_h) / ((H - 1) sum d)`.
pub fn fuse_similarity_weighted<T: Real>(
    trees: &[ParameterTree<T>],
    metric: DistanceMetric,
) -> Result<(ParameterTree<T>, FusionReport)> {
    if trees.len() < 2 {
        return Err(Error::invalid("similarity-weighted fusion needs at least two trees"));
    }
    fuse_layerwise(trees, FusionStrategy::Similarity, metric)
}
