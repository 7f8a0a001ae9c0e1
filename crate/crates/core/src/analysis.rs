//! Parameter-distance study across domains, ablation sweeps and small
//! statistics helpers.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{layer_distance, DistanceMetric, FusionStrategy};
use crate::datasets::{DomainDataset, DomainSplit};
use crate::error::{Error, Result};
use crate::federation::{initial_model, run_csac, TrainingConfig};
use crate::federation::{local_acquisition_from, Method};
use crate::losses::{AttentionVariant, Discrepancy};
use crate::models::{Cnn, ModelHandle};
use crate::rng::derive_seed;

const STUDY_STREAM: u64 = 0x57D7;

/// How the models of a distance study are initialised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyInit {
    /// One initial network per study; models differ in data order only.
    #[default]
    Shared,
    /// Every model draws its own initial network.
    Independent,
}

/// Index of a trained model within the study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelId {
    pub domain: usize,
    pub model: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: ModelId,
    pub b: ModelId,
    pub distance: f64,
    pub intra: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistances {
    pub layer: String,
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub pairs: Vec<PairDistance>,
}

impl LayerDistances {
    pub fn intra(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().filter(|p| p.intra).map(|p| p.distance)
    }

    pub fn inter(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().filter(|p| !p.intra).map(|p| p.distance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStudyReport {
    pub domains: Vec<String>,
    pub models_per_domain: usize,
    pub init: StudyInit,
    pub layers: Vec<LayerDistances>,
    pub note: String,
}

impl DistanceStudyReport {
    pub fn layer(&self, name: &str) -> Option<&LayerDistances> {
        self.layers.iter().find(|l| l.layer == name)
    }

    /// Per-pair rows: layer, both model ids, pair kind and distance.
    pub fn write_pairs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "layer", "domain_a", "model_a", "domain_b", "model_b", "kind", "distance",
        ])?;
        for l in &self.layers {
            for p in &l.pairs {
                w.write_record([
                    l.layer.clone(),
                    self.domains[p.a.domain].clone(),
                    p.a.model.to_string(),
                    self.domains[p.b.domain].clone(),
                    p.b.model.to_string(),
                    if p.intra { "intra" } else { "inter" }.to_string(),
                    p.distance.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv>".into(),
            source: e,
        })?;
        Ok(())
    }

    /// Per-layer means and gap ratio.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let ratios = gap_ratio_by_layer(self)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "intra_mean", "inter_mean", "gap_ratio"])?;
        for (l, (_, r)) in self.layers.iter().zip(&ratios) {
            w.write_record([
                l.layer.clone(),
                l.intra_mean.to_string(),
                l.inter_mean.to_string(),
                r.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv>".into(),
            source: e,
        })?;
        Ok(())
    }

    /// Layer name to the raw intra and inter distances, for plotting.
    pub fn plot_data(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for l in &self.layers {
            map.insert(
                l.layer.clone(),
                serde_json::json!({
                    "intra": l.intra().collect::<Vec<_>>(),
                    "inter": l.inter().collect::<Vec<_>>(),
                }),
            );
        }
        serde_json::Value::Object(map)
    }
}

/// Train `models_per_domain` models per domain and compare their layer
/// parameters pairwise with the L2 distance.
pub fn parameter_distance_study(
    domains: &[DomainDataset],
    models_per_domain: usize,
    layers: &[String],
    cfg: &TrainingConfig,
    init: StudyInit,
) -> Result<DistanceStudyReport> {
    if models_per_domain < 2 {
        return Err(Error::InsufficientSamples(format!(
            "distance study needs at least 2 models per domain, got {models_per_domain}"
        )));
    }
    let first = domains
        .first()
        .ok_or_else(|| Error::invalid("distance study needs at least one domain"))?;
    let shape = first.image_shape();
    let classes = first.num_classes();
    let shared = initial_model(shape, classes, cfg)?;
    for l in layers {
        if shared.params().group(l).is_none() {
            return Err(Error::invalid(format!("unknown layer `{l}`")));
        }
    }

    let jobs: Vec<ModelId> = (0..domains.len())
        .flat_map(|d| (0..models_per_domain).map(move |m| ModelId { domain: d, model: m }))
        .collect();
    let models: Vec<ModelHandle> = jobs
        .par_iter()
        .map(|id| {
            let seed = derive_seed(cfg.seed, &[STUDY_STREAM, id.domain as u64, id.model as u64]);
            let start = match init {
                StudyInit::Shared => shared.clone(),
                StudyInit::Independent => Cnn::new(shared.arch().clone(), seed)?,
            };
            let run_cfg = TrainingConfig { seed, ..cfg.clone() };
            Ok(local_acquisition_from(&start, &domains[id.domain], &run_cfg, 0)?.0)
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let flat: Vec<Vec<f32>> = models
            .iter()
            .map(|m| m.params().flatten_group(layer))
            .collect::<Result<_>>()?;
        let mut pairs = Vec::new();
        for i in 0..jobs.len() {
            for j in i + 1..jobs.len() {
                pairs.push(PairDistance {
                    a: jobs[i],
                    b: jobs[j],
                    distance: layer_distance(&flat[i], &flat[j], DistanceMetric::L2)?,
                    intra: jobs[i].domain == jobs[j].domain,
                });
            }
        }
        let mean = |it: &mut dyn Iterator<Item = f64>| {
            let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                s / n as f64
            }
        };
        let mut ld = LayerDistances {
            layer: layer.clone(),
            intra_mean: 0.0,
            inter_mean: 0.0,
            pairs,
        };
        let intra_mean = mean(&mut ld.intra());
        let inter_mean = mean(&mut ld.inter());
        ld.intra_mean = intra_mean;
        ld.inter_mean = inter_mean;
        out.push(ld);
    }
    Ok(DistanceStudyReport {
        domains: domains.iter().map(|d| d.domain_id().to_string()).collect(),
        models_per_domain,
        init,
        layers: out,
        note: format!(
            "desk-scale study: {models_per_domain} models per domain on a small CNN; \
             the reference setup used 50 ResNet-18 models per domain"
        ),
    })
}

/// `(inter - intra) / inter` per layer.
pub fn gap_ratio_by_layer(report: &DistanceStudyReport) -> Result<Vec<(String, f64)>> {
    report
        .layers
        .iter()
        .map(|l| {
            if !(l.inter_mean > 0.0) {
                return Err(Error::invalid(format!(
                    "layer `{}` has zero inter-domain distance",
                    l.layer
                )));
            }
            Ok((l.layer.clone(), (l.inter_mean - l.intra_mean) / l.inter_mean))
        })
        .collect()
}

/// One switch setting applied on top of a base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Fusion(FusionStrategy),
    Metric(DistanceMetric),
    AlignmentOff,
    SameLayer,
    Attention(AttentionVariant),
    NoSmoothing,
    NoRetrainingCe,
    Mse,
}

/// Accepted spellings for [`Ablation::parse`].
pub const ABLATION_SWITCHES: &[&str] = &[
    "fusion=divergence",
    "fusion=similarity",
    "fusion=average",
    "metric=l2",
    "metric=l1",
    "metric=cosine",
    "alignment=off",
    "same_layer",
    "attention=full",
    "attention=off",
    "attention=position_only",
    "attention=channel_only",
    "smoothing=off",
    "retraining_ce=off",
    "discrepancy=mse",
];

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        let a = match s.trim().to_ascii_lowercase().as_str() {
            "fusion=divergence" => Ablation::Fusion(FusionStrategy::Divergence),
            "fusion=similarity" => Ablation::Fusion(FusionStrategy::Similarity),
            "fusion=average" => Ablation::Fusion(FusionStrategy::Average),
            "metric=l2" => Ablation::Metric(DistanceMetric::L2),
            "metric=l1" => Ablation::Metric(DistanceMetric::L1),
            "metric=cosine" => Ablation::Metric(DistanceMetric::Cosine),
            "alignment=off" => Ablation::AlignmentOff,
            "same_layer" => Ablation::SameLayer,
            "attention=full" => Ablation::Attention(AttentionVariant::Full),
            "attention=off" => Ablation::Attention(AttentionVariant::Uniform),
            "attention=position_only" => Ablation::Attention(AttentionVariant::PositionOnly),
            "attention=channel_only" => Ablation::Attention(AttentionVariant::ChannelOnly),
            "smoothing=off" => Ablation::NoSmoothing,
            "retraining_ce=off" => Ablation::NoRetrainingCe,
            "discrepancy=mse" => Ablation::Mse,
            other => {
                return Err(Error::invalid(format!(
                    "unknown ablation switch `{other}`; valid switches: {}",
                    ABLATION_SWITCHES.join(", ")
                )))
            }
        };
        Ok(a)
    }

    pub fn name(&self) -> String {
        match self {
            Ablation::Fusion(f) => format!("fusion={}", f.name()),
            Ablation::Metric(m) => format!("metric={}", m.name()),
            Ablation::AlignmentOff => "alignment=off".into(),
            Ablation::SameLayer => "same_layer".into(),
            Ablation::Attention(AttentionVariant::Full) => "attention=full".into(),
            Ablation::Attention(AttentionVariant::Uniform) => "attention=off".into(),
            Ablation::Attention(AttentionVariant::PositionOnly) => "attention=position_only".into(),
            Ablation::Attention(AttentionVariant::ChannelOnly) => "attention=channel_only".into(),
            Ablation::NoSmoothing => "smoothing=off".into(),
            Ablation::NoRetrainingCe => "retraining_ce=off".into(),
            Ablation::Mse => "discrepancy=mse".into(),
        }
    }

    pub fn apply(&self, cfg: &mut TrainingConfig) {
        match self {
            Ablation::Fusion(f) => cfg.fusion = *f,
            Ablation::Metric(m) => cfg.metric = *m,
            Ablation::AlignmentOff => cfg.alignment = false,
            Ablation::SameLayer => cfg.same_layer_only = true,
            Ablation::Attention(a) => cfg.attention = *a,
            Ablation::NoSmoothing => cfg.smoothing = false,
            Ablation::NoRetrainingCe => cfg.retraining_ce = false,
            Ablation::Mse => cfg.discrepancy = Discrepancy::Mse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub accuracy: f64,
    pub finite: bool,
}

/// One CSAC run per setting (a single baseline run when `axes` is empty),
/// all with the seed of `base`.
pub fn ablation_sweep(split: &DomainSplit, base: &TrainingConfig, axes: &[Ablation]) -> Result<Vec<AblationRow>> {
    let settings: Vec<(String, TrainingConfig)> = if axes.is_empty() {
        vec![("baseline".into(), base.clone())]
    } else {
        axes.iter()
            .map(|a| {
                let mut c = base.clone();
                a.apply(&mut c);
                (a.name(), c)
            })
            .collect()
    };
    settings
        .into_iter()
        .map(|(setting, cfg)| {
            let (model, logs) = run_csac(split, &cfg)?;
            let accuracy = logs.last().map_or(f64::NAN, |l| l.target_post);
            Ok(AblationRow {
                setting,
                accuracy,
                finite: model.params().is_finite(),
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["setting", "accuracy", "finite"])?;
    for r in rows {
        w.write_record([r.setting.clone(), r.accuracy.to_string(), r.finite.to_string()])?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<csv>".into(),
        source: e,
    })?;
    Ok(())
}

/// Sample mean and standard error of the mean (zero for one value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Method-agnostic summary used by the ablation and run front ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub method: Method,
    pub target: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

impl AccuracySummary {
    pub fn new(method: Method, target: &str, seeds: Vec<u64>, accuracies: Vec<f64>) -> Self {
        let (mean, stderr) = mean_stderr(&accuracies);
        AccuracySummary {
            method,
            target: target.to_string(),
            seeds,
            accuracies,
            mean,
            stderr,
        }
    }
}
