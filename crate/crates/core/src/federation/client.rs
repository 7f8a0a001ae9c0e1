//! A client owns one source domain. Everything that touches its data runs
//! here; the orchestrator only sees parameter trees, loss scalars and
//! accuracies.

use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{Domain, DomainDataset, Split};
use crate::error::{Error, Result};
use crate::federation::config::TrainingConfig;
use crate::federation::optim::Sgd;
use crate::losses::{calibration_objective, label_smoothed_ce_grad};
use crate::models::{argmax, build_projection, Cnn, CnnArch, ModelHandle, ParameterTree, ProjectionHead};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::tensor::Tensor;

pub(crate) const PHASE_ACQUISITION: u64 = 1;
pub(crate) const PHASE_ROUND: u64 = 2;
pub(crate) const PHASE_PROJECTION: u64 = 3;
pub(crate) const PHASE_CENTRAL: u64 = 4;
const INIT_STREAM: u64 = 0x1D17;

/// One dataset read: who read whose data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub reader: String,
    pub owner: String,
    pub split: Split,
}

/// Shared log of dataset reads, used to check that no client data is read
/// by anyone but its owner.
#[derive(Clone, Debug, Default)]
pub struct AccessAudit {
    inner: Arc<Mutex<AuditState>>,
}

#[derive(Debug, Default)]
struct AuditState {
    clients: Vec<String>,
    records: Vec<AccessRecord>,
}

impl AccessAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_client(&self, id: &str) {
        let mut s = self.inner.lock().expect("audit lock");
        if !s.clients.iter().any(|c| c == id) {
            s.clients.push(id.to_string());
        }
    }

    pub fn record(&self, reader: &str, owner: &str, split: Split) {
        self.inner.lock().expect("audit lock").records.push(AccessRecord {
            reader: reader.to_string(),
            owner: owner.to_string(),
            split,
        });
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.inner.lock().expect("audit lock").records.clone()
    }

    /// Reads of a registered client's data by any other party.
    pub fn violations(&self) -> Vec<AccessRecord> {
        let s = self.inner.lock().expect("audit lock");
        s.records
            .iter()
            .filter(|r| r.reader != r.owner && s.clients.contains(&r.owner))
            .cloned()
            .collect()
    }
}

/// Network matching the dataset's image shape and class count.
pub fn arch_for(shape: [usize; 3], classes: usize) -> CnnArch {
    CnnArch {
        in_channels: shape[0],
        ..CnnArch::mnist_for_side(classes, shape[1])
    }
}

/// The initial network shared by every client of a run.
pub fn initial_model(shape: [usize; 3], classes: usize, cfg: &TrainingConfig) -> Result<ModelHandle> {
    Cnn::new(arch_for(shape, classes), derive_seed(cfg.seed, &[INIT_STREAM]))
}

fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn batch_of(data: &DomainDataset, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
    let x = data.images().gather_rows(idx);
    let y = idx.iter().map(|&i| data.labels()[i]).collect();
    (x, y)
}

/// Minibatch training with (optionally smoothed) cross-entropy. Returns the
/// mean loss of each epoch.
pub(crate) fn train_ce(
    model: &mut ModelHandle,
    data: &DomainDataset,
    epochs: usize,
    smoothing: f64,
    cfg: &TrainingConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, rng);
        for idx in &batches {
            let (x, y) = batch_of(data, idx);
            let (logits, _, cache) = model.forward_train(&x)?;
            let (loss, d) = label_smoothed_ce_grad(&logits, &y, smoothing)?;
            let grads = model.backward(&cache, &d, None);
            opt.step(model.params_mut(), &grads);
            total += loss as f64;
        }
        trace.push(total / batches.len() as f64);
    }
    Ok(trace)
}

/// Train a copy of `init` on one domain; the result doubles as the frozen
/// local model.
pub fn local_acquisition_from(
    init: &ModelHandle,
    data: &DomainDataset,
    cfg: &TrainingConfig,
    stream: u64,
) -> Result<(ModelHandle, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.domain_id().to_string()));
    }
    let mut model = init.clone();
    let mut rng = rng_from(cfg.seed, &[stream, PHASE_ACQUISITION]);
    let trace = train_ce(
        &mut model,
        data,
        cfg.acquisition_epochs,
        cfg.acquisition_smoothing(),
        cfg,
        &mut rng,
    )?;
    Ok((model, trace))
}

/// Local acquisition from the run's shared initial network.
pub fn local_acquisition(data: &DomainDataset, cfg: &TrainingConfig) -> Result<ModelHandle> {
    let init = initial_model(data.image_shape(), data.num_classes(), cfg)?;
    Ok(local_acquisition_from(&init, data, cfg, 0)?.0)
}

/// Mean losses over one round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLosses {
    pub l_al: f64,
    pub l_ar: f64,
}

/// One round of calibration starting from `fused`. The projection head is
/// trained alongside and stays with the caller.
pub fn calibration_round(
    data: &DomainDataset,
    fused: &ParameterTree<f32>,
    frozen_local: &ModelHandle,
    proj: &mut ProjectionHead<f32>,
    cfg: &TrainingConfig,
    rng: &mut Rng,
) -> Result<(ParameterTree<f32>, RoundLosses)> {
    let mut model = frozen_local.clone();
    model.import_parameters(fused)?;
    let settings = cfg.calibration_settings();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut proj_opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut sums = RoundLosses::default();
    let mut steps = 0usize;
    for _ in 0..cfg.calibration_epochs_per_round {
        for idx in epoch_batches(data.len(), cfg.batch_size, rng) {
            let (x, y) = batch_of(data, &idx);
            let out = calibration_objective(&model, frozen_local, proj, &x, &y, &settings)?;
            opt.step(model.params_mut(), &out.model_grads);
            if settings.aligns() {
                proj_opt.step(proj.params_mut(), &out.proj_grads);
            }
            sums.l_al += out.l_al;
            sums.l_ar += out.l_ar;
            steps += 1;
        }
    }
    if steps > 0 {
        sums.l_al /= steps as f64;
        sums.l_ar /= steps as f64;
    }
    Ok((model.export_parameters(), sums))
}

/// Fraction of correct argmax predictions.
pub fn evaluate(model: &ModelHandle, ds: &DomainDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset(ds.domain_id().to_string()));
    }
    let pred = model.predict(ds.images())?;
    let correct = pred.iter().zip(ds.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy from raw logits rows; used where a model is not at hand.
pub fn accuracy_from_logits(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let c = logits.row_len();
    let correct = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// What a client sends back after local work.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub params: ParameterTree<f32>,
    pub losses: RoundLosses,
    pub num_samples: usize,
}

/// A data silo holding one source domain.
pub struct Client {
    index: usize,
    domain: Domain,
    audit: AccessAudit,
    frozen: Option<ModelHandle>,
    proj: Option<ProjectionHead<f32>>,
}

impl Client {
    pub fn new(index: usize, domain: Domain, audit: AccessAudit) -> Self {
        audit.register_client(&domain.id);
        Client {
            index,
            domain,
            audit,
            frozen: None,
            proj: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.domain.id
    }

    pub fn num_samples(&self) -> usize {
        self.domain.train.len()
    }

    fn data(&self, split: Split) -> &DomainDataset {
        self.audit.record(self.id(), self.id(), split);
        match split {
            Split::Train => &self.domain.train,
            Split::Test => &self.domain.test,
        }
    }

    /// Local training from `init`; keeps the trained network as the frozen
    /// local model. `smoothing` overrides the configured acquisition smoothing.
    pub fn acquire(&mut self, init: &ModelHandle, cfg: &TrainingConfig, smoothing: f64) -> Result<ClientUpdate> {
        let mut model = init.clone();
        let mut rng = rng_from(cfg.seed, &[self.index as u64, PHASE_ACQUISITION]);
        let trace = train_ce(
            &mut model,
            self.data(Split::Train),
            cfg.acquisition_epochs,
            smoothing,
            cfg,
            &mut rng,
        )?;
        let update = ClientUpdate {
            params: model.export_parameters(),
            losses: RoundLosses {
                l_al: 0.0,
                l_ar: trace.last().copied().unwrap_or(f64::NAN),
            },
            num_samples: self.num_samples(),
        };
        self.frozen = Some(model);
        Ok(update)
    }

    fn round_rng(&self, cfg: &TrainingConfig, round: usize) -> Rng {
        rng_from(cfg.seed, &[self.index as u64, PHASE_ROUND, round as u64])
    }

    fn frozen(&self) -> Result<&ModelHandle> {
        self.frozen
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("client `{}` has not run acquisition", self.id())))
    }

    /// Calibrate the broadcast model against the frozen local model.
    pub fn calibrate(
        &mut self,
        global: &ParameterTree<f32>,
        cfg: &TrainingConfig,
        round: usize,
    ) -> Result<ClientUpdate> {
        let frozen = self.frozen()?.clone();
        if self.proj.is_none() {
            let seed = derive_seed(cfg.seed, &[self.index as u64, PHASE_PROJECTION]);
            self.proj = Some(build_projection(&frozen.tap_shapes(), seed)?);
        }
        let mut rng = self.round_rng(cfg, round);
        let mut proj = self.proj.take().expect("created above");
        let res = calibration_round(self.data(Split::Train), global, &frozen, &mut proj, cfg, &mut rng);
        self.proj = Some(proj);
        let (params, losses) = res?;
        if cfg.refresh_local_each_round {
            let mut refreshed = frozen;
            refreshed.import_parameters(&params)?;
            self.frozen = Some(refreshed);
        }
        Ok(ClientUpdate {
            params,
            losses,
            num_samples: self.num_samples(),
        })
    }

    /// Plain cross-entropy fine-tuning of the broadcast model.
    pub fn local_train(
        &mut self,
        global: &ParameterTree<f32>,
        cfg: &TrainingConfig,
        round: usize,
    ) -> Result<ClientUpdate> {
        let mut model = self.frozen()?.clone();
        model.import_parameters(global)?;
        let mut rng = self.round_rng(cfg, round);
        let trace = train_ce(
            &mut model,
            self.data(Split::Train),
            cfg.calibration_epochs_per_round,
            0.0,
            cfg,
            &mut rng,
        )?;
        let mean = if trace.is_empty() {
            0.0
        } else {
            trace.iter().sum::<f64>() / trace.len() as f64
        };
        Ok(ClientUpdate {
            params: model.export_parameters(),
            losses: RoundLosses { l_al: 0.0, l_ar: mean },
            num_samples: self.num_samples(),
        })
    }

    /// Accuracy of a broadcast model on this client's test split.
    pub fn evaluate(&self, params: &ParameterTree<f32>) -> Result<f64> {
        let mut model = self.frozen()?.clone();
        model.import_parameters(params)?;
        evaluate(&model, self.data(Split::Test))
    }

    /// The frozen local snapshot, for inspection.
    pub fn frozen_local(&self) -> Option<&ModelHandle> {
        self.frozen.as_ref()
    }

    pub fn projection(&self) -> Option<&ProjectionHead<f32>> {
        self.proj.as_ref()
    }
}
