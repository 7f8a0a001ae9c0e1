use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{fuse_fedavg, fuse_layerwise, FusionReport};
use crate::datasets::{DomainDataset, DomainSplit, Split};
use crate::error::{Error, Result};
use crate::federation::client::{
    evaluate, initial_model, train_ce, AccessAudit, Client, ClientUpdate, RoundLosses, PHASE_CENTRAL,
};
use crate::federation::config::TrainingConfig;
use crate::models::{ModelHandle, ParameterTree};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Csac,
    Fedavg,
    Deepall,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Csac => "csac",
            Method::Fedavg => "fedavg",
            Method::Deepall => "deepall",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csac" => Ok(Method::Csac),
            "fedavg" => Ok(Method::Fedavg),
            "deepall" => Ok(Method::Deepall),
            other => Err(Error::invalid(format!(
                "unknown method `{other}` (expected csac, fedavg or deepall)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub domain: String,
    pub l_al: f64,
    pub l_ar: f64,
}

/// State after one aggregation step. Round 0 is the fusion of the acquired
/// models; round `r >= 1` follows the `r`-th calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Target accuracy of the model broadcast at the start of the round.
    pub target_pre: f64,
    /// Target accuracy of the model fused at the end of the round.
    pub target_post: f64,
    /// Accuracy of the end-of-round model on each source test split.
    pub source_acc: Vec<(String, f64)>,
    pub clients: Vec<ClientRoundStats>,
    pub fusion: Option<FusionReport>,
}

/// A finished run with its audit trail.
pub struct RunOutput {
    pub model: ModelHandle,
    pub logs: Vec<RoundLog>,
    pub audit: AccessAudit,
}

fn for_clients<R: Send>(
    clients: &mut [Client],
    parallel: bool,
    f: impl Fn(&mut Client) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    if parallel {
        clients.par_iter_mut().map(f).collect()
    } else {
        clients.iter_mut().map(f).collect()
    }
}

struct Federation {
    clients: Vec<Client>,
    template: ModelHandle,
    target: DomainDataset,
    target_id: String,
    audit: AccessAudit,
    cfg: TrainingConfig,
}

impl Federation {
    fn new(split: &DomainSplit, cfg: &TrainingConfig, min_sources: usize) -> Result<Self> {
        cfg.validate()?;
        if split.sources.len() < min_sources {
            return Err(Error::invalid(format!(
                "need at least {min_sources} source domains, got {}",
                split.sources.len()
            )));
        }
        let audit = AccessAudit::new();
        let clients = split
            .sources
            .iter()
            .enumerate()
            .map(|(i, d)| Client::new(i, d.clone(), audit.clone()))
            .collect();
        Ok(Federation {
            clients,
            template: initial_model(split.image_shape(), split.num_classes(), cfg)?,
            target: split.target.test.clone(),
            target_id: split.target.id.clone(),
            audit,
            cfg: cfg.clone(),
        })
    }

    fn domains(&self) -> Vec<String> {
        self.clients.iter().map(|c| c.id().to_string()).collect()
    }

    fn model_of(&self, params: &ParameterTree<f32>) -> Result<ModelHandle> {
        let mut m = self.template.clone();
        m.import_parameters(params)?;
        Ok(m)
    }

    fn target_accuracy(&self, params: &ParameterTree<f32>) -> Result<f64> {
        self.audit.record("server", &self.target_id, Split::Test);
        evaluate(&self.model_of(params)?, &self.target)
    }

    fn source_accuracy(&mut self, params: &ParameterTree<f32>) -> Result<Vec<(String, f64)>> {
        if !self.cfg.eval_sources {
            return Ok(Vec::new());
        }
        let acc = for_clients(&mut self.clients, self.cfg.parallel_clients, |c| c.evaluate(params))?;
        Ok(self.domains().into_iter().zip(acc).collect())
    }

    fn stats(&self, updates: &[ClientUpdate]) -> Vec<ClientRoundStats> {
        self.clients
            .iter()
            .zip(updates)
            .map(|(c, u)| ClientRoundStats {
                domain: c.id().to_string(),
                l_al: u.losses.l_al,
                l_ar: u.losses.l_ar,
            })
            .collect()
    }

    fn acquire(&mut self, smoothing: f64) -> Result<Vec<ClientUpdate>> {
        let init = self.template.clone();
        let cfg = self.cfg.clone();
        for_clients(&mut self.clients, cfg.parallel_clients, |c| {
            c.acquire(&init, &cfg, smoothing)
        })
    }

    fn log(
        &mut self,
        round: usize,
        pre: Option<f64>,
        params: &ParameterTree<f32>,
        updates: &[ClientUpdate],
        fusion: Option<FusionReport>,
    ) -> Result<RoundLog> {
        let post = self.target_accuracy(params)?;
        let source_acc = self.source_accuracy(params)?;
        let log = RoundLog {
            round,
            target_pre: pre.unwrap_or(post),
            target_post: post,
            source_acc,
            clients: self.stats(updates),
            fusion,
        };
        log::info!("round {round}: target {:.4} -> {:.4}", log.target_pre, log.target_post);
        Ok(log)
    }

    fn finish(self, params: &ParameterTree<f32>, logs: Vec<RoundLog>) -> Result<RunOutput> {
        Ok(RunOutput {
            model: self.model_of(params)?,
            logs,
            audit: self.audit,
        })
    }
}

fn fuse_csac(fed: &Federation, updates: &[ClientUpdate]) -> Result<(ParameterTree<f32>, FusionReport)> {
    let trees: Vec<_> = updates.iter().map(|u| u.params.clone()).collect();
    let (fused, report) = fuse_layerwise(&trees, fed.cfg.fusion, fed.cfg.metric)?;
    Ok((fused, report.with_domains(&fed.domains())))
}

fn fuse_sizes(updates: &[ClientUpdate]) -> Result<ParameterTree<f32>> {
    let trees: Vec<_> = updates.iter().map(|u| u.params.clone()).collect();
    let sizes: Vec<_> = updates.iter().map(|u| u.num_samples).collect();
    fuse_fedavg(&trees, &sizes)
}

/// Acquisition, then `rounds` of broadcast, calibration and layer-wise fusion.
pub fn run_csac_audited(split: &DomainSplit, cfg: &TrainingConfig) -> Result<RunOutput> {
    let mut fed = Federation::new(split, cfg, 2)?;
    let updates = fed.acquire(cfg.acquisition_smoothing())?;
    let (mut global, report) = fuse_csac(&fed, &updates)?;
    let mut logs = vec![fed.log(0, None, &global, &updates, Some(report))?];
    for round in 1..=cfg.rounds {
        let pre = logs.last().map(|l| l.target_post);
        let g = global.clone();
        let c = cfg.clone();
        let updates = for_clients(&mut fed.clients, cfg.parallel_clients, |cl| cl.calibrate(&g, &c, round))?;
        let (fused, report) = fuse_csac(&fed, &updates)?;
        global = fused;
        logs.push(fed.log(round, pre, &global, &updates, Some(report))?);
    }
    fed.finish(&global, logs)
}

pub fn run_csac(split: &DomainSplit, cfg: &TrainingConfig) -> Result<(ModelHandle, Vec<RoundLog>)> {
    let out = run_csac_audited(split, cfg)?;
    Ok((out.model, out.logs))
}

/// Same schedule with plain cross-entropy local training and data-size
/// weighted averaging.
pub fn run_fedavg_audited(split: &DomainSplit, cfg: &TrainingConfig) -> Result<RunOutput> {
    let mut fed = Federation::new(split, cfg, 1)?;
    let updates = fed.acquire(0.0)?;
    let mut global = fuse_sizes(&updates)?;
    let mut logs = vec![fed.log(0, None, &global, &updates, None)?];
    for round in 1..=cfg.rounds {
        let pre = logs.last().map(|l| l.target_post);
        let g = global.clone();
        let c = cfg.clone();
        let updates = for_clients(&mut fed.clients, cfg.parallel_clients, |cl| {
            cl.local_train(&g, &c, round)
        })?;
        global = fuse_sizes(&updates)?;
        logs.push(fed.log(round, pre, &global, &updates, None)?);
    }
    fed.finish(&global, logs)
}

pub fn run_fedavg(split: &DomainSplit, cfg: &TrainingConfig) -> Result<(ModelHandle, Vec<RoundLog>)> {
    let out = run_fedavg_audited(split, cfg)?;
    Ok((out.model, out.logs))
}

/// Centralized training on the pooled source data for the same number of
/// epochs, logged at the same points of the schedule.
pub fn run_deepall(split: &DomainSplit, cfg: &TrainingConfig) -> Result<(ModelHandle, Vec<RoundLog>)> {
    cfg.validate()?;
    if split.sources.is_empty() {
        return Err(Error::invalid("need at least one source domain"));
    }
    let parts: Vec<&DomainDataset> = split.sources.iter().map(|d| &d.train).collect();
    let pooled = DomainDataset::concat("pooled", &parts, Split::Train)?;
    let mut model = initial_model(split.image_shape(), split.num_classes(), cfg)?;
    let mut rng = rng_from(cfg.seed, &[0, PHASE_CENTRAL]);
    let mut logs = Vec::with_capacity(cfg.rounds + 1);
    let mut prev = None;
    for round in 0..=cfg.rounds {
        let epochs = if round == 0 {
            cfg.acquisition_epochs
        } else {
            cfg.calibration_epochs_per_round
        };
        let trace = train_ce(&mut model, &pooled, epochs, 0.0, cfg, &mut rng)?;
        let post = evaluate(&model, &split.target.test)?;
        let source_acc = if cfg.eval_sources {
            split
                .sources
                .iter()
                .map(|d| Ok((d.id.clone(), evaluate(&model, &d.test)?)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        logs.push(RoundLog {
            round,
            target_pre: prev.unwrap_or(post),
            target_post: post,
            source_acc,
            clients: vec![ClientRoundStats {
                domain: "pooled".into(),
                l_al: 0.0,
                l_ar: trace.last().copied().unwrap_or(0.0),
            }],
            fusion: None,
        });
        prev = Some(post);
    }
    Ok((model, logs))
}

pub fn run_method(method: Method, split: &DomainSplit, cfg: &TrainingConfig) -> Result<(ModelHandle, Vec<RoundLog>)> {
    match method {
        Method::Csac => run_csac(split, cfg),
        Method::Fedavg => run_fedavg(split, cfg),
        Method::Deepall => run_deepall(split, cfg),
    }
}

/// Mean calibration losses over clients of one log entry.
pub fn mean_losses(log: &RoundLog) -> RoundLosses {
    let n = log.clients.len().max(1) as f64;
    RoundLosses {
        l_al: log.clients.iter().map(|c| c.l_al).sum::<f64>() / n,
        l_ar: log.clients.iter().map(|c| c.l_ar).sum::<f64>() / n,
    }
}
