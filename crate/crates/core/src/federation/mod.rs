//! Client/server orchestration: local acquisition, synchronous rounds of
//! fusion and calibration, and the FedAvg and DeepAll baselines.

mod client;
mod config;
mod optim;
mod run;

pub use client::{
    accuracy_from_logits, arch_for, calibration_round, evaluate, initial_model, local_acquisition,
    local_acquisition_from, AccessAudit, AccessRecord, Client, ClientUpdate, RoundLosses,
};
pub use config::TrainingConfig;
pub use optim::Sgd;
pub use run::{
    mean_losses, run_csac, run_csac_audited, run_deepall, run_fedavg, run_fedavg_audited, run_method, ClientRoundStats,
    Method, RoundLog, RunOutput,
};
