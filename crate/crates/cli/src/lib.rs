//! Experiment front end: dataset preparation, federated runs, ablations and
//! the parameter-distance study, each writing result files under `out`.

mod spec;

use std::fs;
use std::path::{Path, PathBuf};

use csac::aggregation::write_fusion_csv;
use csac::analysis::{
    ablation_sweep, mean_stderr, parameter_distance_study, write_ablation_csv, Ablation, AblationRow, AccuracySummary,
    DistanceStudyReport,
};
use csac::datasets::{
    leave_one_domain_out, load_domain, load_mnist, rotated_mnist, save_domain, synthetic_domains_with, Domain,
    DomainManifest, DomainSplit, Split, SyntheticConfig,
};
use csac::federation::{run_method, RoundLog};
use csac::models::save_checkpoint;
use csac::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use spec::{parse_seeds, DatasetSpec, ExperimentSpec, Overrides, StudySpec};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(io_err(path))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(io_err(path))
}

/// Content hash of a dataset spec; names the prepared directory.
pub fn data_hash(dataset: &DatasetSpec) -> String {
    let bytes = serde_json::to_vec(dataset).expect("dataset spec serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedDataset {
    pub dataset: DatasetSpec,
    pub data_hash: String,
    pub domains: Vec<DomainManifest>,
}

/// Directory the dataset of `spec` is materialized into.
pub fn dataset_dir(spec: &ExperimentSpec) -> PathBuf {
    spec.data_root()
        .join("prepared")
        .join(format!("{}-{}", spec.dataset.kind(), data_hash(&spec.dataset)))
}

fn read_prepared(dir: &Path) -> Option<PreparedDataset> {
    let bytes = fs::read(dir.join("dataset.json")).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn is_complete(dir: &Path, spec: &DatasetSpec) -> bool {
    let Some(p) = read_prepared(dir) else {
        return false;
    };
    &p.dataset == spec
        && p.domains.iter().all(|m| {
            fs::read(dir.join(&m.domain_id).join("manifest.json"))
                .ok()
                .and_then(|b| serde_json::from_slice::<DomainManifest>(&b).ok())
                .is_some_and(|on_disk| &on_disk == m)
        })
}

fn generate(spec: &ExperimentSpec) -> Result<Vec<Domain>> {
    match &spec.dataset {
        DatasetSpec::RotatedMnist {
            per_class,
            angles,
            seed,
            source,
        } => {
            let src = source.clone().unwrap_or_else(|| spec.data_root().join("mnist"));
            let train = load_mnist(&src, Split::Train)?;
            let test = load_mnist(&src, Split::Test)?;
            rotated_mnist(&train, &test, angles, *per_class, *seed)
        }
        DatasetSpec::Synthetic {
            domains,
            classes,
            shift,
            seed,
            side,
            train_per_class,
            test_per_class,
            noise,
        } => {
            let cfg = SyntheticConfig {
                side: *side,
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
                noise: *noise,
            };
            synthetic_domains_with(&cfg, *seed, *domains, *classes, *shift)
        }
    }
}

/// Materialize every domain of the spec's dataset. A second call with the
/// same dataset spec leaves the directory untouched.
pub fn cmd_prepare_data(spec: &ExperimentSpec) -> Result<PathBuf> {
    let dir = dataset_dir(spec);
    if is_complete(&dir, &spec.dataset) {
        log::info!("dataset already prepared at {}", dir.display());
        return Ok(dir);
    }
    let domains = generate(spec)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let manifests = domains
        .iter()
        .map(|d| save_domain(&dir.join(&d.id), d))
        .collect::<Result<Vec<_>>>()?;
    let prepared = PreparedDataset {
        dataset: spec.dataset.clone(),
        data_hash: data_hash(&spec.dataset),
        domains: manifests,
    };
    write_json(&dir.join("dataset.json"), &prepared)?;
    log::info!("prepared {} domains at {}", domains.len(), dir.display());
    Ok(dir)
}

/// Load the prepared domains, preparing them first if needed.
pub fn load_domains(spec: &ExperimentSpec) -> Result<Vec<Domain>> {
    let dir = cmd_prepare_data(spec)?;
    let prepared = read_prepared(&dir).ok_or_else(|| Error::Format {
        path: dir.join("dataset.json"),
        reason: "unreadable dataset index".into(),
    })?;
    prepared
        .domains
        .iter()
        .map(|m| load_domain(&dir.join(&m.domain_id)))
        .collect()
}

fn load_split(spec: &ExperimentSpec) -> Result<DomainSplit> {
    leave_one_domain_out(&load_domains(spec)?, &spec.target)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResults {
    pub spec: ExperimentSpec,
    pub data_hash: String,
    #[serde(flatten)]
    pub summary: AccuracySummary,
}

/// Output directory of one `run` invocation.
pub fn run_dir(spec: &ExperimentSpec) -> PathBuf {
    spec.out.join(format!("{}_{}", spec.method.name(), spec.target))
}

fn write_rounds_csv(path: &Path, runs: &[(u64, Vec<RoundLog>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record([
        "seed",
        "round",
        "target_pre",
        "target_post",
        "domain",
        "l_al",
        "l_ar",
        "source_acc",
    ])?;
    for (seed, logs) in runs {
        for log in logs {
            let head = [
                seed.to_string(),
                log.round.to_string(),
                log.target_pre.to_string(),
                log.target_post.to_string(),
            ];
            let src = |d: &str| {
                log.source_acc
                    .iter()
                    .find(|(id, _)| id == d)
                    .map_or(String::new(), |(_, a)| a.to_string())
            };
            if log.clients.is_empty() {
                let mut row = head.to_vec();
                row.extend(["".into(), "".into(), "".into(), "".into()]);
                w.write_record(&row)?;
            }
            for c in &log.clients {
                let mut row = head.to_vec();
                row.extend([c.domain.clone(), c.l_al.to_string(), c.l_ar.to_string(), src(&c.domain)]);
                w.write_record(&row)?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

/// Run the configured method once per seed and summarize the final target
/// accuracies.
pub fn cmd_run(spec: &ExperimentSpec) -> Result<RunResults> {
    spec.validate()?;
    let split = load_split(spec)?;
    let dir = run_dir(spec);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut accuracies = Vec::new();
    let mut runs = Vec::new();
    for &seed in &spec.seeds {
        let cfg = spec.training_for(seed);
        log::info!("{} target={} seed={seed}", spec.method.name(), spec.target);
        let (model, logs) = run_method(spec.method, &split, &cfg)?;
        let acc = logs.last().map_or(f64::NAN, |l| l.target_post);
        log::info!("seed {seed}: target accuracy {acc:.4}");
        accuracies.push(acc);
        let fused: Vec<_> = logs
            .iter()
            .filter_map(|l| l.fusion.as_ref().map(|f| (l.round, f)))
            .collect();
        if !fused.is_empty() {
            let p = dir.join(format!("fusion_seed{seed}.csv"));
            write_fusion_csv(create_file(&p)?, &fused)?;
        }
        if spec.save_checkpoints {
            save_checkpoint(&dir.join(format!("checkpoint_seed{seed}")), &model)?;
        }
        runs.push((seed, logs));
    }
    write_rounds_csv(&dir.join("rounds.csv"), &runs)?;
    let results = RunResults {
        spec: spec.clone(),
        data_hash: data_hash(&spec.dataset),
        summary: AccuracySummary::new(spec.method, &spec.target, spec.seeds.clone(), accuracies),
    };
    write_json(&dir.join("results.json"), &results)?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub setting: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    pub finite: bool,
}

/// Parse every switch before any training starts.
pub fn parse_axes(axes: &[String]) -> Result<Vec<Ablation>> {
    axes.iter().map(|a| Ablation::parse(a)).collect()
}

/// One CSAC run per ablation switch and seed; `ablation.csv` holds one row
/// per setting.
pub fn cmd_ablate(spec: &ExperimentSpec, axes: &[String]) -> Result<Vec<AblationSummary>> {
    spec.validate()?;
    let parsed = parse_axes(axes)?;
    let split = load_split(spec)?;
    let mut per_seed: Vec<Vec<AblationRow>> = Vec::new();
    for &seed in &spec.seeds {
        per_seed.push(ablation_sweep(&split, &spec.training_for(seed), &parsed)?);
    }
    let summaries: Vec<AblationSummary> = (0..per_seed[0].len())
        .map(|i| {
            let accuracies: Vec<f64> = per_seed.iter().map(|rows| rows[i].accuracy).collect();
            let (mean, stderr) = mean_stderr(&accuracies);
            AblationSummary {
                setting: per_seed[0][i].setting.clone(),
                finite: per_seed.iter().all(|rows| rows[i].finite) && accuracies.iter().all(|a| a.is_finite()),
                accuracies,
                mean,
                stderr,
            }
        })
        .collect();
    let dir = spec.out.join(format!("ablation_{}", spec.target));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let p = dir.join("ablation.csv");
    let mut w = csv::Writer::from_writer(create_file(&p)?);
    w.write_record(["setting", "mean", "stderr", "finite"])?;
    for s in &summaries {
        w.write_record([
            s.setting.clone(),
            s.mean.to_string(),
            s.stderr.to_string(),
            s.finite.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&p))?;
    for (seed, rows) in spec.seeds.iter().zip(&per_seed) {
        write_ablation_csv(create_file(&dir.join(format!("ablation_seed{seed}.csv")))?, rows)?;
    }
    write_json(
        &dir.join("ablation.json"),
        &serde_json::json!({
            "spec": spec,
            "data_hash": data_hash(&spec.dataset),
            "settings": summaries,
        }),
    )?;
    Ok(summaries)
}

/// Read back an `ablation.csv` written by [`cmd_ablate`].
pub fn read_ablation_csv(path: &Path) -> Result<Vec<(String, f64, f64, bool)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Parameter-distance study over all domains of the dataset, using the
/// first seed.
pub fn cmd_analyze(spec: &ExperimentSpec) -> Result<DistanceStudyReport> {
    spec.validate()?;
    let domains = load_domains(spec)?;
    let trains: Vec<_> = domains.into_iter().map(|d| d.train).collect();
    let mut cfg = spec.training_for(spec.seeds[0]);
    cfg.acquisition_epochs = spec.study.epochs;
    let report = parameter_distance_study(
        &trains,
        spec.study.models_per_domain,
        &spec.study.layers,
        &cfg,
        spec.study.init,
    )?;
    let dir = spec.out.join("analysis");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    report.write_summary_csv(create_file(&dir.join("distance_summary.csv"))?)?;
    report.write_pairs_csv(create_file(&dir.join("distance_pairs.csv"))?)?;
    write_json(&dir.join("distance_plot.json"), &report.plot_data())?;
    write_json(
        &dir.join("distance_report.json"),
        &serde_json::json!({
            "spec": spec,
            "data_hash": data_hash(&spec.dataset),
            "report": report,
        }),
    )?;
    Ok(report)
}

/// Read back `distance_summary.csv`: (layer, intra_mean, inter_mean, gap_ratio).
pub fn read_distance_summary(path: &Path) -> Result<Vec<(String, f64, f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
