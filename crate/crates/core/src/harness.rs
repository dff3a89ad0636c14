//! Experiment runner: dataset, partition and workload preparation, method
//! matrices, metrics and result files.
//!
//! An experiment directory holds
//!
//! - `config.json`: the resolved config, with its hash
//! - `results.csv`: one [`RunResult`] row per (method, ε, repeat)
//! - `long.csv`: the same metrics in long format (`run, method, epsilon, repeat, metric, value`)
//! - `runs/<run>/log.jsonl`, `ledger.json`, `comms.csv`: per-run protocol log,
//!   privacy ledger and communication ledger

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aim::{aim_run, AimConfig, ScoreScale};
use crate::datasets::{
    adult_surrogate, holdout_split, synthfs, SynthFsConfig, ADULT_ROWS, HOLDOUT_FRACTION,
};
use crate::domain::{workload_error, DiscreteDataset, ErrorMode};
use crate::dp::LedgerFile;
use crate::error::{Error, Result};
use crate::federated::{distaim_run, flaim_run, FederatedConfig, FlaimVariant};
use crate::model::ModelState;
use crate::partition::{
    partition_cluster_skew, partition_iid, partition_label_skew, ClientPartition,
};
use crate::rng::{stream, Purpose, SERVER};
use crate::schema::{load_domain, read_dataset_csv};
use crate::secagg::CommsLedger;
use crate::workload::{random_workload, Workload};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_NLL_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Generated per run; `seed` pins the data across repeats.
    Synthfs {
        #[serde(flatten)]
        config: SynthFsConfig,
        #[serde(default)]
        seed: Option<u64>,
    },
    AdultSurrogate {
        #[serde(default = "adult_rows")]
        rows: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// A prepared (discretised) dataset and its domain file.
    Csv { data: PathBuf, domain: PathBuf },
}

fn adult_rows() -> usize {
    ADULT_ROWS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartitionSpec {
    /// The generator's own clients (SynthFS only).
    Natural,
    Iid {
        clients: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    LabelSkew {
        clients: usize,
        beta: f64,
        /// Defaults to the last attribute.
        #[serde(default)]
        class_attr: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
    },
    Cluster {
        clients: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// One client id per training row.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "default_arity")]
    pub arity: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_arity() -> usize {
    3
}
fn default_size() -> usize {
    64
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            arity: default_arity(),
            size: default_size(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Aim,
    Distaim,
    FlaimNaive,
    FlaimOracle,
    FlaimPrivate,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Aim,
        Method::Distaim,
        Method::FlaimNaive,
        Method::FlaimOracle,
        Method::FlaimPrivate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Aim => "aim",
            Method::Distaim => "distaim",
            Method::FlaimNaive => "flaim-naive",
            Method::FlaimOracle => "flaim-oracle",
            Method::FlaimPrivate => "flaim-private",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_repeats() -> usize {
    1
}
fn default_sample_rate() -> f64 {
    0.1
}
fn default_floor() -> f64 {
    DEFAULT_NLL_FLOOR
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    pub epsilons: Vec<f64>,
    #[serde(default = "crate::aim::default_delta")]
    pub delta: f64,
    /// Fixed number of global rounds; omitted means budget annealing.
    #[serde(default)]
    pub rounds: Option<usize>,
    #[serde(default = "local_rounds")]
    pub local_rounds: usize,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "crate::aim::default_max_model_bytes")]
    pub max_model_bytes: u64,
    #[serde(default = "crate::aim::default_r")]
    pub r: f64,
    #[serde(default = "crate::aim::default_train_iterations")]
    pub train_iterations: usize,
    #[serde(default = "crate::aim::default_final_iterations")]
    pub final_iterations: usize,
    #[serde(default)]
    pub score_scale: ScoreScale,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Repeat i uses seed + i.
    pub seed: u64,
    #[serde(default = "default_floor")]
    pub nll_floor: f64,
    /// Also compute NLL from a sampled synthetic dataset of |D| rows.
    #[serde(default = "yes")]
    pub sample_metrics: bool,
    /// Record the workload error after every round in the protocol log.
    #[serde(default)]
    pub track_error: bool,
}

fn local_rounds() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.methods.is_empty() || self.epsilons.is_empty() {
            return bad("methods and epsilons must be non-empty".into());
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return bad(format!("epsilon {e} is not a positive finite number"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad(format!(
                "sample_rate must be in (0, 1], got {}",
                self.sample_rate
            ));
        }
        if self.rounds == Some(0) || self.local_rounds == 0 {
            return bad("rounds and local_rounds must be at least 1".into());
        }
        if !(self.nll_floor > 0.0 && self.nll_floor < 1.0) {
            return bad(format!(
                "nll_floor must be in (0, 1), got {}",
                self.nll_floor
            ));
        }
        if matches!(self.partition, PartitionSpec::Natural)
            && !matches!(self.dataset, DatasetSpec::Synthfs { .. })
        {
            return bad("the natural partition only exists for synthfs datasets".into());
        }
        if let DatasetSpec::Csv { data, domain } = &self.dataset {
            for p in [data, domain] {
                if !p.exists() {
                    return bad(format!("dataset file {} does not exist", p.display()));
                }
            }
        }
        if let PartitionSpec::File { path } = &self.partition {
            if !path.exists() {
                return bad(format!("partition file {} does not exist", path.display()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }
}

/// Everything one repeat shares across methods and budgets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: DiscreteDataset,
    pub holdout: DiscreteDataset,
    pub clients: Vec<DiscreteDataset>,
    pub workload: Workload,
}

/// Builds data, holdout, partition and workload for one repeat.
pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let (train, holdout, natural) = match &config.dataset {
        DatasetSpec::Synthfs { config: c, seed: s } => {
            let fd = synthfs(c, s.unwrap_or(seed))?;
            (fd.train, fd.holdout, Some(fd.partition))
        }
        DatasetSpec::AdultSurrogate { rows, seed: s } => {
            let data = adult_surrogate(*rows, s.unwrap_or(seed));
            let (tr, ho) = holdout_split(&data, HOLDOUT_FRACTION, s.unwrap_or(seed));
            (data.subset(&tr), data.subset(&ho), None)
        }
        DatasetSpec::Csv { data, domain } => {
            let domain = load_domain(domain)?;
            let all = read_dataset_csv(data, &domain)?;
            let (tr, ho) = holdout_split(&all, HOLDOUT_FRACTION, seed);
            (all.subset(&tr), all.subset(&ho), None)
        }
    };
    let partition = build_partition(&config.partition, &train, natural, seed)?;
    let clients = partition.split(&train)?;
    let w = &config.workload;
    let workload = random_workload(train.domain(), w.arity, w.size, w.seed.unwrap_or(seed))?;
    Ok(Prepared {
        train,
        holdout,
        clients,
        workload,
    })
}

pub fn build_partition(
    spec: &PartitionSpec,
    train: &DiscreteDataset,
    natural: Option<ClientPartition>,
    seed: u64,
) -> Result<ClientPartition> {
    match spec {
        PartitionSpec::Natural => {
            natural.ok_or_else(|| Error::Config("dataset has no natural partition".into()))
        }
        PartitionSpec::Iid { clients, seed: s } => {
            partition_iid(train.len(), *clients, s.unwrap_or(seed))
        }
        PartitionSpec::LabelSkew {
            clients,
            beta,
            class_attr,
            seed: s,
        } => {
            let class = class_attr.unwrap_or(train.domain().len() - 1);
            partition_label_skew(train, *clients, class, *beta, s.unwrap_or(seed))
        }
        PartitionSpec::Cluster { clients, seed: s } => {
            partition_cluster_skew(train, *clients, s.unwrap_or(seed))
        }
        PartitionSpec::File { path } => ClientPartition::read(path, None),
    }
}

/// Raw outputs of one method run.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub model: ModelState,
    /// Protocol log, one JSON value per round.
    pub log: Vec<serde_json::Value>,
    pub ledger: LedgerFile,
    pub comms: CommsLedger,
}

fn federated_config(
    config: &ExperimentConfig,
    epsilon: f64,
    seed: u64,
    variant: FlaimVariant,
) -> FederatedConfig {
    let mut fc = FederatedConfig::new(epsilon, config.sample_rate, seed);
    fc.delta = config.delta;
    fc.rounds = config.rounds;
    fc.local_rounds = config.local_rounds;
    fc.r = config.r;
    fc.max_model_bytes = config.max_model_bytes;
    fc.train_iterations = config.train_iterations;
    fc.final_iterations = config.final_iterations;
    fc.score_scale = config.score_scale;
    fc.variant = variant;
    fc.track_error = config.track_error;
    fc
}

fn to_values<T: Serialize>(items: &[T]) -> Result<Vec<serde_json::Value>> {
    items
        .iter()
        .map(|i| serde_json::to_value(i).map_err(Error::from))
        .collect()
}

pub fn run_method(
    method: Method,
    epsilon: f64,
    prepared: &Prepared,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<MethodOutput> {
    let w = &prepared.workload;
    let fed = |out: crate::federated::FedOutput| -> Result<MethodOutput> {
        Ok(MethodOutput {
            log: to_values(&out.log)?,
            model: out.model,
            ledger: out.ledger,
            comms: out.comms,
        })
    };
    match method {
        Method::Aim => {
            let mut ac = AimConfig::new(epsilon, seed);
            ac.delta = config.delta;
            ac.rounds = config.rounds;
            ac.r = config.r;
            ac.max_model_bytes = config.max_model_bytes;
            ac.train_iterations = config.train_iterations;
            ac.final_iterations = config.final_iterations;
            ac.track_error = config.track_error;
            let out = aim_run(&prepared.train, w, &ac)?;
            Ok(MethodOutput {
                log: to_values(&out.log)?,
                model: out.model,
                ledger: out.ledger,
                comms: CommsLedger::new(),
            })
        }
        Method::Distaim => {
            let fc = federated_config(config, epsilon, seed, FlaimVariant::Naive);
            fed(distaim_run(&prepared.clients, w, &fc)?)
        }
        Method::FlaimNaive | Method::FlaimOracle | Method::FlaimPrivate => {
            let variant = match method {
                Method::FlaimNaive => FlaimVariant::Naive,
                Method::FlaimOracle => FlaimVariant::Oracle,
                _ => FlaimVariant::Private,
            };
            let fc = federated_config(config, epsilon, seed, variant);
            fed(flaim_run(&prepared.clients, w, &fc)?)
        }
    }
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub run: String,
    pub method: Method,
    pub epsilon: f64,
    pub repeat: usize,
    pub seed: u64,
    /// Mean L1 between normalised true and model marginals over the workload.
    pub error: Option<f64>,
    /// Same, on counts.
    pub error_raw: Option<f64>,
    /// Model NLL of the holdout set.
    pub nll: Option<f64>,
    /// NLL of the holdout under the empirical distribution of a synthetic sample.
    pub nll_sample: Option<f64>,
    pub rho_used: Option<f64>,
    pub rho_total: Option<f64>,
    pub rounds: Option<usize>,
    pub measurements: Option<usize>,
    /// Mean total bytes (sent + received) over clients that communicated.
    pub client_bytes_mean: Option<f64>,
    pub client_bytes_max: Option<u64>,
    pub total_bytes: Option<u64>,
    pub wall_ms: u64,
    pub status: String,
}

impl RunResult {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Metric columns that must be identical when a run is repeated.
pub fn metric_fields(r: &RunResult) -> Vec<(&'static str, Option<f64>)> {
    vec![
        ("error", r.error),
        ("error_raw", r.error_raw),
        ("nll", r.nll),
        ("nll_sample", r.nll_sample),
        ("rho_used", r.rho_used),
        ("rho_total", r.rho_total),
        ("rounds", r.rounds.map(|v| v as f64)),
        ("measurements", r.measurements.map(|v| v as f64)),
        ("client_bytes_mean", r.client_bytes_mean),
        ("client_bytes_max", r.client_bytes_max.map(|v| v as f64)),
        ("total_bytes", r.total_bytes.map(|v| v as f64)),
    ]
}

pub fn run_id(method: Method, epsilon: f64, repeat: usize) -> String {
    format!("{}-eps{}-r{}", method.name(), epsilon, repeat)
}

/// Computes metrics for a finished run.
pub fn evaluate(
    output: &MethodOutput,
    prepared: &Prepared,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Metrics> {
    let q = prepared.workload.queries();
    let model = &output.model;
    let error = workload_error(&prepared.train, model, q, ErrorMode::Normalized)?;
    let error_raw = workload_error(&prepared.train, model, q, ErrorMode::Raw)?;
    let nll = model.nll(&prepared.holdout, config.nll_floor)?;
    let nll_sample = if config.sample_metrics {
        let mut rng = stream(seed, 0, SERVER, Purpose::Synthesize);
        let synth = model.sample(prepared.train.len(), &mut rng);
        Some(
            model
                .empirical_like(&synth)?
                .nll(&prepared.holdout, config.nll_floor)?,
        )
    } else {
        None
    };
    let comms = &output.comms;
    let per_client: Vec<u64> = comms
        .records()
        .iter()
        .fold(std::collections::BTreeMap::new(), |mut m, r| {
            *m.entry(r.client).or_insert(0u64) += r.bytes_sent + r.bytes_received;
            m
        })
        .into_values()
        .collect();
    let client_bytes_mean = if per_client.is_empty() {
        0.0
    } else {
        per_client.iter().sum::<u64>() as f64 / per_client.len() as f64
    };
    let rounds = output
        .log
        .iter()
        .filter_map(|v| v.get("round").and_then(|r| r.as_u64()))
        .filter(|&r| r > 0)
        .count();
    Ok(Metrics {
        error,
        error_raw,
        nll,
        nll_sample,
        rho_used: output.ledger.rho_used,
        rho_total: output.ledger.rho_total,
        rounds,
        client_bytes_mean,
        client_bytes_max: per_client.iter().copied().max().unwrap_or(0),
        total_bytes: comms.total(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub error: f64,
    pub error_raw: f64,
    pub nll: f64,
    pub nll_sample: Option<f64>,
    pub rho_used: f64,
    pub rho_total: f64,
    pub rounds: usize,
    pub client_bytes_mean: f64,
    pub client_bytes_max: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    method: Method,
    epsilon: f64,
    repeat: usize,
    seed: u64,
}

/// Runs the full (method × ε × repeat) matrix.
///
/// Runs execute in parallel on the current rayon pool. A failing run is
/// recorded with its error in `status` and the rest continue. When `out` is
/// given, result files are written there (see the module docs). Rows come
/// back ordered by (method order in the config, ε order, repeat).
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunResult>> {
    config.validate()?;
    let hash = config.hash();
    let seeds = config.run_seeds();
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("runs")).map_err(|e| Error::io(dir, e))?;
        let mut doc = serde_json::to_value(config)?;
        doc["config_hash"] = serde_json::Value::String(hash.clone());
        write_atomic(
            &dir.join("config.json"),
            serde_json::to_string_pretty(&doc)?.as_bytes(),
        )?;
    }

    let prepared: Vec<std::result::Result<Prepared, String>> = seeds
        .par_iter()
        .map(|&s| prepare(config, s).map_err(|e| e.to_string()))
        .collect();

    let mut jobs = Vec::new();
    for (mi, &method) in config.methods.iter().enumerate() {
        for (ei, &epsilon) in config.epsilons.iter().enumerate() {
            for (repeat, &seed) in seeds.iter().enumerate() {
                jobs.push((
                    (mi, ei, repeat),
                    Job {
                        method,
                        epsilon,
                        repeat,
                        seed,
                    },
                ));
            }
        }
    }

    let mut results: Vec<((usize, usize, usize), RunResult)> = jobs
        .into_par_iter()
        .map(|(key, job)| {
            let row = run_job(config, &hash, &prepared[job.repeat], job, out);
            (key, row)
        })
        .collect();
    results.sort_by_key(|(k, _)| *k);
    let results: Vec<RunResult> = results.into_iter().map(|(_, r)| r).collect();

    if let Some(dir) = out {
        write_results(&dir.join("results.csv"), &results)?;
        write_long(&dir.join("long.csv"), &results)?;
    }
    Ok(results)
}

fn run_job(
    config: &ExperimentConfig,
    hash: &str,
    prepared: &std::result::Result<Prepared, String>,
    job: Job,
    out: Option<&Path>,
) -> RunResult {
    let id = run_id(job.method, job.epsilon, job.repeat);
    let started = Instant::now();
    let mut row = RunResult {
        config_hash: hash.to_string(),
        run: id.clone(),
        method: job.method,
        epsilon: job.epsilon,
        repeat: job.repeat,
        seed: job.seed,
        error: None,
        error_raw: None,
        nll: None,
        nll_sample: None,
        rho_used: None,
        rho_total: None,
        rounds: None,
        measurements: None,
        client_bytes_mean: None,
        client_bytes_max: None,
        total_bytes: None,
        wall_ms: 0,
        status: "ok".into(),
    };
    let outcome = (|| -> Result<()> {
        let prepared = prepared
            .as_ref()
            .map_err(|e| Error::Config(format!("preparation failed: {e}")))?;
        let output = run_method(job.method, job.epsilon, prepared, config, job.seed)?;
        let m = evaluate(&output, prepared, config, job.seed)?;
        row.error = Some(m.error);
        row.error_raw = Some(m.error_raw);
        row.nll = Some(m.nll);
        row.nll_sample = m.nll_sample;
        row.rho_used = Some(m.rho_used);
        row.rho_total = Some(m.rho_total);
        row.rounds = Some(m.rounds);
        row.measurements = Some(count_measurements(&output));
        row.client_bytes_mean = Some(m.client_bytes_mean);
        row.client_bytes_max = Some(m.client_bytes_max);
        row.total_bytes = Some(m.total_bytes);
        if let Some(dir) = out {
            write_run_files(&dir.join("runs").join(&id), &output)?;
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        log::error!("run {id} failed: {e}");
        row.status = format!("error: {e}");
    }
    row.wall_ms = started.elapsed().as_millis() as u64;
    row
}

fn count_measurements(output: &MethodOutput) -> usize {
    output
        .log
        .iter()
        .map(|v| match v.get("measured") {
            Some(serde_json::Value::Array(a)) => a.len(),
            Some(_) => 0,
            // central log: one measurement per round
            None => 1,
        })
        .sum()
}

fn write_run_files(dir: &Path, output: &MethodOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut log = Vec::new();
    for line in &output.log {
        serde_json::to_writer(&mut log, line)?;
        log.push(b'\n');
    }
    write_atomic(&dir.join("log.jsonl"), &log)?;
    write_atomic(
        &dir.join("ledger.json"),
        serde_json::to_string_pretty(&output.ledger)?.as_bytes(),
    )?;
    let mut comms = Vec::new();
    output.comms.write_csv(&mut comms)?;
    write_atomic(&dir.join("comms.csv"), &comms)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_results(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Csv(e),
    })?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Debug, Serialize)]
struct LongRow<'a> {
    run: &'a str,
    method: Method,
    epsilon: f64,
    repeat: usize,
    metric: &'static str,
    value: f64,
}

pub fn write_long(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        for (metric, value) in metric_fields(r) {
            if let Some(value) = value {
                w.serialize(LongRow {
                    run: &r.run,
                    method: r.method,
                    epsilon: r.epsilon,
                    repeat: r.repeat,
                    metric,
                    value,
                })?;
            }
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub epsilon: f64,
    pub runs: usize,
    pub failed: usize,
    pub error_mean: f64,
    pub error_std: f64,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub nll_sample_mean: f64,
    pub client_bytes_mean: f64,
    /// Rank by mean error among methods at this ε (1 = lowest).
    pub rank: usize,
}

/// Per (method, ε) means, deviations and error ranks. Failed runs are counted but not averaged.
pub fn summarize(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for r in results {
        if !keys.iter().any(|&(m, e)| m == r.method && e == r.epsilon) {
            keys.push((r.method, r.epsilon));
        }
    }
    let mut rows: Vec<SummaryRow> = keys
        .into_iter()
        .map(|(method, epsilon)| {
            let group: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.method == method && r.epsilon == epsilon)
                .collect();
            let ok: Vec<&RunResult> = group.iter().copied().filter(|r| r.ok()).collect();
            let col = |f: fn(&RunResult) -> Option<f64>| -> Vec<f64> {
                ok.iter().filter_map(|r| f(r)).collect()
            };
            let (error_mean, error_std) = mean_std(&col(|r| r.error));
            let (nll_mean, nll_std) = mean_std(&col(|r| r.nll));
            SummaryRow {
                method,
                epsilon,
                runs: group.len(),
                failed: group.len() - ok.len(),
                error_mean,
                error_std,
                nll_mean,
                nll_std,
                nll_sample_mean: mean_std(&col(|r| r.nll_sample)).0,
                client_bytes_mean: mean_std(&col(|r| r.client_bytes_mean)).0,
                rank: 0,
            }
        })
        .collect();
    let epsilons: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    for e in epsilons {
        let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].epsilon == e).collect();
        idx.sort_by(|&a, &b| rows[a].error_mean.total_cmp(&rows[b].error_mean));
        for (rank, i) in idx.into_iter().enumerate() {
            rows[i].rank = rank + 1;
        }
    }
    rows
}

/// Methods × ε table of error ranks, as CSV text.
pub fn rank_table(rows: &[SummaryRow]) -> String {
    let mut epsilons: Vec<f64> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        if !epsilons.contains(&r.epsilon) {
            epsilons.push(r.epsilon);
        }
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    epsilons.sort_by(f64::total_cmp);
    let mut out = String::from("method");
    for e in &epsilons {
        out.push_str(&format!(",eps={e}"));
    }
    out.push_str(",mean_rank\n");
    for m in methods {
        out.push_str(m.name());
        let mut ranks = Vec::new();
        for e in &epsilons {
            match rows.iter().find(|r| r.method == m && r.epsilon == *e) {
                Some(r) => {
                    ranks.push(r.rank as f64);
                    out.push_str(&format!(",{}", r.rank));
                }
                None => out.push(','),
            }
        }
        out.push_str(&format!(",{:.2}\n", mean_std(&ranks).0));
    }
    out
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "version": 1,
                "dataset": {"kind": "synthfs", "clients": 6, "rows_per_client": 60, "features": 4, "bins": 6, "seed": 3},
                "partition": {"kind": "natural"},
                "workload": {"arity": 2, "size": 4},
                "methods": ["aim", "distaim", "flaim-naive", "flaim-private"],
                "epsilons": [1.0],
                "rounds": 3,
                "sample_rate": 0.5,
                "train_iterations": 20,
                "final_iterations": 40,
                "repeats": 2,
                "seed": 11
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_bad_input() {
        let base = serde_json::to_value(tiny_config()).unwrap();
        let mut v = base.clone();
        v["version"] = 2.into();
        assert!(matches!(
            ExperimentConfig::from_json(&v.to_string()),
            Err(Error::Config(_))
        ));
        let mut v = base.clone();
        v["repeats"] = 0.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v = base.clone();
        v["surprise"] = 1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v = base;
        v["dataset"] = serde_json::json!({"kind": "adult-surrogate", "rows": 100});
        assert!(
            ExperimentConfig::from_json(&v.to_string()).is_err(),
            "natural partition needs synthfs"
        );
    }

    #[test]
    fn hash_tracks_content() {
        let a = tiny_config();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[0.4, 0.6]);
        assert!((m - 0.5).abs() < 1e-12);
        assert!((s - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn experiment_writes_reproducible_results() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(&config, Some(dir.path())).unwrap();
        assert_eq!(a.len(), 4 * 2);
        assert!(
            a.iter().all(RunResult::ok),
            "{:?}",
            a.iter().map(|r| &r.status).collect::<Vec<_>>()
        );
        assert_ne!(a[0].seed, a[1].seed);
        for r in &a {
            let e = r.error.unwrap();
            assert!((0.0..=2.0).contains(&e));
            assert!(r.nll.unwrap() >= 0.0);
            assert!(r.rho_used.unwrap() <= r.rho_total.unwrap() * (1.0 + 1e-12));
        }
        let b = run_experiment(&config, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(metric_fields(x), metric_fields(y));
        }
        let back = read_results(&dir.path().join("results.csv")).unwrap();
        assert_eq!(back.len(), a.len());
        assert_eq!(back[3].error, a[3].error);
        for sub in [
            "config.json",
            "long.csv",
            "runs/aim-eps1-r0/ledger.json",
            "runs/flaim-private-eps1-r1/log.jsonl",
        ] {
            assert!(dir.path().join(sub).exists(), "{sub} missing");
        }
        // central AIM exchanges nothing; federated runs do
        assert_eq!(a[0].total_bytes, Some(0));
        assert!(a[2].total_bytes.unwrap() > 0);
    }

    #[test]
    fn summary_ranks_methods_per_epsilon() {
        let mk = |method, epsilon, error| RunResult {
            config_hash: String::new(),
            run: String::new(),
            method,
            epsilon,
            repeat: 0,
            seed: 0,
            error: Some(error),
            error_raw: None,
            nll: Some(1.0),
            nll_sample: None,
            rho_used: None,
            rho_total: None,
            rounds: None,
            measurements: None,
            client_bytes_mean: None,
            client_bytes_max: None,
            total_bytes: None,
            wall_ms: 0,
            status: "ok".into(),
        };
        let rows = summarize(&[
            mk(Method::Aim, 1.0, 0.4),
            mk(Method::Aim, 1.0, 0.6),
            mk(Method::FlaimNaive, 1.0, 0.9),
            mk(Method::FlaimNaive, 2.0, 0.3),
        ]);
        assert_eq!(rows.len(), 3);
        assert!((rows[0].error_mean - 0.5).abs() < 1e-12);
        assert_eq!(rows[0].rank, 1);
        assert_eq!(rows[1].rank, 2);
        assert_eq!(rows[2].rank, 1);
        let table = rank_table(&rows);
        assert!(table.starts_with("method,eps=1,eps=2,mean_rank\n"));
        assert!(table.contains("flaim-naive,2,1,1.50"));
    }
}
