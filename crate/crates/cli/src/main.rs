//! `flaim` command-line tool.
//!
//! Exit codes: 0 success, 1 bad input or configuration, 2 failure while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use flaim_core::datasets::{synthfs, SynthFsConfig};
use flaim_core::dp::LedgerFile;
use flaim_core::harness::{
    build_partition, rank_table, read_results, run_experiment, summarize, write_atomic,
    write_summary, ExperimentConfig, Method, PartitionSpec,
};
use flaim_core::partition::heterogeneity_report;
use flaim_core::schema::{
    discretize, load_domain, read_dataset_csv, write_dataset_csv, RawTable, Schema,
};
use flaim_core::workload::random_workload;

#[derive(Parser, Debug)]
#[command(
    name = "flaim",
    version,
    about = "Private synthetic data from marginals, central and federated"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Discretise a raw CSV file with a schema.
    Prepare(PrepareArgs),
    /// Split a prepared dataset across clients.
    Partition(PartitionArgs),
    /// Generate a SynthFS dataset with its natural partition.
    Synthfs(SynthfsArgs),
    /// Run an experiment config.
    Run(RunArgs),
    /// Aggregate a results file.
    Summarize(SummarizeArgs),
    /// Replay every privacy ledger under a directory.
    AuditLedger(AuditArgs),
}

#[derive(Args, Debug)]
struct SeedArgs {
    #[arg(
        long,
        conflicts_with = "seed_from_entropy",
        required_unless_present = "seed_from_entropy"
    )]
    seed: Option<u64>,
    /// Draw the seed from the OS and print it.
    #[arg(long)]
    seed_from_entropy: bool,
}

impl SeedArgs {
    fn resolve(&self) -> u64 {
        match self.seed {
            Some(s) => s,
            None => {
                let s = rand::rng().random();
                eprintln!("seed: {s}");
                s
            }
        }
    }
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output directory for `data.csv`, `domain.json` and `report.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PartitionKind {
    Iid,
    LabelSkew,
    Cluster,
}

#[derive(Args, Debug)]
struct PartitionArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    domain: PathBuf,
    #[arg(long, value_enum)]
    kind: PartitionKind,
    #[arg(long, default_value_t = 100)]
    clients: usize,
    /// Dirichlet concentration for label skew.
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Class attribute index for label skew (default: last).
    #[arg(long)]
    class_attr: Option<usize>,
    #[command(flatten)]
    seed: SeedArgs,
    /// Partition file: one client id per row.
    #[arg(long)]
    out: PathBuf,
    /// Also write a heterogeneity report over a random workload.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    report_arity: usize,
    #[arg(long, default_value_t = 64)]
    report_queries: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SynthfsArgs {
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 100)]
    clients: usize,
    #[arg(long, default_value_t = 500)]
    rows_per_client: usize,
    #[arg(long, default_value_t = 10)]
    features: usize,
    #[arg(long, default_value_t = 40)]
    n_zipf: usize,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    #[command(flatten)]
    seed: SeedArgs,
    /// Output directory for `train.csv`, `holdout.csv`, `domain.json`, `partition.txt`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    seed: SeedArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Override the config's repeats.
    #[arg(long)]
    repeats: Option<usize>,
    /// Override the config's fixed round count.
    #[arg(long)]
    rounds: Option<usize>,
    /// Override the config's ε list.
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    /// Override the config's methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    sample_rate: Option<f64>,
    #[arg(long)]
    local_rounds: Option<usize>,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    /// A `results.csv` file or an experiment directory.
    results: PathBuf,
    /// Write the summary CSV here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Experiment directory or a single ledger file.
    path: PathBuf,
}

/// Which exit code an error maps to.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Partition(a) => partition(a),
        Command::Synthfs(a) => synthfs_cmd(a),
        Command::Run(a) => run(a),
        Command::Summarize(a) => summarize_cmd(a),
        Command::AuditLedger(a) => audit(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Config(anyhow!(
            "{} does not exist",
            path.display()
        )))
    }
}

/// Refuses to clobber an existing output unless `force` is set.
fn check_output(path: &Path, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Failure::Config(anyhow!(
            "{} already exists (use --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn write_dataset(path: &Path, data: &flaim_core::DiscreteDataset) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_dataset_csv(data, &mut buf)?;
    write_atomic(path, &buf)?;
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<(), Failure> {
    require_file(&a.schema)?;
    require_file(&a.input)?;
    check_output(&a.out.join("data.csv"), a.force)?;
    let schema = Schema::load(&a.schema).config()?;
    let raw = RawTable::read_csv(&a.input).config()?;
    let (data, report) = discretize(&raw, &schema).config()?;
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .runtime()?;
    write_dataset(&a.out.join("data.csv"), &data).runtime()?;
    write_json(&a.out.join("domain.json"), data.domain()).runtime()?;
    write_json(&a.out.join("report.json"), &report).runtime()?;
    if report.total_clamped() > 0 {
        eprintln!(
            "warning: {} values clamped into range",
            report.total_clamped()
        );
    }
    println!("{} rows, {} attributes", data.len(), data.domain().len());
    Ok(())
}

fn partition(a: PartitionArgs) -> Result<(), Failure> {
    require_file(&a.data)?;
    require_file(&a.domain)?;
    check_output(&a.out, a.force)?;
    let seed = a.seed.resolve();
    let domain = load_domain(&a.domain).config()?;
    let data = read_dataset_csv(&a.data, &domain).config()?;
    let spec = match a.kind {
        PartitionKind::Iid => PartitionSpec::Iid {
            clients: a.clients,
            seed: None,
        },
        PartitionKind::LabelSkew => PartitionSpec::LabelSkew {
            clients: a.clients,
            beta: a.beta,
            class_attr: a.class_attr,
            seed: None,
        },
        PartitionKind::Cluster => PartitionSpec::Cluster {
            clients: a.clients,
            seed: None,
        },
    };
    let p = build_partition(&spec, &data, None, seed).config()?;
    let mut buf = Vec::new();
    p.write(&mut buf).runtime()?;
    write_atomic(&a.out, &buf).runtime()?;
    let sizes = p.sizes();
    println!(
        "{} clients, sizes {}..{}",
        p.clients(),
        sizes.iter().min().unwrap_or(&0),
        sizes.iter().max().unwrap_or(&0)
    );
    if let Some(path) = a.report {
        check_output(&path, a.force)?;
        let w = random_workload(&domain, a.report_arity, a.report_queries, seed).config()?;
        let report = heterogeneity_report(&data, &p, w.queries()).runtime()?;
        println!(
            "heterogeneity: aggregate {:.4}, per query {:.4}",
            report.aggregate, report.mean_per_query
        );
        write_json(&path, &report).runtime()?;
    }
    Ok(())
}

fn synthfs_cmd(a: SynthfsArgs) -> Result<(), Failure> {
    check_output(&a.out.join("train.csv"), a.force)?;
    let seed = a.seed.resolve();
    let cfg = SynthFsConfig {
        clients: a.clients,
        rows_per_client: a.rows_per_client,
        features: a.features,
        beta: a.beta,
        n_zipf: a.n_zipf,
        bins: a.bins,
    };
    let fd = synthfs(&cfg, seed).config()?;
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .runtime()?;
    write_dataset(&a.out.join("train.csv"), &fd.train).runtime()?;
    write_dataset(&a.out.join("holdout.csv"), &fd.holdout).runtime()?;
    write_json(&a.out.join("domain.json"), fd.train.domain()).runtime()?;
    let mut buf = Vec::new();
    fd.partition.write(&mut buf).runtime()?;
    write_atomic(&a.out.join("partition.txt"), &buf).runtime()?;
    println!(
        "{} train rows, {} holdout rows, {} clients",
        fd.train.len(),
        fd.holdout.len(),
        cfg.clients
    );
    Ok(())
}

fn run(a: RunArgs) -> Result<(), Failure> {
    require_file(&a.config)?;
    check_output(&a.out, a.force)?;
    let mut config = ExperimentConfig::load(&a.config).config()?;
    config.seed = a.seed.resolve();
    if let Some(r) = a.repeats {
        config.repeats = r;
    }
    if let Some(t) = a.rounds {
        config.rounds = Some(t);
    }
    if let Some(e) = a.epsilons {
        config.epsilons = e;
    }
    if let Some(m) = a.methods {
        config.methods = m
            .iter()
            .map(|s| s.parse::<Method>())
            .collect::<Result<_, _>>()
            .config()?;
    }
    if let Some(p) = a.sample_rate {
        config.sample_rate = p;
    }
    if let Some(s) = a.local_rounds {
        config.local_rounds = s;
    }
    config.validate().config()?;

    // build in a sibling temp dir, then move into place
    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)
        .with_context(|| format!("creating {}", parent.display()))
        .runtime()?;
    let staging = tempfile::Builder::new()
        .prefix(".flaim-run")
        .tempdir_in(&parent)
        .context("creating staging directory")
        .runtime()?;
    let results = run_experiment(&config, Some(staging.path())).runtime()?;
    if a.out.exists() {
        fs::remove_dir_all(&a.out)
            .with_context(|| format!("removing {}", a.out.display()))
            .runtime()?;
    }
    let staged = staging.keep();
    fs::rename(&staged, &a.out)
        .with_context(|| format!("moving results to {}", a.out.display()))
        .runtime()?;

    let failed: Vec<_> = results.iter().filter(|r| !r.ok()).collect();
    for r in &results {
        match r.error {
            Some(e) => println!(
                "{:<14} eps={:<6} rep={} error={:.4}",
                r.method, r.epsilon, r.repeat, e
            ),
            None => println!(
                "{:<14} eps={:<6} rep={} {}",
                r.method, r.epsilon, r.repeat, r.status
            ),
        }
    }
    if !failed.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "{} of {} runs failed",
            failed.len(),
            results.len()
        )));
    }
    Ok(())
}

fn summarize_cmd(a: SummarizeArgs) -> Result<(), Failure> {
    let path = if a.results.is_dir() {
        a.results.join("results.csv")
    } else {
        a.results.clone()
    };
    require_file(&path)?;
    let results = read_results(&path).config()?;
    if results.is_empty() {
        return Err(Failure::Config(anyhow!("{} has no rows", path.display())));
    }
    let rows = summarize(&results);
    match a.out {
        Some(out) => {
            check_output(&out, a.force)?;
            write_summary(&out, &rows).runtime()?;
        }
        None => {
            println!(
                "{:<14} {:>8} {:>5} {:>10} {:>10} {:>10} {:>5}",
                "method", "epsilon", "runs", "error", "std", "nll", "rank"
            );
            for r in &rows {
                println!(
                    "{:<14} {:>8} {:>5} {:>10.4} {:>10.4} {:>10.3} {:>5}",
                    r.method, r.epsilon, r.runs, r.error_mean, r.error_std, r.nll_mean, r.rank
                );
            }
            println!();
            print!("{}", rank_table(&rows));
        }
    }
    Ok(())
}

fn ledgers_under(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut found = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry?;
        if entry.file_type().is_file() && entry.file_name() == "ledger.json" {
            found.push(entry.into_path());
        }
    }
    Ok(found)
}

fn audit(a: AuditArgs) -> Result<(), Failure> {
    if !a.path.exists() {
        return Err(Failure::Config(anyhow!(
            "{} does not exist",
            a.path.display()
        )));
    }
    let ledgers = ledgers_under(&a.path).config()?;
    if ledgers.is_empty() {
        return Err(Failure::Config(anyhow!(
            "no ledger.json under {}",
            a.path.display()
        )));
    }
    let mut bad = 0;
    for path in &ledgers {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .config()?;
        let ledger: LedgerFile = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .config()?;
        let audit = ledger.audit();
        let ok = audit.consistent && audit.within_budget;
        if !ok {
            bad += 1;
        }
        println!(
            "{} {} replayed={:.6e} recorded={:.6e} total={:.6e}",
            if ok { "ok  " } else { "FAIL" },
            path.display(),
            audit.replayed,
            audit.recorded,
            audit.rho_total
        );
    }
    if bad > 0 {
        return Err(Failure::Runtime(anyhow!(
            "{bad} of {} ledgers failed the audit",
            ledgers.len()
        )));
    }
    Ok(())
}
