//! Distributed and federated AIM.
//!
//! DistAIM: sampled clients secret-share their answers to the whole
//! (completed) workload once; compute servers keep running share sums and run
//! the central select/measure loop on the aggregate.
//!
//! FLAIM: sampled clients select marginals locally against the current global
//! model, send the chosen tables through secure aggregation, and the server
//! adds noise once per unique query and refits. The augmented variants
//! penalise queries on which a client looks unlike the population, either
//! with the exact skew (oracle) or with a proxy built from noisy one-way
//! marginals (private).

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aim::{
    check_fit_cap, default_delta, default_final_iterations, default_max_model_bytes, default_r,
    default_train_iterations, fit_options, next_round, noisy, one_way_queries, select_query,
    stalled, NextRound, ScoreScale, Scoring,
};
use crate::domain::{
    evaluate_marginal, l1_distance, normalize, DiscreteDataset, Domain, MarginalQuery,
};
use crate::dp::{
    central_schedule_init, flaim_schedule, LedgerFile, NoiseSchedule, PrivacyAccountant,
    ScheduleMode,
};
use crate::error::{Error, Result};
use crate::model::{fit, size_after_merge, Measurement, ModelState};
use crate::partition::tau;
use crate::rng::{stream, Purpose, StreamKey, SERVER};
use crate::secagg::{
    secagg_round, share, CommsLedger, Contribution, ShareAccumulator, SHARE_BYTES,
};
use crate::workload::{complete_workload, Workload};

/// Safety stop for annealing runs in which rounds keep coming up empty.
const MAX_ANNEAL_ROUNDS: usize = 100_000;
/// Attempts at drawing a non-empty initialisation cohort before forcing one client in.
const INIT_DRAWS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlaimVariant {
    Naive,
    Oracle,
    #[default]
    Private,
}

/// Switches for the pieces that distinguish the augmented variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    /// Subtract the skew term from local utility scores.
    pub penalty: bool,
    /// Private only: drop one-way queries from local selection and feed the
    /// per-round one-way aggregates into the global model.
    pub filter_combine: bool,
    /// Weight measurements by contributing record count (α = N/σ) instead of 1/σ.
    pub sample_weighting: bool,
    /// Use sensitivity 2·max w_q for local selection.
    pub doubled_sensitivity: bool,
}

impl Augmentation {
    pub fn for_variant(variant: FlaimVariant) -> Self {
        match variant {
            FlaimVariant::Naive => Augmentation {
                penalty: false,
                filter_combine: false,
                sample_weighting: false,
                doubled_sensitivity: false,
            },
            FlaimVariant::Oracle => Augmentation {
                penalty: true,
                filter_combine: false,
                sample_weighting: true,
                doubled_sensitivity: true,
            },
            FlaimVariant::Private => Augmentation {
                penalty: true,
                filter_combine: true,
                sample_weighting: true,
                doubled_sensitivity: true,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedConfig {
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Per-round client sampling probability p.
    pub sample_rate: f64,
    /// Global rounds T; `None` anneals until the budget is spent.
    #[serde(default)]
    pub rounds: Option<usize>,
    /// Local steps s per participating client (FLAIM only).
    #[serde(default = "one")]
    pub local_rounds: usize,
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_max_model_bytes")]
    pub max_model_bytes: u64,
    #[serde(default = "default_train_iterations")]
    pub train_iterations: usize,
    #[serde(default = "default_final_iterations")]
    pub final_iterations: usize,
    #[serde(default)]
    pub score_scale: ScoreScale,
    #[serde(default = "three")]
    pub parties: usize,
    #[serde(default)]
    pub variant: FlaimVariant,
    /// Overrides the variant's default augmentation switches.
    #[serde(default)]
    pub augmentation: Option<Augmentation>,
    #[serde(default)]
    pub track_error: bool,
    /// Test hook: no noise anywhere and argmax selection. The ledger is still charged.
    #[serde(default, skip_serializing)]
    pub noiseless: bool,
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn three() -> usize {
    crate::secagg::DEFAULT_PARTIES
}

impl FederatedConfig {
    pub fn new(epsilon: f64, sample_rate: f64, seed: u64) -> Self {
        FederatedConfig {
            epsilon,
            delta: default_delta(),
            sample_rate,
            rounds: None,
            local_rounds: 1,
            r: default_r(),
            max_model_bytes: default_max_model_bytes(),
            train_iterations: default_train_iterations(),
            final_iterations: default_final_iterations(),
            score_scale: ScoreScale::default(),
            parties: three(),
            variant: FlaimVariant::default(),
            augmentation: None,
            track_error: false,
            noiseless: false,
            seed,
        }
    }

    pub fn augmentation(&self) -> Augmentation {
        self.augmentation
            .unwrap_or_else(|| Augmentation::for_variant(self.variant))
    }

    fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sample rate must be in (0, 1], got {}",
                self.sample_rate
            )));
        }
        if self.local_rounds == 0 || self.rounds == Some(0) {
            return Err(Error::InvalidParameter("rounds must be at least 1".into()));
        }
        if self.parties < 2 {
            return Err(Error::InvalidParameter(
                "secret sharing needs at least 2 parties".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSelections {
    pub client: usize,
    pub queries: Vec<Vec<usize>>,
    pub utilities: Vec<f64>,
    /// Skew term τ̃_k(q) (normalised units) for each selected query.
    pub penalties: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredQuery {
    pub query: Vec<usize>,
    pub contributors: usize,
    pub alpha: f64,
    pub total: f64,
}

/// One line of the per-round protocol log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedRoundLog {
    pub round: usize,
    pub participants: Vec<usize>,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selections: Vec<ClientSelections>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub measured: Vec<MeasuredQuery>,
    /// Queries the server dropped because they would exceed the model-size cap.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<Vec<usize>>,
    pub sigma: f64,
    pub epsilon: f64,
    pub rho_used: f64,
    pub annealed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FedOutput {
    pub model: ModelState,
    pub measurements: Vec<Measurement>,
    pub log: Vec<FedRoundLog>,
    pub ledger: LedgerFile,
    pub comms: CommsLedger,
}

/// τ̃_k(q): mean over j ∈ q of ‖M_j(D_k) − M̃_j(D)‖₁ on normalised tables.
///
/// `client_one_ways[j]` are the client's one-way counts; `global_one_ways[j]`
/// any nonnegative estimate of the global one-way distribution.
pub fn heterogeneity_proxy(
    client_one_ways: &[Vec<f64>],
    global_one_ways: &[Vec<f64>],
    q: &MarginalQuery,
) -> f64 {
    let attrs = q.attrs();
    attrs
        .iter()
        .map(|&j| {
            l1_distance(
                &normalize(&client_one_ways[j]),
                &normalize(&global_one_ways[j]),
            )
        })
        .sum::<f64>()
        / attrs.len() as f64
}

/// Clips negative cells, then normalises (zero vector if nothing is left).
fn clipped(values: &[f64]) -> Vec<f64> {
    normalize(&values.iter().map(|v| v.max(0.0)).collect::<Vec<_>>())
}

/// Bernoulli(p) participation for one round.
pub fn sample_participants(clients: usize, p: f64, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = stream(seed, round as u64, SERVER, Purpose::Sampling);
    (0..clients).filter(|_| rng.random::<f64>() < p).collect()
}

/// Initialisation cohort: redraws until someone participates.
fn sample_init_cohort(clients: usize, p: f64, seed: u64) -> Vec<usize> {
    for attempt in 0..INIT_DRAWS {
        let mut rng = StreamKey::new(seed, 0, SERVER, Purpose::Sampling)
            .with_index(attempt)
            .rng();
        let cohort: Vec<usize> = (0..clients).filter(|_| rng.random::<f64>() < p).collect();
        if !cohort.is_empty() {
            return cohort;
        }
    }
    let mut rng = stream(seed, 0, SERVER, Purpose::Sampling);
    vec![rng.random_range(0..clients)]
}

fn check_clients(clients: &[DiscreteDataset], workload: &Workload) -> Result<Domain> {
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidParameter("no clients".into()))?;
    if clients.iter().any(|c| c.domain() != first.domain()) {
        return Err(Error::InvalidDomain(
            "clients disagree on the domain".into(),
        ));
    }
    if workload.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    if clients.iter().all(|c| c.is_empty()) {
        return Err(Error::InvalidParameter("all clients are empty".into()));
    }
    Ok(first.domain().clone())
}

/// Σ_k M_q(D_k) for each query.
fn summed_answers(clients: &[DiscreteDataset], queries: &[MarginalQuery]) -> Result<Vec<Vec<f64>>> {
    queries
        .par_iter()
        .map(|q| {
            let mut sum = vec![0.0; q.cells()];
            for c in clients {
                for (s, v) in sum.iter_mut().zip(evaluate_marginal(c, q)?.counts) {
                    *s += v;
                }
            }
            Ok(sum)
        })
        .collect()
}

/// Normalised workload error of `model` against precomputed true answers.
fn error_against(truths: &[(MarginalQuery, Vec<f64>)], model: &ModelState) -> Result<f64> {
    let mut sum = 0.0;
    for (q, t) in truths {
        sum += l1_distance(&normalize(t), &normalize(&model.answer(q)?.counts));
    }
    Ok(sum / truths.len() as f64)
}

/// Bytes a client downloads to receive the global model: one table per distinct measured query.
fn broadcast_bytes(measurements: &[Measurement]) -> u64 {
    measurements
        .iter()
        .map(|m| (m.query.attrs(), m.query.cells()))
        .collect::<BTreeMap<_, _>>()
        .values()
        .map(|&c| c as u64 * SHARE_BYTES)
        .sum()
}

struct Shared<'a> {
    target: Vec<(MarginalQuery, Vec<f64>)>,
    config: &'a FederatedConfig,
}

impl Shared<'_> {
    fn error(&self, model: &ModelState) -> Result<Option<f64>> {
        if self.config.track_error {
            error_against(&self.target, model).map(Some)
        } else {
            Ok(None)
        }
    }
}

fn target_truths(
    clients: &[DiscreteDataset],
    workload: &Workload,
    config: &FederatedConfig,
) -> Result<Vec<(MarginalQuery, Vec<f64>)>> {
    if !config.track_error {
        return Ok(Vec::new());
    }
    let answers = summed_answers(clients, workload.queries())?;
    Ok(workload.queries().iter().cloned().zip(answers).collect())
}

fn initial_schedule(
    config: &FederatedConfig,
    d: usize,
    rho: f64,
    mode: ScheduleMode,
) -> Result<NoiseSchedule> {
    match config.rounds {
        Some(t) => flaim_schedule(t, config.local_rounds, d, rho, config.r, mode),
        None => Ok(central_schedule_init(d, rho, 8)),
    }
}

/// DistAIM: AIM on securely aggregated answers of the clients seen so far.
pub fn distaim_run(
    clients: &[DiscreteDataset],
    workload: &Workload,
    config: &FederatedConfig,
) -> Result<FedOutput> {
    config.validate()?;
    let domain = check_clients(clients, workload)?;
    check_fit_cap(&domain, config.max_model_bytes)?;
    let shared = Shared {
        target: target_truths(clients, workload, config)?,
        config,
    };
    let completed = complete_workload(workload, &domain)?;
    let d = domain.len();
    let noise = !config.noiseless;
    let sensitivity = completed.max_weight();
    let all: Vec<usize> = (0..completed.len()).collect();

    // everything a client shares: the completed workload plus any one-ways it lacks
    let ones = one_way_queries(&domain);
    let mut shared_queries: Vec<MarginalQuery> = completed.queries().to_vec();
    for q in &ones {
        if !shared_queries.contains(q) {
            shared_queries.push(q.clone());
        }
    }
    let one_pos: Vec<usize> = ones
        .iter()
        .map(|q| shared_queries.iter().position(|s| s == q).unwrap())
        .collect();
    let mut sums: Vec<ShareAccumulator> = shared_queries
        .iter()
        .map(|q| ShareAccumulator::new(q, config.parties))
        .collect();
    let mut joined = vec![false; clients.len()];
    let mut mass = 0.0;
    let mut comms = CommsLedger::new();

    let mut contribute =
        |k: usize, round: usize, sums: &mut Vec<ShareAccumulator>, mass: &mut f64| -> Result<()> {
            if std::mem::replace(&mut joined[k], true) {
                return Ok(());
            }
            let mut rng = stream(config.seed, round as u64, k as u64, Purpose::Shares);
            let mut bytes = 0;
            for (q, acc) in shared_queries.iter().zip(sums.iter_mut()) {
                let table = evaluate_marginal(&clients[k], q)?;
                acc.add(&share(&table, config.parties, round, &mut rng)?)?;
                bytes += q.cells() as u64 * SHARE_BYTES * config.parties as u64;
            }
            comms.record("distaim", k, round, bytes, 0);
            *mass += clients[k].len() as f64;
            Ok(())
        };

    let mut acc = PrivacyAccountant::new(config.epsilon, config.delta)?;
    let rho = acc.rho_total();
    let mut schedule = match config.rounds {
        Some(t) => flaim_schedule(t, 1, d, rho, config.r, ScheduleMode::Fixed)?,
        None => central_schedule_init(d, rho, 8),
    };
    let train = fit_options(config.max_model_bytes, config.train_iterations);

    // round 0: a cohort shares, servers measure every one-way marginal
    let cohort = sample_init_cohort(clients.len(), config.sample_rate, config.seed);
    for &k in &cohort {
        contribute(k, 0, &mut sums, &mut mass)?;
    }
    acc.charge_gaussian(0, schedule.sigma, d)?;
    let mut rng = stream(config.seed, 0, SERVER, Purpose::Init);
    let mut measurements = Vec::new();
    for (q, &pos) in ones.iter().zip(&one_pos) {
        let values = noisy(&sums[pos].reveal(), schedule.sigma, noise, &mut rng);
        measurements.push(fed_measurement(
            0,
            q.clone(),
            values,
            schedule.sigma,
            1.0 / schedule.sigma,
        ));
    }
    let mut model = fit(&measurements, &domain, &train)?;
    let mut log = vec![FedRoundLog {
        round: 0,
        participants: cohort,
        skipped: false,
        selections: Vec::new(),
        measured: measurements.iter().map(|m| measured_entry(m, 0)).collect(),
        dropped: Vec::new(),
        sigma: schedule.sigma,
        epsilon: schedule.epsilon,
        rho_used: acc.rho_used(),
        annealed: false,
        error: shared.error(&model)?,
    }];

    let mut t = 0;
    loop {
        let last = match next_round(config.rounds, t, &acc, &mut schedule, 1.0, 1.0) {
            NextRound::Stop => break,
            NextRound::Run { last } => last,
        };
        t += 1;
        if t > MAX_ANNEAL_ROUNDS {
            break;
        }
        let participants = sample_participants(clients.len(), config.sample_rate, config.seed, t);
        for &k in &participants {
            contribute(k, t, &mut sums, &mut mass)?;
        }
        let used = schedule;
        if mass == 0.0 {
            if config.rounds.is_some() {
                acc.reserve(
                    t,
                    1.0 / (2.0 * used.sigma * used.sigma) + used.epsilon * used.epsilon / 8.0,
                )?;
            }
            log.push(skipped_log(t, participants, &used, &acc));
            continue;
        }
        let truths: Vec<Vec<f64>> = sums[..completed.len()].iter().map(|s| s.reveal()).collect();
        let scoring = Scoring {
            workload: &completed,
            subset: &all,
            truths: &truths,
            penalties: None,
            mass,
            scale: config.score_scale,
            rho_used: acc.rho_used(),
            rho_total: acc.rho_total(),
            max_bytes: config.max_model_bytes,
            sensitivity,
            noise,
        };
        let mut sel_rng = stream(config.seed, t as u64, SERVER, Purpose::Select);
        let sel = select_query(&scoring, &model, &schedule, &mut sel_rng)?;
        acc.charge_exponential(t, schedule.epsilon, 1)?;
        acc.charge_gaussian(t, schedule.sigma, 1)?;
        let q = completed.queries()[sel.index].clone();
        let mut meas_rng = stream(config.seed, t as u64, SERVER, Purpose::Measure);
        let values = noisy(&truths[sel.index], schedule.sigma, noise, &mut meas_rng);
        measurements.push(fed_measurement(
            t,
            q.clone(),
            values,
            schedule.sigma,
            1.0 / schedule.sigma,
        ));
        model = fit(&measurements, &domain, &train)?;
        let mut annealed = false;
        if config.rounds.is_none() && !last {
            annealed = stalled(&sel.before, &model.answer(&q)?.counts, schedule.sigma);
            schedule = crate::dp::anneal_step(schedule, annealed);
        }
        log.push(FedRoundLog {
            round: t,
            participants,
            skipped: false,
            selections: vec![ClientSelections {
                client: SERVER as usize,
                queries: vec![q.attrs().to_vec()],
                utilities: vec![sel.utility],
                penalties: vec![0.0],
            }],
            measured: vec![measured_entry(
                measurements.last().unwrap(),
                sums[sel.index].contributors(),
            )],
            dropped: Vec::new(),
            sigma: used.sigma,
            epsilon: used.epsilon,
            rho_used: acc.rho_used(),
            annealed,
            error: shared.error(&model)?,
        });
        if last {
            break;
        }
    }
    let model = fit(
        &measurements,
        &domain,
        &fit_options(config.max_model_bytes, config.final_iterations),
    )?;
    Ok(FedOutput {
        model,
        measurements,
        log,
        ledger: acc.to_file(),
        comms,
    })
}

/// A server-side measurement whose mass is its clipped noisy total.
fn fed_measurement(
    round: usize,
    query: MarginalQuery,
    values: Vec<f64>,
    sigma: f64,
    alpha: f64,
) -> Measurement {
    let total = values.iter().sum::<f64>().max(1.0);
    Measurement {
        round,
        query,
        values,
        sigma,
        weight: alpha,
        total: Some(total),
    }
}

fn measured_entry(m: &Measurement, contributors: usize) -> MeasuredQuery {
    MeasuredQuery {
        query: m.query.attrs().to_vec(),
        contributors,
        alpha: m.weight,
        total: m.total.unwrap_or(f64::NAN),
    }
}

fn skipped_log(
    round: usize,
    participants: Vec<usize>,
    schedule: &NoiseSchedule,
    acc: &PrivacyAccountant,
) -> FedRoundLog {
    log::info!("round {round}: no usable participants, skipped");
    FedRoundLog {
        round,
        participants,
        skipped: true,
        selections: Vec::new(),
        measured: Vec::new(),
        dropped: Vec::new(),
        sigma: schedule.sigma,
        epsilon: schedule.epsilon,
        rho_used: acc.rho_used(),
        annealed: false,
        error: None,
    }
}

/// What one client sends after its local steps.
struct ClientMessage {
    client: usize,
    /// Unique selected workload indices with their local counts.
    tables: Vec<(usize, Vec<f64>)>,
    log: ClientSelections,
}

/// Read-only state shared by all clients in a round.
struct RoundContext<'a> {
    completed: &'a Workload,
    candidates: &'a [usize],
    model: &'a ModelState,
    measurements: &'a [Measurement],
    schedule: NoiseSchedule,
    rho_used: f64,
    rho_total: f64,
    round: usize,
    sensitivity: f64,
    /// Global answers for the oracle penalty, indexed like the workload.
    global: Option<&'a [Vec<f64>]>,
    /// Global one-way estimate for the private proxy.
    one_way_estimate: Option<&'a [Vec<f64>]>,
    augmentation: Augmentation,
    variant: FlaimVariant,
    config: &'a FederatedConfig,
}

fn client_round(k: usize, data: &DiscreteDataset, ctx: &RoundContext) -> Result<ClientMessage> {
    let config = ctx.config;
    let completed = ctx.completed;
    let n_k = data.len() as f64;
    let mut truths = vec![Vec::new(); completed.len()];
    for &i in ctx.candidates {
        truths[i] = evaluate_marginal(data, &completed.queries()[i])?.counts;
    }
    // skew per candidate, in normalised units
    let mut skew = vec![0.0; completed.len()];
    if ctx.augmentation.penalty {
        match ctx.variant {
            FlaimVariant::Naive => {}
            FlaimVariant::Oracle => {
                let global = ctx.global.expect("oracle needs global answers");
                for &i in ctx.candidates {
                    skew[i] = tau(&truths[i], &global[i]);
                }
            }
            FlaimVariant::Private => {
                let local_ones: Vec<Vec<f64>> = one_way_queries(data.domain())
                    .iter()
                    .map(|q| evaluate_marginal(data, q).map(|t| t.counts))
                    .collect::<Result<_>>()?;
                let global_ones: Vec<Vec<f64>> = match ctx.one_way_estimate {
                    Some(est) => est.to_vec(),
                    None => one_way_queries(data.domain())
                        .iter()
                        .map(|q| ctx.model.answer(q).map(|t| t.counts))
                        .collect::<Result<_>>()?,
                };
                for &i in ctx.candidates {
                    skew[i] =
                        heterogeneity_proxy(&local_ones, &global_ones, &completed.queries()[i]);
                }
            }
        }
    }
    let penalties: Vec<f64> = skew.iter().map(|t| t * n_k).collect();

    let mut local_model = ctx.model.clone();
    let mut local_measurements: Vec<Measurement> = Vec::new();
    let mut sel_rng = stream(config.seed, ctx.round as u64, k as u64, Purpose::Select);
    let mut meas_rng = stream(
        config.seed,
        ctx.round as u64,
        k as u64,
        Purpose::LocalMeasure,
    );
    let train = fit_options(config.max_model_bytes, config.train_iterations);
    let mut picked: Vec<usize> = Vec::new();
    let mut log = ClientSelections {
        client: k,
        queries: Vec::new(),
        utilities: Vec::new(),
        penalties: Vec::new(),
    };
    for l in 0..config.local_rounds {
        let scoring = Scoring {
            workload: completed,
            subset: ctx.candidates,
            truths: &truths,
            penalties: Some(&penalties),
            mass: n_k,
            scale: config.score_scale,
            rho_used: ctx.rho_used,
            rho_total: ctx.rho_total,
            max_bytes: config.max_model_bytes,
            sensitivity: ctx.sensitivity,
            noise: !config.noiseless,
        };
        let sel = select_query(&scoring, &local_model, &ctx.schedule, &mut sel_rng)?;
        log.queries
            .push(completed.queries()[sel.index].attrs().to_vec());
        log.utilities.push(sel.utility);
        log.penalties.push(skew[sel.index]);
        if !picked.contains(&sel.index) {
            picked.push(sel.index);
        }
        if l + 1 < config.local_rounds {
            // local step: measure on the client's own data and refit the local model
            let values = noisy(
                &truths[sel.index],
                ctx.schedule.sigma,
                !config.noiseless,
                &mut meas_rng,
            );
            local_measurements.push(Measurement {
                round: ctx.round,
                query: completed.queries()[sel.index].clone(),
                values,
                sigma: ctx.schedule.sigma,
                weight: 1.0 / ctx.schedule.sigma,
                total: Some(n_k.max(1.0)),
            });
            let all: Vec<Measurement> = ctx
                .measurements
                .iter()
                .chain(&local_measurements)
                .cloned()
                .collect();
            local_model = fit(&all, data.domain(), &train)?;
        }
    }
    let tables = picked
        .into_iter()
        .map(|i| (i, std::mem::take(&mut truths[i])))
        .collect();
    Ok(ClientMessage {
        client: k,
        tables,
        log,
    })
}

/// FLAIM with the configured variant.
pub fn flaim_run(
    clients: &[DiscreteDataset],
    workload: &Workload,
    config: &FederatedConfig,
) -> Result<FedOutput> {
    config.validate()?;
    let domain = check_clients(clients, workload)?;
    check_fit_cap(&domain, config.max_model_bytes)?;
    let shared = Shared {
        target: target_truths(clients, workload, config)?,
        config,
    };
    let completed = complete_workload(workload, &domain)?;
    let d = domain.len();
    let s = config.local_rounds;
    let noise = !config.noiseless;
    let aug = config.augmentation();
    let private = config.variant == FlaimVariant::Private;
    let protocol = match config.variant {
        FlaimVariant::Naive => "flaim-naive",
        FlaimVariant::Oracle => "flaim-oracle",
        FlaimVariant::Private => "flaim-private",
    };

    let mut candidates: Vec<usize> = (0..completed.len()).collect();
    if private && aug.filter_combine {
        let higher: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| completed.queries()[i].arity() > 1)
            .collect();
        if higher.is_empty() {
            log::warn!("workload has only one-way queries; keeping them selectable");
        } else {
            candidates = higher;
        }
    }
    let sensitivity = completed.max_weight() * if aug.doubled_sensitivity { 2.0 } else { 1.0 };
    let global = if config.variant == FlaimVariant::Oracle && aug.penalty {
        Some(summed_answers(clients, completed.queries())?)
    } else {
        None
    };
    let exact_mass = config.variant == FlaimVariant::Oracle && aug.sample_weighting;

    let mut acc = PrivacyAccountant::new(config.epsilon, config.delta)?;
    let rho = acc.rho_total();
    let mode = if private {
        ScheduleMode::FixedWithOneWays
    } else {
        ScheduleMode::Fixed
    };
    let mut schedule = initial_schedule(config, d, rho, mode)?;
    let gauss_per_round = s + if private { d } else { 0 };
    let train = fit_options(config.max_model_bytes, config.train_iterations);
    let ones = one_way_queries(&domain);
    let mut comms = CommsLedger::new();
    let mut measurements: Vec<Measurement> = Vec::new();
    let mut log = Vec::new();

    let alpha_for = |sigma: f64, exact: f64, noisy_total: f64| -> f64 {
        if !aug.sample_weighting {
            1.0 / sigma
        } else if exact_mass {
            exact / sigma
        } else {
            noisy_total / sigma
        }
    };
    let server_measurement =
        |round: usize, q: MarginalQuery, values: Vec<f64>, sigma: f64, exact: f64| {
            let noisy_total = values.iter().sum::<f64>().max(1.0);
            let total = if exact_mass {
                exact.max(1.0)
            } else {
                noisy_total
            };
            Measurement {
                round,
                query: q,
                values,
                sigma,
                weight: alpha_for(sigma, exact, noisy_total),
                total: Some(total),
            }
        };

    // the private variant measures every one-way each round instead of initialising
    if !private {
        let cohort = sample_init_cohort(clients.len(), config.sample_rate, config.seed);
        acc.charge_gaussian(0, schedule.sigma, d)?;
        let mut rng = stream(config.seed, 0, SERVER, Purpose::Init);
        let exact: f64 = cohort.iter().map(|&k| clients[k].len() as f64).sum();
        for q in &ones {
            let contributions = cohort
                .iter()
                .map(|&k| {
                    Ok(Contribution {
                        client: k,
                        values: evaluate_marginal(&clients[k], q)?.counts,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let sigma = if noise { schedule.sigma } else { 0.0 };
            let table = secagg_round(q, &contributions, sigma, 0, protocol, &mut comms, &mut rng)?;
            measurements.push(server_measurement(
                0,
                q.clone(),
                table.counts,
                schedule.sigma,
                exact,
            ));
        }
        log.push(FedRoundLog {
            round: 0,
            participants: cohort.clone(),
            skipped: false,
            selections: Vec::new(),
            measured: measurements
                .iter()
                .map(|m| measured_entry(m, cohort.len()))
                .collect(),
            dropped: Vec::new(),
            sigma: schedule.sigma,
            epsilon: schedule.epsilon,
            rho_used: acc.rho_used(),
            annealed: false,
            error: None,
        });
    }
    let mut model = fit(&measurements, &domain, &train)?;
    if let Some(first) = log.first_mut() {
        first.error = shared.error(&model)?;
    }
    let mut one_way_sums: Option<Vec<Vec<f64>>> = None;

    let mut t = 0;
    loop {
        let last = match next_round(
            config.rounds,
            t,
            &acc,
            &mut schedule,
            gauss_per_round as f64,
            s as f64,
        ) {
            NextRound::Stop => break,
            NextRound::Run { last } => last,
        };
        t += 1;
        if t > MAX_ANNEAL_ROUNDS {
            break;
        }
        let used = schedule;
        let participants = sample_participants(clients.len(), config.sample_rate, config.seed, t);
        if participants.is_empty() {
            if config.rounds.is_some() {
                acc.reserve(
                    t,
                    gauss_per_round as f64 / (2.0 * used.sigma * used.sigma)
                        + s as f64 * used.epsilon * used.epsilon / 8.0,
                )?;
            }
            log.push(skipped_log(t, participants, &used, &acc));
            if last {
                break;
            }
            continue;
        }
        let rho_before = acc.rho_used();
        acc.charge_exponential(t, schedule.epsilon, s)?;
        acc.charge_gaussian(t, schedule.sigma, gauss_per_round)?;

        let estimate: Option<Vec<Vec<f64>>> = one_way_sums
            .as_ref()
            .map(|sums| sums.iter().map(|v| clipped(v)).collect());
        let ctx = RoundContext {
            completed: &completed,
            candidates: &candidates,
            model: &model,
            measurements: &measurements,
            schedule,
            rho_used: rho_before,
            rho_total: acc.rho_total(),
            round: t,
            sensitivity,
            global: global.as_deref(),
            one_way_estimate: estimate.as_deref(),
            augmentation: aug,
            variant: config.variant,
            config,
        };
        let messages: Vec<ClientMessage> = participants
            .par_iter()
            .map(|&k| client_round(k, &clients[k], &ctx))
            .collect::<Result<_>>()?;

        let download = broadcast_bytes(&measurements);
        for &k in &participants {
            comms.record(protocol, k, t, 0, download);
        }

        // server: one noisy aggregate per unique selected query
        let mut by_query: BTreeMap<usize, Vec<Contribution>> = BTreeMap::new();
        let mut selections = Vec::new();
        for m in messages {
            for (i, values) in m.tables {
                by_query.entry(i).or_default().push(Contribution {
                    client: m.client,
                    values,
                });
            }
            selections.push(m.log);
        }
        let mut rng = stream(config.seed, t as u64, SERVER, Purpose::Measure);
        let mut structure = model.structure();
        let mut measured = Vec::new();
        let mut dropped = Vec::new();
        let mut new_queries = Vec::new();
        for (i, contributions) in by_query {
            let q = completed.queries()[i].clone();
            if size_after_merge(&domain, &structure, &q) > config.max_model_bytes as u128 {
                log::info!(
                    "round {t}: dropping {:?}, model would exceed the size cap",
                    q.attrs()
                );
                dropped.push(q.attrs().to_vec());
                continue;
            }
            let exact: f64 = contributions
                .iter()
                .map(|c| clients[c.client].len() as f64)
                .sum();
            let sigma = if noise { schedule.sigma } else { 0.0 };
            let table = secagg_round(&q, &contributions, sigma, t, protocol, &mut comms, &mut rng)?;
            let m = server_measurement(t, q.clone(), table.counts, schedule.sigma, exact);
            measured.push(measured_entry(&m, contributions.len()));
            structure = merge_into(&structure, &q);
            new_queries.push(q);
            measurements.push(m);
        }

        if private {
            let mut rng = StreamKey::new(config.seed, t as u64, SERVER, Purpose::Measure)
                .with_index(1)
                .rng();
            let exact: f64 = participants.iter().map(|&k| clients[k].len() as f64).sum();
            let sums = one_way_sums
                .get_or_insert_with(|| ones.iter().map(|q| vec![0.0; q.cells()]).collect());
            for (j, q) in ones.iter().enumerate() {
                let contributions = participants
                    .iter()
                    .map(|&k| {
                        Ok(Contribution {
                            client: k,
                            values: evaluate_marginal(&clients[k], q)?.counts,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sigma = if noise { schedule.sigma } else { 0.0 };
                let table =
                    secagg_round(q, &contributions, sigma, t, protocol, &mut comms, &mut rng)?;
                for (acc_v, v) in sums[j].iter_mut().zip(&table.counts) {
                    *acc_v += v;
                }
                if aug.filter_combine {
                    let m = server_measurement(t, q.clone(), table.counts, schedule.sigma, exact);
                    measured.push(measured_entry(&m, contributions.len()));
                    measurements.push(m);
                }
            }
        }

        let before: Vec<Vec<f64>> = new_queries
            .iter()
            .map(|q| model.answer(q).map(|a| a.counts))
            .collect::<Result<_>>()?;
        model = fit(&measurements, &domain, &train)?;
        let mut annealed = false;
        if config.rounds.is_none() && !last {
            for (q, b) in new_queries.iter().zip(&before) {
                if stalled(b, &model.answer(q)?.counts, schedule.sigma) {
                    annealed = true;
                    break;
                }
            }
            schedule = crate::dp::anneal_step(schedule, annealed);
        }
        log.push(FedRoundLog {
            round: t,
            participants,
            skipped: false,
            selections,
            measured,
            dropped,
            sigma: used.sigma,
            epsilon: used.epsilon,
            rho_used: acc.rho_used(),
            annealed,
            error: shared.error(&model)?,
        });
        if last {
            break;
        }
    }
    let model = fit(
        &measurements,
        &domain,
        &fit_options(config.max_model_bytes, config.final_iterations),
    )?;
    Ok(FedOutput {
        model,
        measurements,
        log,
        ledger: acc.to_file(),
        comms,
    })
}

/// Component structure after adding `q`.
fn merge_into(structure: &[Vec<usize>], q: &MarginalQuery) -> Vec<Vec<usize>> {
    let mut merged: Vec<usize> = q.attrs().to_vec();
    let mut out = Vec::new();
    for g in structure {
        if g.iter().any(|a| q.attrs().binary_search(a).is_ok()) {
            merged.extend_from_slice(g);
        } else {
            out.push(g.clone());
        }
    }
    merged.sort_unstable();
    merged.dedup();
    out.push(merged);
    out
}
