//! zCDP accounting and the two mechanisms the protocols use.
//!
//! Costs: a Gaussian measurement with scale σ (sensitivity 1) costs
//! 1/(2σ²); an exponential-mechanism selection with parameter ε costs ε²/8.
//! All charges go through a [`PrivacyAccountant`], which refuses any charge
//! that would push the running total past ρ_total.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::MarginalTable;
use crate::error::{Error, Result};

/// δ achieved by a ρ-zCDP mechanism at a given ε, using the tight conversion
/// `min_{α>1} exp((α−1)(αρ−ε)) / (α−1) · (1 − 1/α)^α`.
pub fn delta_for_rho(rho: f64, epsilon: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    let log_delta =
        |a: f64| (a - 1.0) * (a * rho - epsilon) - (a - 1.0).ln() + a * (1.0 - 1.0 / a).ln();
    let (mut lo, mut hi) = (1.0 + 1e-12, 10.0 / rho + 2.0);
    // golden-section search; the objective is unimodal in α
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (log_delta(x1), log_delta(x2));
    while hi - lo > 1e-9 * hi {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = log_delta(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = log_delta(x2);
        }
    }
    let best = log_delta(0.5 * (lo + hi)).min(f1).min(f2);
    best.exp().min(1.0)
}

/// Largest ρ such that ρ-zCDP implies (ε, δ)-DP.
pub fn rho_from_eps_delta(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must be in (0,1), got {delta}"
        )));
    }
    let mut lo = 0.0;
    let mut hi = epsilon;
    while delta_for_rho(hi, epsilon) <= delta {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if delta_for_rho(mid, epsilon) <= delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    Gaussian,
    Exponential,
    /// Budget held for a round that ran no mechanism (e.g. nobody was sampled).
    Reserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub mechanism: MechanismKind,
    /// Gaussian scale σ or exponential-mechanism ε.
    pub parameter: f64,
    /// Number of mechanism invocations covered by this entry.
    pub count: usize,
    pub rho: f64,
}

/// Serialized form of an accountant, used for audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerFile {
    pub epsilon: f64,
    pub delta: f64,
    pub rho_total: f64,
    pub rho_used: f64,
    pub entries: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerAudit {
    pub replayed: f64,
    pub recorded: f64,
    pub rho_total: f64,
    pub consistent: bool,
    pub within_budget: bool,
}

impl LedgerFile {
    /// Re-adds every entry and checks it against the recorded total and the budget.
    pub fn audit(&self) -> LedgerAudit {
        let replayed: f64 = self.entries.iter().map(|e| e.rho).sum();
        let scale = self.rho_total.max(f64::MIN_POSITIVE);
        LedgerAudit {
            replayed,
            recorded: self.rho_used,
            rho_total: self.rho_total,
            consistent: (replayed - self.rho_used).abs() <= 1e-9 * scale,
            within_budget: replayed <= self.rho_total * (1.0 + 1e-9),
        }
    }
}

/// Running zCDP budget. Charges that would exceed ρ_total are refused.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyAccountant {
    epsilon: f64,
    delta: f64,
    rho_total: f64,
    rho_used: f64,
    entries: Vec<LedgerEntry>,
}

// Relative slack for floating-point sums that should land exactly on ρ_total.
const SLACK: f64 = 1e-9;

impl PrivacyAccountant {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let rho_total = rho_from_eps_delta(epsilon, delta)?;
        Ok(PrivacyAccountant {
            epsilon,
            delta,
            rho_total,
            rho_used: 0.0,
            entries: Vec::new(),
        })
    }

    /// An accountant with ρ_total given directly (ε and δ recorded as NaN).
    pub fn with_rho(rho_total: f64) -> Result<Self> {
        if !(rho_total > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "rho must be positive, got {rho_total}"
            )));
        }
        Ok(PrivacyAccountant {
            epsilon: f64::NAN,
            delta: f64::NAN,
            rho_total,
            rho_used: 0.0,
            entries: Vec::new(),
        })
    }

    pub fn rho_total(&self) -> f64 {
        self.rho_total
    }

    pub fn rho_used(&self) -> f64 {
        self.rho_used
    }

    pub fn remaining(&self) -> f64 {
        (self.rho_total - self.rho_used).max(0.0)
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// True once the remaining budget is negligible.
    pub fn exhausted(&self) -> bool {
        self.rho_total - self.rho_used <= SLACK * self.rho_total
    }

    pub fn can_afford(&self, rho: f64) -> bool {
        self.rho_used + rho <= self.rho_total * (1.0 + SLACK)
    }

    fn charge(&mut self, entry: LedgerEntry) -> Result<()> {
        if !self.can_afford(entry.rho) {
            return Err(Error::BudgetExhausted {
                requested: entry.rho,
                remaining: self.remaining(),
            });
        }
        self.rho_used += entry.rho;
        self.entries.push(entry);
        Ok(())
    }

    pub fn charge_gaussian(&mut self, round: usize, sigma: f64, count: usize) -> Result<f64> {
        let rho = count as f64 / (2.0 * sigma * sigma);
        self.charge(LedgerEntry {
            round,
            mechanism: MechanismKind::Gaussian,
            parameter: sigma,
            count,
            rho,
        })?;
        Ok(rho)
    }

    pub fn charge_exponential(&mut self, round: usize, epsilon: f64, count: usize) -> Result<f64> {
        let rho = count as f64 * epsilon * epsilon / 8.0;
        self.charge(LedgerEntry {
            round,
            mechanism: MechanismKind::Exponential,
            parameter: epsilon,
            count,
            rho,
        })?;
        Ok(rho)
    }

    pub fn reserve(&mut self, round: usize, rho: f64) -> Result<()> {
        self.charge(LedgerEntry {
            round,
            mechanism: MechanismKind::Reserved,
            parameter: 0.0,
            count: 0,
            rho,
        })
    }

    pub fn to_file(&self) -> LedgerFile {
        LedgerFile {
            epsilon: self.epsilon,
            delta: self.delta,
            rho_total: self.rho_total,
            rho_used: self.rho_used,
            entries: self.entries.clone(),
        }
    }
}

/// Adds i.i.d. N(0, scale²) to every value.
pub fn add_gaussian_noise<R: Rng + ?Sized>(values: &mut [f64], scale: f64, rng: &mut R) {
    if scale <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, scale).expect("finite positive scale");
    for v in values {
        *v += normal.sample(rng);
    }
}

/// Charges 1/(2σ²) and returns `table + Δ₂·N(0, σ²)` per cell.
pub fn gaussian_mechanism<R: Rng + ?Sized>(
    accountant: &mut PrivacyAccountant,
    round: usize,
    table: &MarginalTable,
    sigma: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<MarginalTable> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    accountant.charge_gaussian(round, sigma, 1)?;
    let mut out = table.clone();
    add_gaussian_noise(&mut out.counts, sensitivity * sigma, rng);
    Ok(out)
}

fn check_selection(scores: &[f64], epsilon: f64, sensitivity: f64) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidParameter(
            "no candidates to select from".into(),
        ));
    }
    if !(epsilon > 0.0) || !(sensitivity > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon ({epsilon}) and sensitivity ({sensitivity}) must be positive"
        )));
    }
    Ok(())
}

/// Samples index i with probability ∝ exp(ε·u_i / (2Δ)) using Gumbel-max.
///
/// Scores are shifted by their maximum before scaling. One Gumbel draw is
/// consumed per candidate, in order.
pub fn exponential_mechanism<R: Rng + ?Sized>(
    scores: &[f64],
    epsilon: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<usize> {
    check_selection(scores, epsilon, sensitivity)?;
    let scale = epsilon / (2.0 * sensitivity);
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &u) in scores.iter().enumerate() {
        let key = scale * (u - top) + gumbel.sample(rng);
        if key > best.1 {
            best = (i, key);
        }
    }
    Ok(best.0)
}

/// Closed-form selection distribution of [`exponential_mechanism`].
pub fn selection_probabilities(scores: &[f64], epsilon: f64, sensitivity: f64) -> Result<Vec<f64>> {
    check_selection(scores, epsilon, sensitivity)?;
    let scale = epsilon / (2.0 * sensitivity);
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|&u| (scale * (u - top)).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Index of the largest score (first on ties).
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// T·s selections plus T·s + d measurements (naive, oracle, and the
    /// fixed-round central and distributed runs with s = 1).
    Fixed,
    /// T·s selections plus T·(s + d) measurements: every feature is re-measured each round.
    FixedWithOneWays,
    /// Adaptive rounds; σ and ε change via annealing and the final-round rule.
    Anneal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma: f64,
    pub epsilon: f64,
    pub mode: ScheduleMode,
}

/// Constant per-round noise for `rounds` global rounds of `local_rounds` steps each.
pub fn flaim_schedule(
    rounds: usize,
    local_rounds: usize,
    d: usize,
    rho: f64,
    r: f64,
    mode: ScheduleMode,
) -> Result<NoiseSchedule> {
    if rounds == 0 || local_rounds == 0 {
        return Err(Error::InvalidParameter(
            "rounds and local rounds must be at least 1".into(),
        ));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "budget fraction r must be in (0,1), got {r}"
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let (t, s, d) = (rounds as f64, local_rounds as f64, d as f64);
    let measurements = match mode {
        ScheduleMode::Fixed => t * s + d,
        ScheduleMode::FixedWithOneWays => t * (s + d),
        ScheduleMode::Anneal => {
            return Err(Error::InvalidParameter(
                "annealing schedules start from central_schedule_init".into(),
            ))
        }
    };
    Ok(NoiseSchedule {
        sigma: (measurements / (2.0 * r * rho)).sqrt(),
        epsilon: (8.0 * (1.0 - r) * rho / (t * s)).sqrt(),
        mode,
    })
}

/// Starting point for annealing: σ₀² = m·d/(0.9ρ), ε₀ = √(8·0.1·ρ/(m·d)),
/// with `round_factor` m = 16 centrally and 8 in the federated protocols.
pub fn central_schedule_init(d: usize, rho_total: f64, round_factor: usize) -> NoiseSchedule {
    let rounds = (round_factor * d) as f64;
    NoiseSchedule {
        sigma: (rounds / (0.9 * rho_total)).sqrt(),
        epsilon: (8.0 * 0.1 * rho_total / rounds).sqrt(),
        mode: ScheduleMode::Anneal,
    }
}

/// Halves σ and doubles ε when the last measurement barely moved the model.
pub fn anneal_step(schedule: NoiseSchedule, stalled: bool) -> NoiseSchedule {
    if stalled {
        NoiseSchedule {
            sigma: schedule.sigma / 2.0,
            epsilon: schedule.epsilon * 2.0,
            ..schedule
        }
    } else {
        schedule
    }
}

/// Expected L1 norm of n cells of N(0, σ²) noise: √(2/π)·σ·n.
pub fn expected_noise_l1(sigma: f64, cells: usize) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * sigma * cells as f64
}

/// If fewer than two more rounds fit in the remaining budget, returns a
/// schedule that spends exactly the remainder in one last round (90% on
/// measurements, 10% on selections).
///
/// A round is `measurements` Gaussian draws and `selections` exponential draws.
pub fn final_round_adjust(
    remaining: f64,
    schedule: NoiseSchedule,
    measurements: f64,
    selections: f64,
) -> Option<NoiseSchedule> {
    let round_cost = measurements / (2.0 * schedule.sigma * schedule.sigma)
        + selections * schedule.epsilon * schedule.epsilon / 8.0;
    if remaining <= 2.0 * round_cost {
        let remaining = remaining.max(0.0);
        Some(NoiseSchedule {
            sigma: (measurements / (2.0 * 0.9 * remaining)).sqrt(),
            epsilon: (8.0 * 0.1 * remaining / selections).sqrt(),
            mode: schedule.mode,
        })
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_relative_eq;

    #[test]
    fn conversion_is_monotone_in_epsilon() {
        let a = rho_from_eps_delta(1.0, 1e-9).unwrap();
        let b = rho_from_eps_delta(2.0, 1e-9).unwrap();
        assert!(b > a);
        assert!(rho_from_eps_delta(0.0, 1e-9).is_err());
        assert!(rho_from_eps_delta(1.0, 1.0).is_err());
    }

    #[test]
    fn conversion_returns_the_supremum() {
        for &(eps, delta) in &[(1.0, 1e-9), (0.5, 1e-6), (5.0, 1e-9), (1e6, 1e-9)] {
            let rho = rho_from_eps_delta(eps, delta).unwrap();
            assert!(delta_for_rho(rho, eps) <= delta);
            assert!(delta_for_rho(rho * (1.0 + 1e-6), eps) > delta, "eps={eps}");
        }
    }

    #[test]
    fn gaussian_charge_is_half_inverse_variance() {
        let mut acc = PrivacyAccountant::with_rho(10.0).unwrap();
        assert_eq!(acc.charge_gaussian(0, 1.0, 1).unwrap(), 0.5);
        assert_eq!(acc.charge_exponential(0, 2.0, 1).unwrap(), 0.5);
        assert_eq!(acc.rho_used(), 1.0);
    }

    #[test]
    fn accountant_refuses_over_budget() {
        let mut acc = PrivacyAccountant::with_rho(0.4).unwrap();
        let err = acc.charge_gaussian(0, 1.0, 1).unwrap_err();
        assert!(matches!(err, Error::BudgetExhausted { remaining, .. } if remaining == 0.4));
        assert_eq!(acc.rho_used(), 0.0);
        let q = crate::domain::MarginalQuery::new(
            vec![0],
            &crate::domain::Domain::from_sizes(&[2]).unwrap(),
        )
        .unwrap();
        let t = MarginalTable::zeros(q);
        let mut rng = stream(0, 0, 0, Purpose::Measure);
        assert!(gaussian_mechanism(&mut acc, 0, &t, 1.0, 1.0, &mut rng).is_err());
        assert!(acc.entries().is_empty());
    }

    #[test]
    fn ledger_audit_replays_entries() {
        let mut acc = PrivacyAccountant::new(1.0, 1e-9).unwrap();
        acc.charge_gaussian(1, 20.0, 3).unwrap();
        acc.charge_exponential(1, 0.1, 1).unwrap();
        let file = acc.to_file();
        let json = serde_json::to_string(&file).unwrap();
        let back: LedgerFile = serde_json::from_str(&json).unwrap();
        let audit = back.audit();
        assert!(audit.consistent && audit.within_budget);
        let mut tampered = back.clone();
        tampered.entries[0].rho *= 2.0;
        assert!(!tampered.audit().consistent);
    }

    #[test]
    fn exponential_single_candidate() {
        let mut rng = stream(3, 0, 0, Purpose::Select);
        for _ in 0..100 {
            assert_eq!(
                exponential_mechanism(&[-5.0], 0.3, 1.0, &mut rng).unwrap(),
                0
            );
        }
        assert!(exponential_mechanism(&[], 0.3, 1.0, &mut rng).is_err());
    }

    #[test]
    fn closed_form_two_candidates() {
        let (eps, delta) = (0.7, 3.0);
        let u = [0.0, 2.0 * delta / eps * 3f64.ln()];
        let p = selection_probabilities(&u, eps, delta).unwrap();
        assert_relative_eq!(p[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(p[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn two_candidate_frequencies() {
        let (eps, delta) = (0.7, 3.0);
        let u = [0.0, 2.0 * delta / eps * 3f64.ln()];
        let mut rng = stream(11, 0, 0, Purpose::Select);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| exponential_mechanism(&u, eps, delta, &mut rng).unwrap() == 1)
            .count();
        assert!((hits as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn shift_invariance_with_identical_stream() {
        let u = [3.0, -1.0, 7.0, 2.0, 5.0];
        for &c in &[1.0, -40.0, 1024.0] {
            let shifted: Vec<f64> = u.iter().map(|x| x + c).collect();
            let mut r1 = stream(5, 0, 0, Purpose::Select);
            let mut r2 = stream(5, 0, 0, Purpose::Select);
            for _ in 0..1000 {
                assert_eq!(
                    exponential_mechanism(&u, 1.3, 2.0, &mut r1).unwrap(),
                    exponential_mechanism(&shifted, 1.3, 2.0, &mut r2).unwrap()
                );
            }
        }
    }

    #[test]
    fn gaussian_noise_has_zero_mean() {
        let mut rng = stream(2, 0, 0, Purpose::Measure);
        let n = 100_000;
        let sigma = 3.0;
        let mut v = vec![0.0; n];
        add_gaussian_noise(&mut v, sigma, &mut rng);
        let mean = v.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn schedule_examples() {
        let naive = flaim_schedule(10, 1, 14, 1.0, 0.9, ScheduleMode::Fixed).unwrap();
        assert_relative_eq!(naive.sigma, (24.0f64 / 1.8).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(naive.sigma, 3.6515, epsilon = 1e-4);
        let private = flaim_schedule(10, 1, 14, 1.0, 0.9, ScheduleMode::FixedWithOneWays).unwrap();
        assert_relative_eq!(private.sigma, 9.1287, epsilon = 1e-4);
        assert_relative_eq!(naive.epsilon, (0.08f64).sqrt(), max_relative = 1e-12);
        assert!(flaim_schedule(0, 1, 14, 1.0, 0.9, ScheduleMode::Fixed).is_err());
        assert!(flaim_schedule(10, 1, 14, 1.0, 1.0, ScheduleMode::Fixed).is_err());
    }

    #[test]
    fn schedule_spends_rho_exactly() {
        for &(t, s, d, rho, r) in &[
            (10, 1, 14, 1.0, 0.9),
            (7, 3, 5, 0.02, 0.5),
            (96, 4, 55, 3.3, 0.75),
        ] {
            let a = flaim_schedule(t, s, d, rho, r, ScheduleMode::Fixed).unwrap();
            let spent = (t * s) as f64 * a.epsilon.powi(2) / 8.0
                + (t * s + d) as f64 / (2.0 * a.sigma.powi(2));
            assert_relative_eq!(spent, rho, max_relative = 1e-12);
            let b = flaim_schedule(t, s, d, rho, r, ScheduleMode::FixedWithOneWays).unwrap();
            let spent = (t * s) as f64 * b.epsilon.powi(2) / 8.0
                + (t * (s + d)) as f64 / (2.0 * b.sigma.powi(2));
            assert_relative_eq!(spent, rho, max_relative = 1e-12);
        }
    }

    #[test]
    fn central_init_examples() {
        let s = central_schedule_init(14, 0.9, 16);
        assert_relative_eq!(s.sigma.powi(2), 224.0 / 0.81, max_relative = 1e-12);
        assert_relative_eq!(s.sigma.powi(2), 276.54, epsilon = 1e-2);
        let twice = central_schedule_init(28, 0.9, 16);
        assert_relative_eq!(
            twice.sigma.powi(2) / s.sigma.powi(2),
            2.0,
            max_relative = 1e-12
        );
        let e = central_schedule_init(16, 1.0, 16);
        assert_relative_eq!(e.epsilon, (0.8f64 / 256.0).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(e.epsilon, 0.0559, epsilon = 1e-4);
    }

    #[test]
    fn anneal_examples() {
        let s = NoiseSchedule {
            sigma: 4.0,
            epsilon: 0.1,
            mode: ScheduleMode::Anneal,
        };
        assert_eq!(anneal_step(s, false), s);
        let a = anneal_step(s, true);
        assert_eq!((a.sigma, a.epsilon), (2.0, 0.2));
        assert_eq!(anneal_step(a, true).sigma, 1.0);
    }

    #[test]
    fn final_round_examples() {
        let s = NoiseSchedule {
            sigma: 1.0,
            epsilon: 1.0,
            mode: ScheduleMode::Anneal,
        };
        let f = final_round_adjust(0.05, s, 1.0, 1.0).unwrap();
        assert_relative_eq!(f.sigma.powi(2), 1.0 / 0.09, max_relative = 1e-12);
        assert_relative_eq!(f.epsilon, 0.2, max_relative = 1e-12);
        let spent = 1.0 / (2.0 * f.sigma.powi(2)) + f.epsilon.powi(2) / 8.0;
        assert_relative_eq!(spent, 0.05, max_relative = 1e-12);
        assert!(final_round_adjust(100.0, s, 1.0, 1.0).is_none());
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
