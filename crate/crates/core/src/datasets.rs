//! Bundled synthetic datasets: SynthFS (feature skew via Zipf means) and an
//! Adult-shaped census surrogate.

use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{DiscreteDataset, Domain};
use crate::error::{Error, Result};
use crate::partition::ClientPartition;
use crate::rng::{stream, Purpose, SERVER};
use crate::schema::{bin_index, DEFAULT_BINS};

/// Fraction of rows held out for evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFsConfig {
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::rows_per_client")]
    pub rows_per_client: usize,
    #[serde(default = "defaults::features")]
    pub features: usize,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::n_zipf")]
    pub n_zipf: usize,
    #[serde(default = "defaults::bins")]
    pub bins: usize,
}

mod defaults {
    pub fn clients() -> usize {
        100
    }
    pub fn rows_per_client() -> usize {
        500
    }
    pub fn features() -> usize {
        10
    }
    pub fn beta() -> f64 {
        1.0
    }
    pub fn n_zipf() -> usize {
        40
    }
    pub fn bins() -> usize {
        super::DEFAULT_BINS
    }
}

impl Default for SynthFsConfig {
    fn default() -> Self {
        SynthFsConfig {
            clients: defaults::clients(),
            rows_per_client: defaults::rows_per_client(),
            features: defaults::features(),
            beta: defaults::beta(),
            n_zipf: defaults::n_zipf(),
            bins: defaults::bins(),
        }
    }
}

/// A dataset with its train/holdout split and the train-row partition.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub train: DiscreteDataset,
    pub holdout: DiscreteDataset,
    pub partition: ClientPartition,
}

/// Splits off a random `fraction` of rows as holdout, keeping row order in both parts.
pub fn holdout_split(data: &DiscreteDataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = data.len();
    let m = ((n as f64) * fraction).round() as usize;
    let mut rng = stream(seed, 0, SERVER, Purpose::Split);
    let mut held = vec![false; n];
    for i in index::sample(&mut rng, n, m.min(n)) {
        held[i] = true;
    }
    let (h, t): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| held[i]);
    (t, h)
}

/// Public binning range for SynthFS features: the Zipf support padded by four standard deviations.
pub fn synthfs_range(n_zipf: usize) -> (f64, f64) {
    (1.0 - 4.0, n_zipf as f64 + 4.0)
}

/// SynthFS: client k draws a mean μ_m^k ∝ r^(−β) on {1..n_zipf} for each
/// feature m, then `rows_per_client` values from N(μ_m^k, 1), binned
/// uniformly on a public range. 10% of rows are held out.
pub fn synthfs(config: &SynthFsConfig, seed: u64) -> Result<FederatedDataset> {
    let SynthFsConfig {
        clients,
        rows_per_client,
        features,
        beta,
        n_zipf,
        bins,
    } = *config;
    if !(beta > 0.0) || n_zipf == 0 || clients == 0 || features == 0 || bins == 0 {
        return Err(Error::InvalidParameter(format!(
            "invalid SynthFS parameters {config:?}"
        )));
    }
    let domain = Domain::new(
        (0..features).map(|m| format!("f{m}")).collect(),
        vec![bins; features],
    )?;
    let zipf = WeightedIndex::new((1..=n_zipf).map(|r| (r as f64).powf(-beta)))
        .map_err(|e| Error::InvalidParameter(format!("zipf weights: {e}")))?;
    let (lo, hi) = synthfs_range(n_zipf);
    let unit = Normal::new(0.0, 1.0).expect("standard normal");
    let mut values = Vec::with_capacity(clients * rows_per_client * features);
    let mut owner = Vec::with_capacity(clients * rows_per_client);
    for k in 0..clients {
        let mut rng = stream(seed, 0, k as u64, Purpose::Dataset);
        let means: Vec<f64> = (0..features)
            .map(|_| (zipf.sample(&mut rng) + 1) as f64)
            .collect();
        for _ in 0..rows_per_client {
            for &mu in &means {
                values.push(bin_index(mu + unit.sample(&mut rng), lo, hi, bins).0);
            }
            owner.push(k);
        }
    }
    let full = DiscreteDataset::from_flat(domain, values)?;
    let (train_idx, hold_idx) = holdout_split(&full, HOLDOUT_FRACTION, seed);
    let partition = ClientPartition::new(train_idx.iter().map(|&i| owner[i]).collect(), clients)?;
    Ok(FederatedDataset {
        train: full.subset(&train_idx),
        holdout: full.subset(&hold_idx),
        partition,
    })
}

/// Attribute index of the income class in [`adult_surrogate`].
pub const ADULT_CLASS_ATTR: usize = 13;
/// Default surrogate size, close to the cleaned census extract.
pub const ADULT_ROWS: usize = 45_222;

const ADULT_ATTRS: [(&str, usize); 14] = [
    ("age", 32),
    ("workclass", 9),
    ("education", 16),
    ("education-num", 16),
    ("marital-status", 7),
    ("occupation", 15),
    ("relationship", 6),
    ("race", 5),
    ("sex", 2),
    ("capital-gain", 32),
    ("capital-loss", 32),
    ("hours-per-week", 32),
    ("native-country", 42),
    ("income", 2),
];

pub fn adult_domain() -> Domain {
    Domain::new(
        ADULT_ATTRS.iter().map(|(n, _)| n.to_string()).collect(),
        ADULT_ATTRS.iter().map(|(_, s)| *s).collect(),
    )
    .expect("static domain")
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> u32 {
    WeightedIndex::new(weights)
        .expect("static weights")
        .sample(rng) as u32
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A census-like table with the shape of the Adult extract: 14 attributes,
/// continuous ones in 32 bins, a binary income class correlated with age,
/// education, sex, marital status and hours worked.
pub fn adult_surrogate(rows: usize, seed: u64) -> DiscreteDataset {
    let domain = adult_domain();
    let mut rng = stream(seed, 0, SERVER, Purpose::Dataset);
    let age_dist = Gamma::<f64>::new(2.6, 8.0).expect("gamma");
    let hours_noise = Normal::<f64>::new(0.0, 9.0).expect("normal");
    let gain_dist = LogNormal::<f64>::new(8.3, 1.1).expect("lognormal");
    let loss_dist = Normal::<f64>::new(1900.0, 350.0).expect("normal");
    let edu_weights = [
        0.2, 0.5, 1.0, 2.0, 1.5, 2.8, 3.6, 1.3, 32.6, 21.9, 4.3, 3.3, 16.4, 5.5, 1.7, 1.2,
    ];
    let race_weights = [86.0, 9.3, 2.9, 1.0, 0.8];
    let country_weights: Vec<f64> = (0..42)
        .map(|c| {
            if c == 0 {
                91.0
            } else {
                9.0 / (c as f64).powf(1.1) / 4.0
            }
        })
        .collect();
    let mut values = Vec::with_capacity(rows * 14);
    for _ in 0..rows {
        let male = rng.random::<f64>() < 0.675;
        let age = (17.0 + age_dist.sample(&mut rng)).min(90.0);
        let edu = pick(&edu_weights, &mut rng);
        let edu_level = edu as f64 / 15.0;
        // marital: 0 divorced, 1 married-AF, 2 married-civ, 3 married-absent, 4 never, 5 separated, 6 widowed
        let marital = if age < 24.0 {
            pick(&[3.0, 0.1, 8.0, 0.5, 85.0, 1.5, 0.1], &mut rng)
        } else if age < 60.0 {
            pick(&[15.0, 0.1, 52.0, 1.3, 22.0, 3.5, 1.5], &mut rng)
        } else {
            pick(&[12.0, 0.0, 55.0, 1.0, 5.0, 2.0, 25.0], &mut rng)
        };
        let married = marital == 1 || marital == 2;
        // relationship: 0 husband, 1 not-in-family, 2 other-relative, 3 own-child, 4 unmarried, 5 wife
        let relationship = if married {
            if male {
                0
            } else {
                5
            }
        } else if marital == 4 && age < 26.0 {
            pick(&[0.0, 30.0, 8.0, 60.0, 2.0, 0.0], &mut rng)
        } else {
            pick(&[0.0, 55.0, 6.0, 8.0, 31.0, 0.0], &mut rng)
        };
        let race = pick(&race_weights, &mut rng);
        // occupation leans towards professional codes with education, manual ones for men
        let occupation = {
            let mut w = [1.0; 15];
            for (o, slot) in w.iter_mut().enumerate() {
                let prof = o as f64 / 14.0;
                *slot = (3.0 * edu_level * prof + 0.3).powi(2)
                    + if male && o % 3 == 0 { 0.8 } else { 0.2 };
            }
            pick(&w, &mut rng)
        };
        let workclass = if occupation >= 12 && rng.random::<f64>() < 0.3 {
            pick(&[0.0, 1.0, 3.0, 3.0, 1.0, 1.0, 0.0, 0.0, 0.0], &mut rng)
        } else {
            pick(&[74.0, 8.0, 4.0, 3.0, 6.0, 3.5, 0.05, 0.05, 1.5], &mut rng)
        };
        let mut hours = 40.0 + hours_noise.sample(&mut rng) + if male { 4.0 } else { -3.0 };
        if !(22.0..=65.0).contains(&age) {
            hours -= 12.0;
        }
        let hours = hours.clamp(1.0, 99.0);
        let score = -7.2
            + 0.045 * age.min(60.0)
            + 4.6 * edu_level
            + if male { 0.8 } else { 0.0 }
            + if married { 2.0 } else { 0.0 }
            + 0.035 * (hours - 40.0);
        let rich = rng.random::<f64>() < sigmoid(score);
        let gain = if rng.random::<f64>() < if rich { 0.22 } else { 0.04 } {
            gain_dist.sample(&mut rng).min(99_999.0)
        } else {
            0.0
        };
        let loss = if rng.random::<f64>() < if rich { 0.09 } else { 0.03 } {
            loss_dist.sample(&mut rng).clamp(0.0, 4356.0)
        } else {
            0.0
        };
        let country = pick(&country_weights, &mut rng);
        values.extend_from_slice(&[
            bin_index(age, 17.0, 90.0, 32).0,
            workclass,
            edu,
            edu,
            marital,
            occupation,
            relationship,
            race,
            male as u32,
            bin_index(gain, 0.0, 99_999.0, 32).0,
            bin_index(loss, 0.0, 4356.0, 32).0,
            bin_index(hours, 1.0, 99.0, 32).0,
            country,
            rich as u32,
        ]);
    }
    DiscreteDataset::from_flat(domain, values).expect("codes within the static domain")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{evaluate_marginal, MarginalQuery};
    use crate::partition::heterogeneity_report;
    use crate::workload::random_workload;

    #[test]
    fn synthfs_shape_and_split() {
        let cfg = SynthFsConfig::default();
        let fd = synthfs(&cfg, 1).unwrap();
        assert_eq!(fd.train.len() + fd.holdout.len(), 50_000);
        assert_eq!(fd.holdout.len(), 5_000);
        assert_eq!(fd.partition.rows(), fd.train.len());
        assert_eq!(fd.partition.clients(), 100);
        assert_eq!(fd.train.domain().len(), 10);
        assert_eq!(synthfs(&cfg, 1).unwrap(), fd);
    }

    #[test]
    fn large_beta_collapses_means() {
        let cfg = SynthFsConfig {
            beta: 60.0,
            clients: 10,
            rows_per_client: 100,
            ..Default::default()
        };
        let fd = synthfs(&cfg, 2).unwrap();
        let (lo, hi) = synthfs_range(cfg.n_zipf);
        let (one, _) = bin_index(1.0, lo, hi, cfg.bins);
        let q = MarginalQuery::new(vec![0], fd.train.domain()).unwrap();
        let t = evaluate_marginal(&fd.train, &q).unwrap().normalized();
        // N(1,1) stays within a couple of bins of μ = 1
        let near: f64 = t[one.saturating_sub(2) as usize..=(one as usize + 2)]
            .iter()
            .sum();
        assert!(near > 0.99, "{near}");
    }

    #[test]
    fn smaller_beta_means_more_skew() {
        let het = |beta| {
            let cfg = SynthFsConfig {
                beta,
                clients: 20,
                rows_per_client: 200,
                features: 6,
                ..Default::default()
            };
            let fd = synthfs(&cfg, 3).unwrap();
            let w = random_workload(fd.train.domain(), 2, 10, 3).unwrap();
            heterogeneity_report(&fd.train, &fd.partition, w.queries())
                .unwrap()
                .mean_per_query
        };
        assert!(het(1.0) > het(5.0));
    }

    #[test]
    fn surrogate_has_expected_structure() {
        let data = adult_surrogate(20_000, 7);
        assert_eq!(data.domain().len(), 14);
        let income = MarginalQuery::new(vec![ADULT_CLASS_ATTR], data.domain()).unwrap();
        let p = evaluate_marginal(&data, &income).unwrap().normalized();
        assert!(p[1] > 0.1 && p[1] < 0.45, "{p:?}");
        // education and education-num agree exactly
        assert!(data.rows().all(|r| r[2] == r[3]));
        assert_eq!(adult_surrogate(100, 1), adult_surrogate(100, 1));
    }
}
