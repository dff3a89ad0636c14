//! Client partitions and the query-skew statistic τ_k(q).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::domain::{l1_distance, normalize, DiscreteDataset, MarginalQuery};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, SERVER};

/// Row → client assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    assignments: Vec<usize>,
    clients: usize,
}

impl ClientPartition {
    pub fn new(assignments: Vec<usize>, clients: usize) -> Result<Self> {
        if clients == 0 {
            return Err(Error::InvalidParameter("need at least one client".into()));
        }
        if let Some(&bad) = assignments.iter().find(|&&k| k >= clients) {
            return Err(Error::InvalidParameter(format!(
                "client id {bad} out of range for {clients} clients"
            )));
        }
        Ok(ClientPartition {
            assignments,
            clients,
        })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn rows(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.clients];
        for &k in &self.assignments {
            sizes[k] += 1;
        }
        sizes
    }

    /// Row indices per client, in row order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clients];
        for (i, &k) in self.assignments.iter().enumerate() {
            out[k].push(i);
        }
        out
    }

    /// Local datasets D_1 … D_K.
    pub fn split(&self, data: &DiscreteDataset) -> Result<Vec<DiscreteDataset>> {
        self.check_covers(data)?;
        Ok(self.members().iter().map(|m| data.subset(m)).collect())
    }

    pub fn check_covers(&self, data: &DiscreteDataset) -> Result<()> {
        if self.rows() != data.len() {
            return Err(Error::InvalidParameter(format!(
                "partition has {} rows, dataset has {}",
                self.rows(),
                data.len()
            )));
        }
        Ok(())
    }

    /// One client id per line, aligned with row order.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let mut text = String::with_capacity(self.assignments.len() * 3);
        for k in &self.assignments {
            text.push_str(&k.to_string());
            text.push('\n');
        }
        out.write_all(text.as_bytes())
            .map_err(|e| Error::io("partition", e))
    }

    /// Reads a partition file. `clients` defaults to max id + 1.
    pub fn read(path: &Path, clients: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ids = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            ids.push(line.parse::<usize>().map_err(|_| Error::InvalidRow {
                row: i,
                reason: format!("'{line}' is not a client id"),
            })?);
        }
        let k = clients.unwrap_or_else(|| ids.iter().max().map_or(1, |m| m + 1));
        ClientPartition::new(ids, k)
    }
}

/// Uniformly random row → client assignment.
pub fn partition_iid(rows: usize, clients: usize, seed: u64) -> Result<ClientPartition> {
    if clients == 0 {
        return Err(Error::InvalidParameter("need at least one client".into()));
    }
    let mut rng = stream(seed, 0, SERVER, Purpose::Partition);
    let assignments = (0..rows).map(|_| rng.random_range(0..clients)).collect();
    ClientPartition::new(assignments, clients)
}

/// Symmetric Dirichlet(β) draw over `k` outcomes via normalised Gamma variates.
pub fn dirichlet<R: Rng + ?Sized>(k: usize, beta: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("positive shape");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|x| *x /= sum);
    } else {
        // every draw underflowed (tiny β): all mass on one outcome
        draws.iter_mut().for_each(|x| *x = 0.0);
        draws[rng.random_range(0..k)] = 1.0;
    }
    draws
}

/// Label skew: rows of each class are spread over clients by a Dirichlet(β) draw.
pub fn partition_label_skew(
    data: &DiscreteDataset,
    clients: usize,
    class_attr: usize,
    beta: f64,
    seed: u64,
) -> Result<ClientPartition> {
    if clients == 0 {
        return Err(Error::InvalidParameter("need at least one client".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if class_attr >= data.domain().len() {
        return Err(Error::AttributeOutOfRange {
            index: class_attr,
            width: data.domain().len(),
        });
    }
    let mut rng = stream(seed, 0, SERVER, Purpose::Partition);
    let classes = data.domain().size(class_attr);
    let cumulative: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let p = dirichlet(clients, beta, &mut rng);
            p.iter()
                .scan(0.0, |acc, x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let assignments = data
        .rows()
        .map(|row| {
            let cdf = &cumulative[row[class_attr] as usize];
            let u: f64 = rng.random::<f64>() * cdf[clients - 1];
            cdf.partition_point(|&c| c <= u).min(clients - 1)
        })
        .collect();
    ClientPartition::new(assignments, clients)
}

const KMEANS_ITERATIONS: usize = 30;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Feature skew: k-means on attribute codes scaled to [0, 1]; cluster id = client id.
///
/// Seeding is k-means++ from the run seed; empty clusters are refilled by
/// splitting the largest cluster.
pub fn partition_cluster_skew(
    data: &DiscreteDataset,
    clients: usize,
    seed: u64,
) -> Result<ClientPartition> {
    if clients == 0 || clients > data.len() {
        return Err(Error::InvalidParameter(format!(
            "need 1 ≤ K ≤ N, got K={clients} with N={}",
            data.len()
        )));
    }
    let domain = data.domain();
    let d = domain.len();
    let points: Vec<Vec<f64>> = data
        .rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(a, &v)| {
                    let s = domain.size(a);
                    if s > 1 {
                        v as f64 / (s - 1) as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let assignments = kmeans(&points, clients, seed, d);
    ClientPartition::new(assignments, clients)
}

fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, dim: usize) -> Vec<usize> {
    let n = points.len();
    let mut rng = stream(seed, 0, SERVER, Purpose::Partition);
    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                acc += w;
                if acc > u {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        let c = centroids.last().unwrap();
        for (best, p) in nearest.iter_mut().zip(points) {
            *best = best.min(sq_dist(p, c));
        }
    }

    let mut assign = vec![0usize; n];
    for iter in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, cent) in centroids.iter().enumerate() {
                let dd = sq_dist(p, cent);
                if dd < best.1 {
                    best = (c, dd);
                }
            }
            changed |= assign[i] != best.0;
            assign[i] = best.0;
        }
        repair_empty(points, &mut assign, k, &centroids);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed && iter > 0 {
            break;
        }
    }
    repair_empty(points, &mut assign, k, &centroids);
    assign
}

/// Moves the half of the largest cluster farthest from its centroid into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assign: &mut [usize], k: usize, centroids: &[Vec<f64>]) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assign.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k)
            .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
            .unwrap();
        if counts[largest] < 2 {
            return;
        }
        let mut members: Vec<(f64, usize)> = assign
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == largest)
            .map(|(i, _)| (sq_dist(&points[i], &centroids[largest]), i))
            .collect();
        members.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in members.iter().take(members.len() / 2) {
            assign[i] = empty;
        }
    }
}

/// τ between a client's and the global table, on normalised marginals.
///
/// An empty client's normalised table is the zero vector.
pub fn tau(client_counts: &[f64], global_counts: &[f64]) -> f64 {
    l1_distance(&normalize(client_counts), &normalize(global_counts))
}

/// τ_k(q) = ‖M_q(D_k) − M_q(D)‖₁ on normalised tables.
pub fn oracle_heterogeneity(
    client: &DiscreteDataset,
    global: &DiscreteDataset,
    q: &MarginalQuery,
) -> Result<f64> {
    let a = crate::domain::evaluate_marginal(client, q)?;
    let b = crate::domain::evaluate_marginal(global, q)?;
    Ok(tau(&a.counts, &b.counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    /// τ_k(q), indexed `[client][query]`.
    pub tau: Vec<Vec<f64>>,
    /// (1/K) Σ_k Σ_q τ_k(q).
    pub aggregate: f64,
    /// aggregate / |Q|: average τ per client and query.
    pub mean_per_query: f64,
    /// Clients with no rows; their τ uses the zero-vector convention.
    pub empty_clients: Vec<usize>,
}

/// Per-client marginal counts for one query, `[client][cell]`, in one pass.
pub fn client_marginals(
    data: &DiscreteDataset,
    partition: &ClientPartition,
    q: &MarginalQuery,
) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; q.cells()]; partition.clients()];
    for (row, &k) in data.rows().zip(partition.assignments()) {
        out[k][q.cell_of(row, data.domain())] += 1.0;
    }
    out
}

pub fn heterogeneity_report(
    data: &DiscreteDataset,
    partition: &ClientPartition,
    queries: &[MarginalQuery],
) -> Result<HeterogeneityReport> {
    partition.check_covers(data)?;
    if queries.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    let k = partition.clients();
    let mut tau_kq = vec![vec![0.0; queries.len()]; k];
    for (j, q) in queries.iter().enumerate() {
        let per_client = client_marginals(data, partition, q);
        let mut global = vec![0.0; q.cells()];
        for c in &per_client {
            for (g, v) in global.iter_mut().zip(c) {
                *g += v;
            }
        }
        for (client, counts) in per_client.iter().enumerate() {
            tau_kq[client][j] = tau(counts, &global);
        }
    }
    let aggregate = tau_kq.iter().flatten().sum::<f64>() / k as f64;
    let empty_clients = partition
        .sizes()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == 0)
        .map(|(i, _)| i)
        .collect();
    Ok(HeterogeneityReport {
        tau: tau_kq,
        aggregate,
        mean_per_query: aggregate / queries.len() as f64,
        empty_clients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{evaluate_marginal, Domain};
    use rand_distr::Normal;

    fn binary(rows: &[u32]) -> DiscreteDataset {
        let d = Domain::from_sizes(&[2]).unwrap();
        DiscreteDataset::from_rows(d, &rows.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn iid_edge_cases() {
        let p = partition_iid(50, 1, 3).unwrap();
        assert!(p.assignments().iter().all(|&k| k == 0));
        let p = partition_iid(200, 200, 3).unwrap();
        assert_eq!(p.sizes().iter().sum::<usize>(), 200);
        assert_eq!(
            partition_iid(200, 7, 9).unwrap(),
            partition_iid(200, 7, 9).unwrap()
        );
        assert!(partition_iid(10, 0, 1).is_err());
    }

    #[test]
    fn label_skew_conserves_and_repeats() {
        let data = binary(&[0; 100]);
        let p = partition_label_skew(&data, 2, 0, 0.1, 4).unwrap();
        assert_eq!(p.sizes().iter().sum::<usize>(), 100);
        assert_eq!(p, partition_label_skew(&data, 2, 0, 0.1, 4).unwrap());
        assert!(partition_label_skew(&data, 2, 3, 0.1, 4).is_err());
        assert!(partition_label_skew(&data, 2, 0, 0.0, 4).is_err());
    }

    #[test]
    fn dirichlet_handles_tiny_beta() {
        let mut rng = stream(1, 0, 0, Purpose::Partition);
        for _ in 0..50 {
            let p = dirichlet(10, 1e-4, &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_separates_blobs() {
        let d = Domain::from_sizes(&[32, 32]).unwrap();
        let mut rng = stream(5, 0, 0, Purpose::Dataset);
        let noise = Normal::new(0.0, 1.5).unwrap();
        let mut rows = Vec::new();
        for i in 0..400 {
            let centre: f64 = if i % 2 == 0 { 5.0 } else { 26.0 };
            let v = |rng: &mut crate::rng::RunRng| {
                (centre + noise.sample(rng)).clamp(0.0, 31.0).round() as u32
            };
            rows.push(vec![v(&mut rng), v(&mut rng)]);
        }
        let data = DiscreteDataset::from_rows(d, &rows).unwrap();
        let p = partition_cluster_skew(&data, 2, 1).unwrap();
        let mut agree = 0;
        for i in 0..400 {
            if (p.assignments()[i] == p.assignments()[0]) == (i % 2 == 0) {
                agree += 1;
            }
        }
        assert!(agree as f64 / 400.0 > 0.95);
        let single = partition_cluster_skew(&data, 1, 1).unwrap();
        assert_eq!(single.sizes(), vec![400]);
    }

    #[test]
    fn kmeans_never_leaves_clusters_empty() {
        // few distinct points, many clusters
        let data = binary(&[0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
        let p = partition_cluster_skew(&data, 5, 2).unwrap();
        assert!(p.sizes().iter().all(|&s| s > 0), "{:?}", p.sizes());
    }

    #[test]
    fn heterogeneity_examples() {
        let data = binary(&[0, 0, 1, 1]);
        let q = MarginalQuery::new(vec![0], data.domain()).unwrap();
        let p = ClientPartition::new(vec![0, 0, 1, 1], 2).unwrap();
        let r = heterogeneity_report(&data, &p, std::slice::from_ref(&q)).unwrap();
        assert_eq!(r.tau, vec![vec![1.0], vec![1.0]]);
        assert_eq!(r.aggregate, 1.0);

        let same = ClientPartition::new(vec![0, 1, 0, 1], 2).unwrap();
        let r = heterogeneity_report(&data, &same, std::slice::from_ref(&q)).unwrap();
        assert!(r.tau.iter().flatten().all(|&t| t == 0.0));

        let with_empty = ClientPartition::new(vec![0, 0, 0, 0], 2).unwrap();
        let r = heterogeneity_report(&data, &with_empty, std::slice::from_ref(&q)).unwrap();
        assert_eq!(r.empty_clients, vec![1]);
        assert_eq!(r.tau[1][0], 1.0);

        let client = binary(&[0, 0]);
        assert_eq!(oracle_heterogeneity(&client, &data, &q).unwrap(), 1.0);
        assert_eq!(oracle_heterogeneity(&data, &data, &q).unwrap(), 0.0);
    }

    #[test]
    fn client_marginals_sum_to_global() {
        let d = Domain::from_sizes(&[3, 4]).unwrap();
        let mut rng = stream(8, 0, 0, Purpose::Dataset);
        let rows: Vec<Vec<u32>> = (0..300)
            .map(|_| vec![rng.random_range(0..3), rng.random_range(0..4)])
            .collect();
        let data = DiscreteDataset::from_rows(d.clone(), &rows).unwrap();
        let p = partition_iid(300, 6, 2).unwrap();
        let q = MarginalQuery::new(vec![0, 1], &d).unwrap();
        let per = client_marginals(&data, &p, &q);
        let mut sum = vec![0.0; 12];
        for c in &per {
            for (s, v) in sum.iter_mut().zip(c) {
                *s += v;
            }
        }
        assert_eq!(sum, evaluate_marginal(&data, &q).unwrap().counts);
        let locals = p.split(&data).unwrap();
        assert_eq!(locals.iter().map(|l| l.len()).sum::<usize>(), 300);
        for (l, c) in locals.iter().zip(&per) {
            assert_eq!(&evaluate_marginal(l, &q).unwrap().counts, c);
        }
    }

    #[test]
    fn partition_file_roundtrip() {
        let p = ClientPartition::new(vec![2, 0, 1, 2], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("part.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        p.write(&mut f).unwrap();
        drop(f);
        assert_eq!(ClientPartition::read(&path, None).unwrap(), p);
        assert!(ClientPartition::read(&path, Some(2)).is_err());
    }
}
