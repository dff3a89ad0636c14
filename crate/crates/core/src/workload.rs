//! Query workloads: weighting, completion and random generation.

use rand::seq::index;
use std::collections::BTreeSet;

use crate::domain::{Domain, MarginalQuery};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, SERVER};

/// A set of marginal queries with overlap weights w_q = Σ_r |q ∩ r|.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    queries: Vec<MarginalQuery>,
    weights: Vec<f64>,
}

impl Workload {
    /// Deduplicates `queries` (keeping first occurrence order) and computes weights.
    pub fn new(queries: Vec<MarginalQuery>) -> Self {
        let mut seen = BTreeSet::new();
        let queries: Vec<_> = queries
            .into_iter()
            .filter(|q| seen.insert(q.attrs().to_vec()))
            .collect();
        let weights = queries
            .iter()
            .map(|q| queries.iter().map(|r| q.intersection_size(r) as f64).sum())
            .collect();
        Workload { queries, weights }
    }

    pub fn from_attr_sets(sets: &[Vec<usize>], domain: &Domain) -> Result<Self> {
        let queries = sets
            .iter()
            .map(|s| MarginalQuery::new(s.clone(), domain))
            .collect::<Result<Vec<_>>>()?;
        Ok(Workload::new(queries))
    }

    pub fn queries(&self) -> &[MarginalQuery] {
        &self.queries
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn weight_of(&self, q: &MarginalQuery) -> Option<f64> {
        self.queries
            .iter()
            .position(|r| r == q)
            .map(|i| self.weights[i])
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MarginalQuery, f64)> {
        self.queries.iter().zip(self.weights.iter().copied())
    }
}

/// Adds every non-empty sub-query of every query; weights are recomputed on the result.
///
/// Queries are ordered by arity, then lexicographically by attributes.
pub fn complete_workload(workload: &Workload, domain: &Domain) -> Result<Workload> {
    let mut all = BTreeSet::new();
    for q in workload.queries() {
        let attrs = q.attrs();
        if attrs.len() > 24 {
            return Err(Error::InvalidQuery(format!(
                "{} attributes is too many to enumerate sub-queries",
                attrs.len()
            )));
        }
        for mask in 1u32..(1u32 << attrs.len()) {
            let sub: Vec<usize> = attrs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &a)| a)
                .collect();
            all.insert((sub.len(), sub));
        }
    }
    let queries = all
        .into_iter()
        .map(|(_, s)| MarginalQuery::new(s, domain))
        .collect::<Result<Vec<_>>>()?;
    Ok(Workload::new(queries))
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// `count` distinct attribute subsets of size `arity`, drawn uniformly without
/// replacement. Deterministic in `seed`; returned in lexicographic order.
pub fn random_workload(domain: &Domain, arity: usize, count: usize, seed: u64) -> Result<Workload> {
    let d = domain.len();
    if arity == 0 || arity > d {
        return Err(Error::InvalidParameter(format!(
            "arity {arity} must be in 1..={d}"
        )));
    }
    let available = binomial(d, arity);
    if count as u128 > available {
        return Err(Error::WorkloadTooLarge {
            requested: count,
            available: available.min(usize::MAX as u128) as usize,
        });
    }
    let mut rng = stream(seed, 0, SERVER, Purpose::Workload);
    let mut chosen: BTreeSet<Vec<usize>> = BTreeSet::new();
    if available <= 2_000_000 {
        let all = combinations(d, arity);
        for i in index::sample(&mut rng, all.len(), count) {
            chosen.insert(all[i].clone());
        }
    } else {
        while chosen.len() < count {
            let mut s: Vec<usize> = index::sample(&mut rng, d, arity).into_vec();
            s.sort_unstable();
            chosen.insert(s);
        }
    }
    let queries = chosen
        .into_iter()
        .map(|s| MarginalQuery::new(s, domain))
        .collect::<Result<Vec<_>>>()?;
    Ok(Workload::new(queries))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        // advance the rightmost position that can still move
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < n - k + i {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dom(d: usize) -> Domain {
        Domain::from_sizes(&vec![3; d]).unwrap()
    }

    fn attr_sets(w: &Workload) -> BTreeSet<Vec<usize>> {
        w.queries().iter().map(|q| q.attrs().to_vec()).collect()
    }

    #[test]
    fn weights_count_overlaps_including_self() {
        let d = dom(4);
        let w = Workload::from_attr_sets(&[vec![0, 1], vec![1, 2]], &d).unwrap();
        assert_eq!(w.weights(), &[3.0, 3.0]);
        let w = Workload::from_attr_sets(&[vec![0, 1, 2], vec![3]], &d).unwrap();
        assert_eq!(w.weights(), &[3.0, 1.0]);
    }

    #[test]
    fn completion_of_pair() {
        let d = dom(4);
        let w = Workload::from_attr_sets(&[vec![1, 2]], &d).unwrap();
        let c = complete_workload(&w, &d).unwrap();
        let expected: BTreeSet<Vec<usize>> = [vec![1], vec![2], vec![1, 2]].into_iter().collect();
        assert_eq!(attr_sets(&c), expected);
    }

    #[test]
    fn completion_weights_on_completed_set() {
        // completed set of {1,2},{2,3}: {1},{2},{3},{1,2},{2,3}
        let d = dom(4);
        let w = Workload::from_attr_sets(&[vec![1, 2], vec![2, 3]], &d).unwrap();
        let c = complete_workload(&w, &d).unwrap();
        let q12 = MarginalQuery::new(vec![1, 2], &d).unwrap();
        let q2 = MarginalQuery::new(vec![2], &d).unwrap();
        // {1,2}: with {1}=1, {2}=1, {3}=0, {1,2}=2, {2,3}=1
        assert_eq!(c.weight_of(&q12), Some(5.0));
        // {2}: with {2},{1,2},{2,3} each 1
        assert_eq!(c.weight_of(&q2), Some(3.0));
    }

    #[test]
    fn completion_is_a_fixpoint_on_closed_sets() {
        let d = dom(4);
        let w = Workload::from_attr_sets(&[vec![0], vec![1], vec![0, 1]], &d).unwrap();
        let c = complete_workload(&w, &d).unwrap();
        assert_eq!(attr_sets(&c), attr_sets(&w));
    }

    #[test]
    fn random_workload_paper_shape() {
        let d = dom(14);
        let w = random_workload(&d, 3, 64, 1).unwrap();
        assert_eq!(w.len(), 64);
        assert!(w.queries().iter().all(|q| q.arity() == 3));
        assert_eq!(attr_sets(&w).len(), 64);
    }

    #[test]
    fn random_workload_exhaustion_and_determinism() {
        let d = dom(6);
        let w = random_workload(&d, 3, 20, 5).unwrap();
        assert_eq!(attr_sets(&w), combinations(6, 3).into_iter().collect());
        let a = random_workload(&d, 2, 7, 11).unwrap();
        let b = random_workload(&d, 2, 7, 11).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            random_workload(&d, 3, 21, 0),
            Err(Error::WorkloadTooLarge {
                requested: 21,
                available: 20
            })
        ));
    }

    #[test]
    fn binomial_small_values() {
        assert_eq!(binomial(14, 3), 364);
        assert_eq!(binomial(6, 3), 20);
        assert_eq!(combinations(5, 2).len(), 10);
    }

    proptest! {
        #[test]
        fn weights_permutation_invariant(seed in 0u64..1000, rot in 0usize..10) {
            let d = dom(7);
            let w = random_workload(&d, 2, 10, seed).unwrap();
            let mut qs = w.queries().to_vec();
            let len = qs.len();
            qs.rotate_left(rot % len);
            let w2 = Workload::new(qs);
            for (q, wq) in w.iter() {
                prop_assert_eq!(w2.weight_of(q), Some(wq));
                prop_assert!(wq >= q.arity() as f64);
            }
        }
    }
}
