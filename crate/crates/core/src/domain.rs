//! Discrete domains, integer-encoded datasets and marginal queries.
//!
//! Marginal tables use a mixed-radix cell order: attributes of a query are
//! taken in ascending index order and the last attribute varies fastest.
//! Every module that produces or consumes a marginal vector relies on this.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DomainFile", into = "DomainFile")]
pub struct Domain {
    names: Vec<String>,
    sizes: Vec<usize>,
}

impl Domain {
    pub fn new(names: Vec<String>, sizes: Vec<usize>) -> Result<Self> {
        if names.len() != sizes.len() {
            return Err(Error::InvalidDomain(format!(
                "{} names but {} cardinalities",
                names.len(),
                sizes.len()
            )));
        }
        if names.is_empty() {
            return Err(Error::InvalidDomain("no attributes".into()));
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidDomain(format!(
                "attribute '{}' has cardinality 0",
                names[i]
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidDomain(format!("duplicate attribute '{n}'")));
            }
        }
        Ok(Domain { names, sizes })
    }

    /// Domain with generated names `a0, a1, ...`.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let names = (0..sizes.len()).map(|i| format!("a{i}")).collect();
        Domain::new(names, sizes.to_vec())
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, attr: usize) -> usize {
        self.sizes[attr]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Number of cells spanned by `attrs`, or `None` on overflow.
    pub fn cells(&self, attrs: &[usize]) -> Option<usize> {
        attrs
            .iter()
            .try_fold(1usize, |acc, &a| acc.checked_mul(*self.sizes.get(a)?))
    }
}

#[derive(Serialize, Deserialize)]
struct DomainFile {
    attributes: Vec<DomainAttr>,
}

#[derive(Serialize, Deserialize)]
struct DomainAttr {
    name: String,
    size: usize,
}

impl TryFrom<DomainFile> for Domain {
    type Error = Error;
    fn try_from(f: DomainFile) -> Result<Self> {
        let (names, sizes) = f.attributes.into_iter().map(|a| (a.name, a.size)).unzip();
        Domain::new(names, sizes)
    }
}

impl From<Domain> for DomainFile {
    fn from(d: Domain) -> Self {
        DomainFile {
            attributes: d
                .names
                .into_iter()
                .zip(d.sizes)
                .map(|(name, size)| DomainAttr { name, size })
                .collect(),
        }
    }
}

/// Strides for a mixed-radix layout where the last position varies fastest.
pub fn strides(sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![1; sizes.len()];
    for i in (0..sizes.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * sizes[i + 1];
    }
    out
}

/// Integer-encoded rows over a [`Domain`], stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteDataset {
    domain: Domain,
    values: Vec<u32>,
}

impl DiscreteDataset {
    pub fn empty(domain: Domain) -> Self {
        DiscreteDataset {
            domain,
            values: Vec::new(),
        }
    }

    pub fn from_rows(domain: Domain, rows: &[Vec<u32>]) -> Result<Self> {
        let mut data = DiscreteDataset::empty(domain);
        data.values.reserve(rows.len() * data.domain.len());
        for row in rows {
            data.push_row(row)?;
        }
        Ok(data)
    }

    /// Builds a dataset from a flat row-major buffer.
    pub fn from_flat(domain: Domain, values: Vec<u32>) -> Result<Self> {
        let d = domain.len();
        if !values.len().is_multiple_of(d) {
            return Err(Error::InvalidRow {
                row: values.len() / d,
                reason: "buffer length is not a multiple of the attribute count".into(),
            });
        }
        for (r, row) in values.chunks_exact(d).enumerate() {
            check_row(&domain, r, row)?;
        }
        Ok(DiscreteDataset { domain, values })
    }

    pub fn push_row(&mut self, row: &[u32]) -> Result<()> {
        check_row(&self.domain, self.len(), row)?;
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Number of records N.
    pub fn len(&self) -> usize {
        self.values.len() / self.domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let d = self.domain.len();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.values.chunks_exact(self.domain.len())
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> DiscreteDataset {
        let mut values = Vec::with_capacity(indices.len() * self.domain.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        DiscreteDataset {
            domain: self.domain.clone(),
            values,
        }
    }

    /// Concatenation of `self` and `other`, which must share a domain.
    pub fn concat(&self, other: &DiscreteDataset) -> Result<DiscreteDataset> {
        if self.domain != other.domain {
            return Err(Error::InvalidDomain(
                "cannot concatenate different domains".into(),
            ));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(DiscreteDataset {
            domain: self.domain.clone(),
            values,
        })
    }
}

fn check_row(domain: &Domain, r: usize, row: &[u32]) -> Result<()> {
    if row.len() != domain.len() {
        return Err(Error::InvalidRow {
            row: r,
            reason: format!("expected {} entries, found {}", domain.len(), row.len()),
        });
    }
    for (i, (&v, &s)) in row.iter().zip(domain.sizes()).enumerate() {
        if v as usize >= s {
            return Err(Error::InvalidRow {
                row: r,
                reason: format!("value {v} out of range for attribute {i} of size {s}"),
            });
        }
    }
    Ok(())
}

/// A marginal query over a sorted, duplicate-free attribute set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MarginalQuery {
    attrs: Vec<usize>,
    cells: usize,
}

impl MarginalQuery {
    pub fn new(mut attrs: Vec<usize>, domain: &Domain) -> Result<Self> {
        if attrs.is_empty() {
            return Err(Error::InvalidQuery("empty attribute set".into()));
        }
        attrs.sort_unstable();
        if attrs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidQuery(format!(
                "duplicate attribute in {attrs:?}"
            )));
        }
        if let Some(&a) = attrs.iter().find(|&&a| a >= domain.len()) {
            return Err(Error::AttributeOutOfRange {
                index: a,
                width: domain.len(),
            });
        }
        let cells = domain
            .cells(&attrs)
            .ok_or_else(|| Error::InvalidQuery(format!("{attrs:?} overflows the cell count")))?;
        Ok(MarginalQuery { attrs, cells })
    }

    pub fn attrs(&self) -> &[usize] {
        &self.attrs
    }

    /// n_q, the number of cells in the marginal.
    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Number of attributes |q|.
    pub fn arity(&self) -> usize {
        self.attrs.len()
    }

    pub fn intersection_size(&self, other: &MarginalQuery) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.attrs.len() && j < other.attrs.len() {
            match self.attrs[i].cmp(&other.attrs[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn is_subset_of(&self, other: &MarginalQuery) -> bool {
        self.intersection_size(other) == self.arity()
    }

    fn check_domain(&self, domain: &Domain) -> Result<()> {
        if let Some(&a) = self.attrs.iter().find(|&&a| a >= domain.len()) {
            return Err(Error::AttributeOutOfRange {
                index: a,
                width: domain.len(),
            });
        }
        if domain.cells(&self.attrs) != Some(self.cells) {
            return Err(Error::InvalidQuery(format!(
                "{:?} was built for a different domain",
                self.attrs
            )));
        }
        Ok(())
    }

    /// Cell index of a full row within this marginal.
    #[inline]
    pub fn cell_of(&self, row: &[u32], domain: &Domain) -> usize {
        let mut idx = 0usize;
        for &a in &self.attrs {
            idx = idx * domain.size(a) + row[a] as usize;
        }
        idx
    }
}

/// Counts (possibly noisy) for one marginal query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTable {
    pub query: MarginalQuery,
    pub counts: Vec<f64>,
}

impl MarginalTable {
    pub fn zeros(query: MarginalQuery) -> Self {
        let counts = vec![0.0; query.cells()];
        MarginalTable { query, counts }
    }

    pub fn new(query: MarginalQuery, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != query.cells() {
            return Err(Error::InvalidQuery(format!(
                "table for {:?} needs {} cells, got {}",
                query.attrs(),
                query.cells(),
                counts.len()
            )));
        }
        Ok(MarginalTable { query, counts })
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Counts divided by their total; the zero vector when the total is not positive.
    pub fn normalized(&self) -> Vec<f64> {
        normalize(&self.counts)
    }

    /// Negative cells clipped to zero, then normalized.
    pub fn clipped_normalized(&self) -> Vec<f64> {
        let clipped: Vec<f64> = self.counts.iter().map(|&c| c.max(0.0)).collect();
        normalize(&clipped)
    }
}

pub fn normalize(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![0.0; counts.len()]
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Anything that can answer marginal queries: a dataset or a fitted model.
pub trait MarginalSource {
    fn marginal(&self, q: &MarginalQuery) -> Result<MarginalTable>;
}

impl MarginalSource for DiscreteDataset {
    fn marginal(&self, q: &MarginalQuery) -> Result<MarginalTable> {
        evaluate_marginal(self, q)
    }
}

/// Counts M_q(D) in the mixed-radix cell order.
pub fn evaluate_marginal(data: &DiscreteDataset, q: &MarginalQuery) -> Result<MarginalTable> {
    q.check_domain(data.domain())?;
    let mut counts = vec![0.0; q.cells()];
    let domain = data.domain();
    for row in data.rows() {
        counts[q.cell_of(row, domain)] += 1.0;
    }
    Ok(MarginalTable {
        query: q.clone(),
        counts,
    })
}

/// How workload error is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMode {
    /// L1 between raw counts.
    Raw,
    /// L1 between tables divided by their own totals.
    #[default]
    Normalized,
}

/// Mean L1 distance between two answer sources over `queries`.
pub fn workload_error(
    truth: &impl MarginalSource,
    estimate: &impl MarginalSource,
    queries: &[MarginalQuery],
    mode: ErrorMode,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    let mut sum = 0.0;
    for q in queries {
        let a = truth.marginal(q)?;
        let b = estimate.marginal(q)?;
        sum += match mode {
            ErrorMode::Raw => l1_distance(&a.counts, &b.counts),
            ErrorMode::Normalized => l1_distance(&a.normalized(), &b.normalized()),
        };
    }
    Ok(sum / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dom(sizes: &[usize]) -> Domain {
        Domain::from_sizes(sizes).unwrap()
    }

    #[test]
    fn domain_rejects_bad_input() {
        assert!(Domain::new(vec!["a".into()], vec![0]).is_err());
        assert!(Domain::new(vec!["a".into(), "a".into()], vec![2, 2]).is_err());
        assert!(Domain::new(vec!["a".into()], vec![2, 3]).is_err());
    }

    #[test]
    fn domain_json_roundtrip() {
        let d = Domain::new(vec!["x".into(), "y".into()], vec![3, 4]).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(
            s,
            r#"{"attributes":[{"name":"x","size":3},{"name":"y","size":4}]}"#
        );
        let back: Domain = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        assert!(
            serde_json::from_str::<Domain>(r#"{"attributes":[{"name":"x","size":0}]}"#).is_err()
        );
    }

    #[test]
    fn strides_last_fastest() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn rows_are_validated() {
        let d = dom(&[2, 3]);
        assert!(DiscreteDataset::from_rows(d.clone(), &[vec![1, 2]]).is_ok());
        assert!(DiscreteDataset::from_rows(d.clone(), &[vec![2, 0]]).is_err());
        assert!(DiscreteDataset::from_rows(d, &[vec![0]]).is_err());
    }

    #[test]
    fn query_validation() {
        let d = dom(&[2, 3, 4]);
        let q = MarginalQuery::new(vec![2, 0], &d).unwrap();
        assert_eq!(q.attrs(), &[0, 2]);
        assert_eq!(q.cells(), 8);
        assert!(MarginalQuery::new(vec![], &d).is_err());
        assert!(MarginalQuery::new(vec![1, 1], &d).is_err());
        assert!(matches!(
            MarginalQuery::new(vec![3], &d),
            Err(Error::AttributeOutOfRange { index: 3, width: 3 })
        ));
    }

    #[test]
    fn marginal_of_empty_dataset_is_zero() {
        let d = dom(&[2, 3]);
        let q = MarginalQuery::new(vec![0, 1], &d).unwrap();
        let t = evaluate_marginal(&DiscreteDataset::empty(d), &q).unwrap();
        assert_eq!(t.counts, vec![0.0; 6]);
    }

    #[test]
    fn single_row_lands_in_expected_cell() {
        let d = dom(&[2, 2]);
        let data = DiscreteDataset::from_rows(d.clone(), &[vec![0, 1]]).unwrap();
        let q = MarginalQuery::new(vec![0, 1], &d).unwrap();
        assert_eq!(
            evaluate_marginal(&data, &q).unwrap().counts,
            vec![0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn replication_doubles_counts() {
        let d = dom(&[3, 2]);
        let data =
            DiscreteDataset::from_rows(d.clone(), &[vec![0, 1], vec![2, 0], vec![2, 1]]).unwrap();
        let twice = data.concat(&data).unwrap();
        let q = MarginalQuery::new(vec![0, 1], &d).unwrap();
        let a = evaluate_marginal(&data, &q).unwrap();
        let b = evaluate_marginal(&twice, &q).unwrap();
        for (x, y) in a.counts.iter().zip(&b.counts) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn query_from_other_domain_is_rejected() {
        let big = dom(&[4, 4]);
        let small = dom(&[2, 2]);
        let q = MarginalQuery::new(vec![0], &big).unwrap();
        assert!(evaluate_marginal(&DiscreteDataset::empty(small), &q).is_err());
    }

    #[test]
    fn workload_error_examples() {
        let d = dom(&[2]);
        let q = MarginalQuery::new(vec![0], &d).unwrap();
        let a = DiscreteDataset::from_rows(d.clone(), &[vec![0], vec![0]]).unwrap();
        let b = DiscreteDataset::from_rows(d.clone(), &[vec![1], vec![1]]).unwrap();
        let qs = [q];
        assert_eq!(workload_error(&a, &a, &qs, ErrorMode::Raw).unwrap(), 0.0);
        assert_eq!(workload_error(&a, &b, &qs, ErrorMode::Raw).unwrap(), 4.0);
        assert_eq!(
            workload_error(&a, &b, &qs, ErrorMode::Normalized).unwrap(),
            2.0
        );
        assert!(matches!(
            workload_error(&a, &b, &[], ErrorMode::Raw),
            Err(Error::EmptyWorkload)
        ));
    }

    #[test]
    fn normalize_zero_total_is_zero_vector() {
        assert_eq!(normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }
}
