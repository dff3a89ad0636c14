//! Simulated additive secret sharing and secure aggregation.
//!
//! Counts are encoded as two's-complement integers in Z_{2^64}. A client
//! splits each vector into uniformly random shares, one per compute party;
//! parties add shares locally and only the sum is ever reconstructed. There
//! is no transport here, only the arithmetic and the byte accounting.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{MarginalQuery, MarginalTable};
use crate::dp::add_gaussian_noise;
use crate::error::{Error, Result};

/// Bytes per ring element.
pub const SHARE_BYTES: u64 = 8;
pub const DEFAULT_PARTIES: usize = 3;

/// One party's share of one marginal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareVector {
    pub party: usize,
    pub round: usize,
    pub query: Vec<usize>,
    pub values: Vec<u64>,
}

/// Encodes integral counts into the ring.
pub fn encode(counts: &[f64]) -> Result<Vec<u64>> {
    counts
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || !v.is_finite() || v.abs() >= 9.2e18 {
                Err(Error::ShareMismatch(format!(
                    "cannot encode non-integral count {v}"
                )))
            } else {
                Ok(v as i64 as u64)
            }
        })
        .collect()
}

pub fn decode(ring: &[u64]) -> Vec<f64> {
    ring.iter().map(|&v| v as i64 as f64).collect()
}

/// Splits `table` into `parties` additive shares.
pub fn share<R: Rng + ?Sized>(
    table: &MarginalTable,
    parties: usize,
    round: usize,
    rng: &mut R,
) -> Result<Vec<ShareVector>> {
    if parties < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 parties, got {parties}"
        )));
    }
    let encoded = encode(&table.counts)?;
    let mut last = encoded;
    let mut shares = Vec::with_capacity(parties);
    for party in 0..parties - 1 {
        let values: Vec<u64> = (0..last.len()).map(|_| rng.random()).collect();
        for (l, v) in last.iter_mut().zip(&values) {
            *l = l.wrapping_sub(*v);
        }
        shares.push(ShareVector {
            party,
            round,
            query: table.query.attrs().to_vec(),
            values,
        });
    }
    shares.push(ShareVector {
        party: parties - 1,
        round,
        query: table.query.attrs().to_vec(),
        values: last,
    });
    Ok(shares)
}

fn check_shape(query: &[usize], cells: usize, s: &ShareVector) -> Result<()> {
    if s.query != query || s.values.len() != cells {
        return Err(Error::ShareMismatch(format!(
            "share for {:?} ({} cells) does not match {:?} ({} cells)",
            s.query,
            s.values.len(),
            query,
            cells
        )));
    }
    Ok(())
}

/// Sums one client's shares back into the encoded counts.
pub fn reconstruct(shares: &[ShareVector]) -> Result<Vec<f64>> {
    let first = shares
        .first()
        .ok_or_else(|| Error::ShareMismatch("no shares to reconstruct".into()))?;
    let mut sum = vec![0u64; first.values.len()];
    for s in shares {
        check_shape(&first.query, sum.len(), s)?;
        for (acc, v) in sum.iter_mut().zip(&s.values) {
            *acc = acc.wrapping_add(*v);
        }
    }
    Ok(decode(&sum))
}

/// Running per-party sums for one query. Parties add incoming shares
/// locally; only [`ShareAccumulator::reveal`] combines them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareAccumulator {
    query: Vec<usize>,
    parties: Vec<Vec<u64>>,
    contributors: usize,
}

impl ShareAccumulator {
    pub fn new(query: &MarginalQuery, parties: usize) -> Self {
        ShareAccumulator {
            query: query.attrs().to_vec(),
            parties: vec![vec![0; query.cells()]; parties],
            contributors: 0,
        }
    }

    /// Adds one client's full set of shares.
    pub fn add(&mut self, shares: &[ShareVector]) -> Result<()> {
        if shares.len() != self.parties.len() {
            return Err(Error::ShareMismatch(format!(
                "expected {} shares, got {}",
                self.parties.len(),
                shares.len()
            )));
        }
        let cells = self.parties[0].len();
        for s in shares {
            check_shape(&self.query, cells, s)?;
            let slot = self
                .parties
                .get_mut(s.party)
                .ok_or_else(|| Error::ShareMismatch(format!("unknown party {}", s.party)))?;
            for (acc, v) in slot.iter_mut().zip(&s.values) {
                *acc = acc.wrapping_add(*v);
            }
        }
        self.contributors += 1;
        Ok(())
    }

    pub fn contributors(&self) -> usize {
        self.contributors
    }

    pub fn reveal(&self) -> Vec<f64> {
        let mut sum = vec![0u64; self.parties[0].len()];
        for p in &self.parties {
            for (acc, v) in sum.iter_mut().zip(p) {
                *acc = acc.wrapping_add(*v);
            }
        }
        decode(&sum)
    }
}

/// Exact sum of several clients' shared tables for the same query.
pub fn aggregate(
    query: &MarginalQuery,
    contributions: &[Vec<ShareVector>],
) -> Result<MarginalTable> {
    let parties = contributions.first().map_or(DEFAULT_PARTIES, |c| c.len());
    let mut acc = ShareAccumulator::new(query, parties);
    for c in contributions {
        acc.add(c)?;
    }
    MarginalTable::new(query.clone(), acc.reveal())
}

/// Per-(protocol, client, round) byte counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommsLedger {
    entries: BTreeMap<(String, usize, usize), (u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommsRecord {
    pub client: usize,
    pub round: usize,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub protocol: String,
}

impl CommsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        protocol: &str,
        client: usize,
        round: usize,
        sent: u64,
        received: u64,
    ) {
        let e = self
            .entries
            .entry((protocol.to_string(), client, round))
            .or_default();
        e.0 += sent;
        e.1 += received;
    }

    pub fn records(&self) -> Vec<CommsRecord> {
        self.entries
            .iter()
            .map(|((p, c, r), (s, rv))| CommsRecord {
                client: *c,
                round: *r,
                bytes_sent: *s,
                bytes_received: *rv,
                protocol: p.clone(),
            })
            .collect()
    }

    /// Bytes sent plus received by one client over the run.
    pub fn client_total(&self, client: usize) -> u64 {
        self.entries
            .iter()
            .filter(|((_, c, _), _)| *c == client)
            .map(|(_, (s, r))| s + r)
            .sum()
    }

    pub fn total_sent(&self) -> u64 {
        self.entries.values().map(|(s, _)| s).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.entries.values().map(|(_, r)| r).sum()
    }

    pub fn total(&self) -> u64 {
        self.total_sent() + self.total_received()
    }

    /// Number of distinct clients that appear in the ledger.
    pub fn clients(&self) -> usize {
        let mut ids: Vec<usize> = self.entries.keys().map(|(_, c, _)| *c).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn merge(&mut self, other: &CommsLedger) {
        for ((p, c, r), (s, rv)) in &other.entries {
            self.record(p, *c, *r, *s, *rv);
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for rec in self.records() {
            w.serialize(rec)?;
        }
        w.flush().map_err(|e| Error::io("comms ledger", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut ledger = CommsLedger::new();
        for rec in csv::Reader::from_reader(input).deserialize() {
            let rec: CommsRecord = rec?;
            ledger.record(
                &rec.protocol,
                rec.client,
                rec.round,
                rec.bytes_sent,
                rec.bytes_received,
            );
        }
        Ok(ledger)
    }
}

/// One client's contribution to a secure-aggregation round.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub client: usize,
    pub values: Vec<f64>,
}

/// Exact sum of the contributions plus one N(0, σ²) draw per cell.
///
/// Each client is charged `cells × 8` bytes sent. Contributions must be integral.
pub fn secagg_round<R: Rng + ?Sized>(
    query: &MarginalQuery,
    contributions: &[Contribution],
    sigma: f64,
    round: usize,
    protocol: &str,
    ledger: &mut CommsLedger,
    rng: &mut R,
) -> Result<MarginalTable> {
    let cells = query.cells();
    let mut sum = vec![0u64; cells];
    for c in contributions {
        if c.values.len() != cells {
            return Err(Error::ShareMismatch(format!(
                "client {} sent {} values for {} cells",
                c.client,
                c.values.len(),
                cells
            )));
        }
        for (acc, v) in sum.iter_mut().zip(encode(&c.values)?) {
            *acc = acc.wrapping_add(v);
        }
        ledger.record(protocol, c.client, round, cells as u64 * SHARE_BYTES, 0);
    }
    let mut counts = decode(&sum);
    add_gaussian_noise(&mut counts, sigma, rng);
    MarginalTable::new(query.clone(), counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    fn table(counts: Vec<f64>) -> MarginalTable {
        let d = Domain::from_sizes(&[counts.len()]).unwrap();
        MarginalTable::new(MarginalQuery::new(vec![0], &d).unwrap(), counts).unwrap()
    }

    proptest! {
        #[test]
        fn share_roundtrip(counts in prop::collection::vec(0u32..1_000_000, 1..40), seed in any::<u64>()) {
            let t = table(counts.iter().map(|&c| c as f64).collect());
            let mut rng = stream(seed, 0, 0, Purpose::Shares);
            let shares = share(&t, 3, 0, &mut rng).unwrap();
            prop_assert_eq!(reconstruct(&shares).unwrap(), t.counts);
        }

        #[test]
        fn aggregation_is_order_free(a in prop::collection::vec(0u32..1000, 6), b in prop::collection::vec(0u32..1000, 6), seed in any::<u64>()) {
            let mut rng = stream(seed, 0, 0, Purpose::Shares);
            let ta = table(a.iter().map(|&c| c as f64).collect());
            let tb = table(b.iter().map(|&c| c as f64).collect());
            let sa = share(&ta, 3, 0, &mut rng).unwrap();
            let sb = share(&tb, 3, 0, &mut rng).unwrap();
            let ab = aggregate(&ta.query, &[sa.clone(), sb.clone()]).unwrap();
            let ba = aggregate(&ta.query, &[sb, sa]).unwrap();
            prop_assert_eq!(&ab, &ba);
            let expected: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) as f64).collect();
            prop_assert_eq!(ab.counts, expected);
        }
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = stream(1, 0, 0, Purpose::Shares);
        let a = table(vec![1.0, 2.0]);
        let b = table(vec![3.0, 4.0]);
        let sa = share(&a, 3, 0, &mut rng).unwrap();
        let sb = share(&b, 3, 0, &mut rng).unwrap();
        assert_eq!(
            aggregate(&a.query, &[sa.clone(), sb]).unwrap().counts,
            vec![4.0, 6.0]
        );
        assert_eq!(aggregate(&a.query, &[sa]).unwrap().counts, vec![1.0, 2.0]);
    }

    #[test]
    fn mismatched_queries_are_rejected() {
        let mut rng = stream(1, 0, 0, Purpose::Shares);
        let a = table(vec![1.0, 2.0]);
        let b = table(vec![1.0, 2.0, 3.0]);
        let sa = share(&a, 3, 0, &mut rng).unwrap();
        let sb = share(&b, 3, 0, &mut rng).unwrap();
        assert!(aggregate(&a.query, &[sa, sb]).is_err());
        assert!(share(&a, 1, 0, &mut rng).is_err());
        assert!(share(&table(vec![0.5]), 3, 0, &mut rng).is_err());
    }

    #[test]
    fn shares_of_zero_look_random() {
        let mut rng = stream(2, 0, 0, Purpose::Shares);
        let z = table(vec![0.0; 64]);
        let shares = share(&z, 3, 0, &mut rng).unwrap();
        for s in &shares {
            assert!(s.values.iter().filter(|&&v| v == 0).count() <= 1);
            // high bit set about half the time
            let high = s.values.iter().filter(|&&v| v >> 63 == 1).count();
            assert!((16..=48).contains(&high), "{high}");
        }
    }

    #[test]
    fn negative_counts_survive_the_ring() {
        assert_eq!(decode(&encode(&[-3.0, 5.0]).unwrap()), vec![-3.0, 5.0]);
    }

    #[test]
    fn secagg_exact_without_noise_and_charges_bytes() {
        let d = Domain::from_sizes(&[64]).unwrap();
        let q = MarginalQuery::new(vec![0], &d).unwrap();
        let contributions: Vec<Contribution> = (0..3)
            .map(|k| Contribution {
                client: k,
                values: (0..64).map(|i| (i * k) as f64).collect(),
            })
            .collect();
        let mut ledger = CommsLedger::new();
        let mut rng = stream(3, 0, 0, Purpose::Measure);
        let out = secagg_round(&q, &contributions, 0.0, 1, "flaim", &mut ledger, &mut rng).unwrap();
        let expected: Vec<f64> = (0..64).map(|i| (3 * i) as f64).collect();
        assert_eq!(out.counts, expected);
        assert_eq!(ledger.client_total(2), 512);
        assert_eq!(ledger.total_sent(), 3 * 512);
    }

    #[test]
    fn secagg_noise_has_the_right_spread() {
        let d = Domain::from_sizes(&[2]).unwrap();
        let q = MarginalQuery::new(vec![0], &d).unwrap();
        let zeros: Vec<Contribution> = (0..4)
            .map(|k| Contribution {
                client: k,
                values: vec![0.0; 2],
            })
            .collect();
        let sigma = 3.0;
        let reps = 100_000;
        let mut rng = stream(4, 0, 0, Purpose::Measure);
        let mut ledger = CommsLedger::new();
        let (mut sxx, mut syy, mut sxy, mut abs) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..reps {
            let out = secagg_round(&q, &zeros, sigma, 0, "t", &mut ledger, &mut rng).unwrap();
            let (x, y) = (out.counts[0], out.counts[1]);
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
            abs += x.abs();
        }
        let std = (sxx / reps as f64).sqrt();
        assert!((std / sigma - 1.0).abs() < 0.02, "std {std}");
        let folded = abs / reps as f64;
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!((folded / expected - 1.0).abs() < 0.02);
        let corr = sxy / (sxx * syy).sqrt();
        assert!(corr.abs() < 0.01, "corr {corr}");
    }

    #[test]
    fn comms_csv_roundtrip() {
        let mut l = CommsLedger::new();
        l.record("distaim", 3, 0, 1536, 0);
        l.record("flaim", 1, 2, 100, 40);
        l.record("flaim", 1, 2, 28, 0);
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("client,round,bytes_sent,bytes_received,protocol\n"));
        let back = CommsLedger::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.client_total(1), 168);
        assert_eq!(back.clients(), 2);
    }
}
