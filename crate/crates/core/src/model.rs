//! Maximum-entropy estimation from noisy marginal measurements.
//!
//! Attributes that are measured together are grouped into connected
//! components; each component holds a full joint table. Components are
//! independent of each other. Within a component the table is fitted by
//! entropic mirror descent (multiplicative updates) from the uniform
//! distribution with a backtracking step size, minimising
//!
//! ```text
//!     Σ_i α_i ‖ M_{q_i}(μ) − y_i / n_i ‖²
//! ```
//!
//! over probability tables μ, where `y_i` are the noisy counts of
//! measurement `i` and `n_i` is the record mass they describe. The fitted
//! table is reported in count units, scaled to the model total N̂.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    strides, DiscreteDataset, Domain, MarginalQuery, MarginalSource, MarginalTable,
};
use crate::error::{Error, Result};

/// Bytes per stored table cell when estimating model size.
pub const CELL_BYTES: u128 = 8;

/// One noisy marginal fed to the fitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub round: usize,
    pub query: MarginalQuery,
    /// Noisy counts; entries may be negative.
    pub values: Vec<f64>,
    pub sigma: f64,
    /// Fitter weight α.
    pub weight: f64,
    /// Record mass behind `values`. `None` means "same as the model total".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
}

impl Measurement {
    /// A measurement weighted by 1/σ that describes the whole dataset.
    pub fn new(round: usize, query: MarginalQuery, values: Vec<f64>, sigma: f64) -> Self {
        Measurement {
            round,
            query,
            values,
            sigma,
            weight: 1.0 / sigma,
            total: None,
        }
    }

    pub fn noisy_total(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub iterations: usize,
    /// Stop once an accepted step lowers the objective by less than this fraction.
    pub tolerance: f64,
    /// Largest joint table the fitter will allocate.
    pub max_cells: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            iterations: 100,
            tolerance: 1e-10,
            max_cells: 1 << 24,
        }
    }
}

impl FitOptions {
    pub fn with_iterations(iterations: usize) -> Self {
        FitOptions {
            iterations,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub attrs: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Joint counts in mixed-radix order, summing to the model total.
    pub table: Vec<f64>,
}

impl Component {
    fn uniform(attrs: Vec<usize>, domain: &Domain, total: f64) -> Self {
        let sizes: Vec<usize> = attrs.iter().map(|&a| domain.size(a)).collect();
        let cells: usize = sizes.iter().product();
        Component {
            attrs,
            sizes,
            table: vec![total / cells as f64; cells],
        }
    }

    pub fn cells(&self) -> usize {
        self.table.len()
    }

    /// Marginal of the table over `sub`, in count units.
    fn marginal(&self, sub: &[usize]) -> Vec<f64> {
        if sub == self.attrs.as_slice() {
            return self.table.clone();
        }
        let lattice = Lattice::new(&self.attrs, &self.sizes, &[sub.to_vec()]);
        lattice.marginals(&self.table).pop().unwrap()
    }
}

/// Per-component fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit {
    pub attrs: Vec<usize>,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the uniform table.
    pub objective_trace: Vec<f64>,
}

impl ComponentFit {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

/// A fitted model: independent components over a partition of the attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    domain: Domain,
    components: Vec<Component>,
    total: f64,
    fits: Vec<ComponentFit>,
}

/// Attribute groups induced by co-measurement, with every attribute present.
pub fn component_structure<'a>(
    domain: &Domain,
    queries: impl IntoIterator<Item = &'a MarginalQuery>,
) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..domain.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for q in queries {
        let attrs = q.attrs();
        for w in attrs.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; domain.len()];
    for a in 0..domain.len() {
        let root = find(&mut parent, a);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(a);
    }
    groups
}

fn cells_u128(domain: &Domain, attrs: &[usize]) -> u128 {
    attrs
        .iter()
        .fold(1u128, |acc, &a| acc.saturating_mul(domain.size(a) as u128))
}

/// Bytes needed for the given components: Σ_components ∏ cardinalities × 8.
pub fn structure_bytes(domain: &Domain, groups: &[Vec<usize>]) -> u128 {
    groups
        .iter()
        .map(|g| cells_u128(domain, g))
        .fold(0u128, |acc, c| acc.saturating_add(c))
        .saturating_mul(CELL_BYTES)
}

/// Bytes after merging every group that touches `candidate` with it.
pub fn size_after_merge(domain: &Domain, groups: &[Vec<usize>], candidate: &MarginalQuery) -> u128 {
    let mut merged: Vec<usize> = candidate.attrs().to_vec();
    let mut rest = 0u128;
    for g in groups {
        if g.iter().any(|a| candidate.attrs().binary_search(a).is_ok()) {
            merged.extend_from_slice(g);
        } else {
            rest = rest.saturating_add(cells_u128(domain, g));
        }
    }
    merged.sort_unstable();
    merged.dedup();
    rest.saturating_add(cells_u128(domain, &merged))
        .saturating_mul(CELL_BYTES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelSizeEstimate {
    pub bytes: u128,
}

/// Model size if `candidate` were measured next.
pub fn model_size(model: &ModelState, candidate: &MarginalQuery) -> ModelSizeEstimate {
    ModelSizeEstimate {
        bytes: size_after_merge(&model.domain, &model.structure(), candidate),
    }
}

/// Weighted mean of clipped measurement totals, floored at 1.
pub fn estimate_total(measurements: &[Measurement]) -> f64 {
    let wsum: f64 = measurements.iter().map(|m| m.weight).sum();
    if wsum <= 0.0 {
        return 1.0;
    }
    let t: f64 = measurements
        .iter()
        .map(|m| m.weight * m.noisy_total().max(0.0))
        .sum::<f64>()
        / wsum;
    t.max(1.0)
}

fn validate(measurements: &[Measurement], domain: &Domain) -> Result<()> {
    for m in measurements {
        let q = &m.query;
        if let Some(&a) = q.attrs().iter().find(|&&a| a >= domain.len()) {
            return Err(Error::AttributeOutOfRange {
                index: a,
                width: domain.len(),
            });
        }
        if domain.cells(q.attrs()) != Some(q.cells()) || m.values.len() != q.cells() {
            return Err(Error::InvalidQuery(format!(
                "measurement on {:?} has {} values for {} cells",
                q.attrs(),
                m.values.len(),
                q.cells()
            )));
        }
        if !(m.weight > 0.0) || !m.weight.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "measurement weight must be positive, got {}",
                m.weight
            )));
        }
    }
    Ok(())
}

/// Marginalisation plan for one component: every target marginal is
/// reached from the joint by summing out one attribute at a time, and
/// intermediate tables are shared between targets.
struct Lattice {
    /// Node 0 is the joint table itself.
    nodes: Vec<LatticeNode>,
    targets: Vec<usize>,
}

struct LatticeNode {
    attrs: Vec<usize>,
    cells: usize,
    parent: usize,
    /// Parent viewed as `[outer, mid, inner]` with `mid` summed out.
    outer: usize,
    mid: usize,
    inner: usize,
}

impl Lattice {
    fn new(attrs: &[usize], sizes: &[usize], targets: &[Vec<usize>]) -> Self {
        let size_of = |a: usize| sizes[attrs.binary_search(&a).unwrap()];
        let mut nodes = vec![LatticeNode {
            attrs: attrs.to_vec(),
            cells: sizes.iter().product(),
            parent: 0,
            outer: 0,
            mid: 0,
            inner: 0,
        }];
        // larger targets first so smaller ones can start from them
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(targets[i].len()));
        let mut target_nodes = vec![0; targets.len()];
        for i in order {
            let want = &targets[i];
            let contains = |n: &LatticeNode| want.iter().all(|a| n.attrs.binary_search(a).is_ok());
            let mut at = (0..nodes.len())
                .filter(|&n| contains(&nodes[n]))
                .min_by_key(|&n| nodes[n].cells)
                .unwrap();
            // drop the largest surplus attribute, lowest index on ties (long contiguous runs)
            while let Some(drop) = nodes[at]
                .attrs
                .iter()
                .copied()
                .filter(|a| want.binary_search(a).is_err())
                .max_by_key(|&a| (size_of(a), std::cmp::Reverse(a)))
            {
                let mut child: Vec<usize> = nodes[at].attrs.clone();
                child.retain(|&a| a != drop);
                at = match nodes.iter().position(|n| n.attrs == child) {
                    Some(existing) => existing,
                    None => {
                        let pos = nodes[at].attrs.binary_search(&drop).unwrap();
                        let parent_sizes: Vec<usize> =
                            nodes[at].attrs.iter().map(|&a| size_of(a)).collect();
                        let outer: usize = parent_sizes[..pos].iter().product();
                        let inner: usize = parent_sizes[pos + 1..].iter().product();
                        nodes.push(LatticeNode {
                            cells: outer * inner,
                            attrs: child,
                            parent: at,
                            outer,
                            mid: parent_sizes[pos],
                            inner,
                        });
                        nodes.len() - 1
                    }
                };
            }
            target_nodes[i] = at;
        }
        Lattice {
            nodes,
            targets: target_nodes,
        }
    }

    /// Marginals of `mu` for each target, in target order.
    fn marginals(&self, mu: &[f64]) -> Vec<Vec<f64>> {
        let mut tables: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        tables.push(Vec::new());
        for node in &self.nodes[1..] {
            let parent = if node.parent == 0 {
                mu
            } else {
                &tables[node.parent]
            };
            let mut out = vec![0.0; node.cells];
            if node.inner == 1 {
                for (d, run) in out.iter_mut().zip(parent.chunks_exact(node.mid)) {
                    *d = run.iter().sum();
                }
                tables.push(out);
                continue;
            }
            for o in 0..node.outer {
                let dst = &mut out[o * node.inner..(o + 1) * node.inner];
                for m in 0..node.mid {
                    let start = (o * node.mid + m) * node.inner;
                    for (d, s) in dst.iter_mut().zip(&parent[start..start + node.inner]) {
                        *d += s;
                    }
                }
            }
            tables.push(out);
        }
        self.targets
            .iter()
            .map(|&n| {
                if n == 0 {
                    mu.to_vec()
                } else {
                    tables[n].clone()
                }
            })
            .collect()
    }

    /// Adjoint of [`Lattice::marginals`]: writes Σ_k r_k[proj_k(c)] into `out`.
    fn back_project(&self, residuals: Vec<Vec<f64>>, out: &mut [f64]) {
        let mut adjoint: Vec<Vec<f64>> =
            self.nodes[1..].iter().map(|n| vec![0.0; n.cells]).collect();
        adjoint.insert(0, Vec::new());
        out.iter_mut().for_each(|g| *g = 0.0);
        for (&n, r) in self.targets.iter().zip(residuals) {
            let slot = if n == 0 {
                &mut *out
            } else {
                adjoint[n].as_mut_slice()
            };
            for (a, v) in slot.iter_mut().zip(&r) {
                *a += v;
            }
        }
        for idx in (1..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            let child = std::mem::take(&mut adjoint[idx]);
            let parent = if node.parent == 0 {
                &mut *out
            } else {
                adjoint[node.parent].as_mut_slice()
            };
            if node.inner == 1 {
                for (run, v) in parent.chunks_exact_mut(node.mid).zip(&child) {
                    run.iter_mut().for_each(|d| *d += v);
                }
                continue;
            }
            for o in 0..node.outer {
                let src = &child[o * node.inner..(o + 1) * node.inner];
                for m in 0..node.mid {
                    let start = (o * node.mid + m) * node.inner;
                    for (d, s) in parent[start..start + node.inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

struct Term {
    weight: f64,
    target: Vec<f64>,
    proj: usize,
}

/// Fits a model to `measurements`.
pub fn fit(
    measurements: &[Measurement],
    domain: &Domain,
    options: &FitOptions,
) -> Result<ModelState> {
    if options.iterations == 0 {
        return Err(Error::InvalidParameter(
            "iterations must be at least 1".into(),
        ));
    }
    validate(measurements, domain)?;
    let total = estimate_total(measurements);
    let groups = component_structure(domain, measurements.iter().map(|m| &m.query));
    for g in &groups {
        let cells = cells_u128(domain, g);
        if cells > options.max_cells as u128 {
            return Err(Error::ComponentTooLarge {
                attrs: g.clone(),
                cells,
                cap: options.max_cells as u128,
            });
        }
    }
    let results: Vec<(Component, ComponentFit)> = groups
        .into_par_iter()
        .map(|g| fit_component(g, measurements, domain, total, options))
        .collect();
    let (components, fits) = results.into_iter().unzip();
    Ok(ModelState {
        domain: domain.clone(),
        components,
        total,
        fits,
    })
}

fn fit_component(
    attrs: Vec<usize>,
    measurements: &[Measurement],
    domain: &Domain,
    total: f64,
    options: &FitOptions,
) -> (Component, ComponentFit) {
    let mut comp = Component::uniform(attrs, domain, total);
    let mut targets: Vec<Vec<usize>> = Vec::new();
    let mut terms = Vec::new();
    for m in measurements {
        let q = m.query.attrs();
        if comp.attrs.binary_search(&q[0]).is_err() {
            continue;
        }
        let proj = match targets.iter().position(|a| a.as_slice() == q) {
            Some(i) => i,
            None => {
                targets.push(q.to_vec());
                targets.len() - 1
            }
        };
        let mass = m.total.unwrap_or(total).max(1e-12);
        terms.push(Term {
            weight: m.weight,
            target: m.values.iter().map(|v| v / mass).collect(),
            proj,
        });
    }
    let mut fit = ComponentFit {
        attrs: comp.attrs.clone(),
        iterations: 0,
        objective_trace: Vec::new(),
    };
    if terms.is_empty() {
        return (comp, fit);
    }

    let n = comp.cells();
    let lattice = Lattice::new(&comp.attrs, &comp.sizes, &targets);
    let marginals = |mu: &[f64]| -> Vec<Vec<f64>> { lattice.marginals(mu) };
    let objective = |margs: &[Vec<f64>]| -> f64 {
        terms
            .iter()
            .map(|t| {
                let m = &margs[t.proj];
                t.weight
                    * m.iter()
                        .zip(&t.target)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
            })
            .sum()
    };

    let mut theta = vec![-(n as f64).ln(); n];
    let mut mu = vec![1.0 / n as f64; n];
    let mut margs = marginals(&mu);
    let mut obj = objective(&margs);
    fit.objective_trace.push(obj);
    let weight_sum: f64 = terms.iter().map(|t| t.weight).sum();
    let mut step = 2.0 / weight_sum;
    let mut grad = vec![0.0; n];
    let mut candidate = vec![0.0; n];
    let mut cand_mu = vec![0.0; n];
    let mut grow = true;

    for _ in 0..options.iterations {
        // dL/dμ_c = Σ_i 2 α_i (M_i μ − ỹ_i)[proj_i(c)]
        let mut residuals: Vec<Vec<f64>> = margs.iter().map(|m| vec![0.0; m.len()]).collect();
        for t in &terms {
            let r = &mut residuals[t.proj];
            for ((slot, x), y) in r.iter_mut().zip(&margs[t.proj]).zip(&t.target) {
                *slot += 2.0 * t.weight * (x - y);
            }
        }
        lattice.back_project(residuals, &mut grad);

        // grow after a first-try accept, then backtrack until the Armijo condition holds
        if grow {
            step *= 2.0;
        }
        grow = true;
        let mut accepted = None;
        let g_mu: f64 = grad.iter().zip(&mu).map(|(g, m)| g * m).sum();
        for _ in 0..60 {
            let mut top = f64::NEG_INFINITY;
            for ((c, th), g) in candidate.iter_mut().zip(&theta).zip(&grad) {
                *c = th - step * g;
                top = top.max(*c);
            }
            // unnormalised weights; marginals are linear so scale afterwards
            let (mut z, mut g_w) = (0.0, 0.0);
            for ((m, c), g) in cand_mu.iter_mut().zip(&candidate).zip(&grad) {
                *m = (c - top).exp();
                z += *m;
                g_w += g * *m;
            }
            let mut cand_margs = marginals(&cand_mu);
            cand_margs.iter_mut().flatten().for_each(|x| *x /= z);
            let cand_obj = objective(&cand_margs);
            let predicted = g_mu - g_w / z;
            if cand_obj <= obj && obj - cand_obj >= 0.5 * predicted {
                let log_z = top + z.ln();
                for (m, c) in cand_mu.iter_mut().zip(candidate.iter_mut()) {
                    *m /= z;
                    *c -= log_z;
                }
                accepted = Some((cand_margs, cand_obj));
                break;
            }
            step *= 0.5;
            grow = false;
        }
        let Some((new_margs, new_obj)) = accepted else {
            break;
        };
        std::mem::swap(&mut theta, &mut candidate);
        std::mem::swap(&mut mu, &mut cand_mu);
        margs = new_margs;
        let decrease = obj - new_obj;
        obj = new_obj;
        fit.iterations += 1;
        fit.objective_trace.push(obj);
        if decrease <= options.tolerance * obj.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    for (cell, m) in comp.table.iter_mut().zip(&mu) {
        *cell = m * total;
    }
    (comp, fit)
}

impl ModelState {
    /// The uniform model over `domain` with mass `total`.
    pub fn uniform(domain: &Domain, total: f64) -> Self {
        let components = (0..domain.len())
            .map(|a| Component::uniform(vec![a], domain, total))
            .collect();
        ModelState {
            domain: domain.clone(),
            components,
            total,
            fits: Vec::new(),
        }
    }

    /// Builds a model directly from component tables (mass `total` each).
    pub fn from_components(
        domain: &Domain,
        components: Vec<Component>,
        total: f64,
    ) -> Result<Self> {
        let mut seen = vec![false; domain.len()];
        for c in &components {
            for &a in &c.attrs {
                if a >= domain.len() || std::mem::replace(&mut seen[a], true) {
                    return Err(Error::InvalidParameter(format!(
                        "attribute {a} missing from domain or in two components"
                    )));
                }
            }
            if c.table.len() as u128 != cells_u128(domain, &c.attrs) {
                return Err(Error::InvalidParameter(format!(
                    "component {:?} has the wrong table length",
                    c.attrs
                )));
            }
        }
        let mut components = components;
        for (a, s) in seen.iter().enumerate() {
            if !s {
                components.push(Component::uniform(vec![a], domain, total));
            }
        }
        components.sort_by_key(|c| c.attrs[0]);
        Ok(ModelState {
            domain: domain.clone(),
            components,
            total,
            fits: Vec::new(),
        })
    }

    /// Same component structure, with tables replaced by the empirical
    /// distribution of `data`.
    pub fn empirical_like(&self, data: &DiscreteDataset) -> Result<ModelState> {
        let components = self
            .components
            .iter()
            .map(|c| {
                let q = MarginalQuery::new(c.attrs.clone(), &self.domain)?;
                let t = crate::domain::evaluate_marginal(data, &q)?;
                Ok(Component {
                    attrs: c.attrs.clone(),
                    sizes: c.sizes.clone(),
                    table: t.counts,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelState {
            domain: self.domain.clone(),
            components,
            total: data.len() as f64,
            fits: Vec::new(),
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// N̂, the mass every component table sums to.
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn fits(&self) -> &[ComponentFit] {
        &self.fits
    }

    pub fn structure(&self) -> Vec<Vec<usize>> {
        self.components.iter().map(|c| c.attrs.clone()).collect()
    }

    pub fn size_bytes(&self) -> u128 {
        structure_bytes(&self.domain, &self.structure())
    }

    fn component_of(&self, attr: usize) -> usize {
        self.components
            .iter()
            .position(|c| c.attrs.binary_search(&attr).is_ok())
            .expect("every attribute belongs to a component")
    }

    /// Answers M_q from the model. Queries spanning several components are
    /// answered by the product of the independent component marginals.
    pub fn answer(&self, q: &MarginalQuery) -> Result<MarginalTable> {
        if let Some(&a) = q.attrs().iter().find(|&&a| a >= self.domain.len()) {
            return Err(Error::AttributeOutOfRange {
                index: a,
                width: self.domain.len(),
            });
        }
        if self.domain.cells(q.attrs()) != Some(q.cells()) {
            return Err(Error::InvalidQuery(format!(
                "{:?} is not from this domain",
                q.attrs()
            )));
        }
        // group q's attributes by component, preserving q's order inside each group
        let mut parts: Vec<(usize, Vec<usize>)> = Vec::new();
        for &a in q.attrs() {
            let c = self.component_of(a);
            match parts.iter_mut().find(|(pc, _)| *pc == c) {
                Some((_, v)) => v.push(a),
                None => parts.push((c, vec![a])),
            }
        }
        if parts.len() == 1 {
            let (c, sub) = &parts[0];
            return MarginalTable::new(q.clone(), self.components[*c].marginal(sub));
        }
        let total = self.total;
        let sizes: Vec<usize> = q.attrs().iter().map(|&a| self.domain.size(a)).collect();
        let factors: Vec<(Vec<usize>, Vec<usize>, Vec<f64>)> = parts
            .iter()
            .map(|(c, sub)| {
                let positions: Vec<usize> = sub
                    .iter()
                    .map(|a| q.attrs().binary_search(a).unwrap())
                    .collect();
                let sub_sizes: Vec<usize> = positions.iter().map(|&p| sizes[p]).collect();
                let marg = self.components[*c].marginal(sub);
                let probs = if total > 0.0 {
                    marg.iter().map(|v| v / total).collect()
                } else {
                    marg
                };
                (positions, strides(&sub_sizes), probs)
            })
            .collect();
        let mut counts = vec![0.0; q.cells()];
        let mut digits = vec![0usize; sizes.len()];
        for slot in counts.iter_mut() {
            let mut p = total;
            for (positions, st, probs) in &factors {
                let idx: usize = positions
                    .iter()
                    .zip(st)
                    .map(|(&pos, s)| digits[pos] * s)
                    .sum();
                p *= probs[idx];
            }
            *slot = p;
            for k in (0..digits.len()).rev() {
                digits[k] += 1;
                if digits[k] < sizes[k] {
                    break;
                }
                digits[k] = 0;
            }
        }
        MarginalTable::new(q.clone(), counts)
    }

    /// Draws `n_rows` i.i.d. records; components are sampled independently.
    pub fn sample<R: Rng + ?Sized>(&self, n_rows: usize, rng: &mut R) -> DiscreteDataset {
        let d = self.domain.len();
        let mut values = vec![0u32; n_rows * d];
        for comp in &self.components {
            let dist = WeightedIndex::new(comp.table.iter().map(|v| v.max(0.0))).ok();
            let st = strides(&comp.sizes);
            for r in 0..n_rows {
                let cell = match &dist {
                    Some(w) => w.sample(rng),
                    None => rng.random_range(0..comp.cells()),
                };
                for (k, &a) in comp.attrs.iter().enumerate() {
                    values[r * d + a] = ((cell / st[k]) % comp.sizes[k]) as u32;
                }
            }
        }
        DiscreteDataset::from_flat(self.domain.clone(), values).expect("sampled codes are in range")
    }

    /// Mean negative log-likelihood of `holdout`, each component probability floored at `floor`.
    pub fn nll(&self, holdout: &DiscreteDataset, floor: f64) -> Result<f64> {
        if holdout.is_empty() {
            return Err(Error::InvalidParameter("holdout set is empty".into()));
        }
        if holdout.domain() != &self.domain {
            return Err(Error::InvalidDomain(
                "holdout uses a different domain".into(),
            ));
        }
        let st: Vec<Vec<usize>> = self.components.iter().map(|c| strides(&c.sizes)).collect();
        let mut sum = 0.0;
        for row in holdout.rows() {
            for (comp, s) in self.components.iter().zip(&st) {
                let idx: usize = comp
                    .attrs
                    .iter()
                    .zip(s)
                    .map(|(&a, &k)| row[a] as usize * k)
                    .sum();
                let p = if self.total > 0.0 {
                    comp.table[idx] / self.total
                } else {
                    0.0
                };
                sum -= p.max(floor).ln();
            }
        }
        Ok(sum / holdout.len() as f64)
    }

    pub fn export(&self) -> ModelExport {
        ModelExport {
            domain: self.domain.clone(),
            total: self.total,
            components: self.components.clone(),
        }
    }
}

impl MarginalSource for ModelState {
    fn marginal(&self, q: &MarginalQuery) -> Result<MarginalTable> {
        self.answer(q)
    }
}

/// JSON form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelExport {
    pub domain: Domain,
    pub total: f64,
    pub components: Vec<Component>,
}

impl ModelExport {
    pub fn into_model(self) -> Result<ModelState> {
        ModelState::from_components(&self.domain, self.components, self.total)
    }
}
