//! Samplers for the subtree spanned by the root and n mass-measure leaves
//! (sequential line-breaking) and for grid-discretized trees coded by a
//! Brownian excursion, plus the exact joint edge-length density they are
//! validated against.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::randkit::{ln_gamma_fn, sample_exponential, SeedSpec, Stream};
use crate::tree_core::{excursion_to_tree, ExcursionTree, GraftEvent, TreePoint, WeightedTree};
use crate::tree_core::EdgeId;

/// Model parameters: branching mechanism `alpha u^2`, total mass `r`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Params {
    pub alpha: f64,
    pub r: f64,
}

impl Params {
    pub fn new(alpha: f64, r: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() || !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "params need positive finite alpha and r, got alpha={alpha}, r={r}"
            )));
        }
        Ok(Params { alpha, r })
    }
}

/// A nested sequence of spanned subtrees realized on one tree: leaf k was
/// the k-th arrival, and the subtree spanned by the root and the first k
/// leaves has total length `eta[k-1]`.
#[derive(Debug, Clone)]
pub struct NestedSample {
    pub tree: WeightedTree,
    pub leaf_order: Vec<EdgeId>,
    pub eta: Vec<f64>,
}

/// Fenwick tree over edge lengths in arena order, for O(log n) sampling
/// of a length-measure-uniform point.
#[derive(Debug, Clone, Default)]
struct Fenwick {
    tree: Vec<f64>,
}

impl Fenwick {
    fn len(&self) -> usize {
        self.tree.len()
    }

    fn prefix(&self, mut k: usize) -> f64 {
        let mut s = 0.0;
        while k > 0 {
            s += self.tree[k - 1];
            k -= k & k.wrapping_neg();
        }
        s
    }

    fn total(&self) -> f64 {
        self.prefix(self.len())
    }

    fn push(&mut self, v: f64) {
        let k = self.len() + 1;
        let lb = k & k.wrapping_neg();
        let val = v + self.prefix(k - 1) - self.prefix(k - lb);
        self.tree.push(val);
    }

    fn add(&mut self, i: usize, delta: f64) {
        let mut k = i + 1;
        while k <= self.len() {
            self.tree[k - 1] += delta;
            k += k & k.wrapping_neg();
        }
    }

    /// Largest `i` with `prefix(i) <= u`, plus the remainder `u - prefix(i)`.
    fn search(&self, u: f64) -> (usize, f64) {
        let mut pos = 0usize;
        let mut rem = u;
        let mut step = self.len().next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= self.len() && self.tree[next - 1] <= rem {
                rem -= self.tree[next - 1];
                pos = next;
            }
            step >>= 1;
        }
        (pos, rem)
    }
}

/// Incremental line-breaking sampler. Cut lengths are `eta_k =
/// sqrt(r Gamma_k / alpha)` with `Gamma_k` a unit-rate Poisson arrival
/// sequence; each step grafts a branch of length `eta_k - eta_{k-1}` at a
/// point uniform w.r.t. length measure on the current tree.
pub struct SpannedTreeGrower {
    pub params: Params,
    tree: WeightedTree,
    leaf_order: Vec<EdgeId>,
    eta: Vec<f64>,
    gamma: f64,
    fen: Fenwick,
    rng: Stream,
}

impl SpannedTreeGrower {
    pub fn new(params: Params, seed: SeedSpec) -> Result<Self> {
        let mut rng = seed.stream();
        let gamma = sample_exponential(1.0, &mut rng)?;
        let eta1 = (params.r * gamma / params.alpha).sqrt();
        let tree = WeightedTree::single_edge(eta1);
        let mut fen = Fenwick::default();
        fen.push(eta1);
        let first_leaf = tree.root();
        Ok(SpannedTreeGrower {
            params,
            tree,
            leaf_order: vec![first_leaf],
            eta: vec![eta1],
            gamma,
            fen,
            rng,
        })
    }

    pub fn leaf_count(&self) -> usize {
        self.eta.len()
    }

    pub fn tree(&self) -> &WeightedTree {
        &self.tree
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn leaf_order(&self) -> &[EdgeId] {
        &self.leaf_order
    }

    /// Add the next leaf; returns the graft event so callers tracking
    /// per-edge state (e.g. mark lists) can follow the edge split.
    pub fn grow_one(&mut self) -> Result<GraftEvent> {
        self.gamma += sample_exponential(1.0, &mut self.rng)?;
        let eta_next = (self.params.r * self.gamma / self.params.alpha).sqrt();
        let branch_len = eta_next - *self.eta.last().unwrap();
        let at = loop {
            let u: f64 = self.rng.gen_range(0.0..self.fen.total());
            let (edge, offset) = self.fen.search(u);
            if edge >= self.tree.edge_count() {
                continue; // float rounding pushed u past the last edge
            }
            // boundary hits are measure zero; redraw so the offset is
            // strictly interior and the graft is unambiguous
            if offset > 0.0 && offset < self.tree.edge_length(edge) {
                break TreePoint { edge, offset };
            }
        };
        let host_len = self.tree.edge_length(at.edge);
        let ev = self.tree.graft(at, branch_len, &mut self.rng)?;
        // host shrank to its tip-side piece; two new edges appended
        self.fen.add(ev.host, (host_len - at.offset) - host_len);
        debug_assert_eq!(ev.root_side, Some(self.fen.len()));
        self.fen.push(at.offset);
        debug_assert_eq!(ev.branch, self.fen.len());
        self.fen.push(branch_len);
        self.leaf_order.push(ev.branch);
        self.eta.push(eta_next);
        Ok(ev)
    }

    pub fn grow_to(&mut self, n: usize) -> Result<Vec<GraftEvent>> {
        if n < self.leaf_count() {
            return Err(Error::InvalidParameter(format!(
                "cannot shrink a grower from {} to {n} leaves",
                self.leaf_count()
            )));
        }
        let mut events = Vec::with_capacity(n - self.leaf_count());
        while self.leaf_count() < n {
            events.push(self.grow_one()?);
        }
        Ok(events)
    }

    pub fn into_sample(self) -> NestedSample {
        NestedSample {
            tree: self.tree,
            leaf_order: self.leaf_order,
            eta: self.eta,
        }
    }
}

/// Spanned subtree with `n` leaves; total length `L_n = eta[n-1]`.
pub fn sample_spanned_tree(params: Params, n: usize, seed: SeedSpec) -> Result<NestedSample> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "spanned tree needs at least one leaf".into(),
        ));
    }
    let mut g = SpannedTreeGrower::new(params, seed)?;
    g.grow_to(n)?;
    Ok(g.into_sample())
}

/// Joint density of the 2n-1 edge lengths of the spanned subtree:
/// `2 (2n-2)!/(n-1)! (alpha/r)^n L e^{-alpha L^2 / r}` with `L` the total
/// length. Evaluated in log space to stay finite at large n.
pub fn joint_density(params: Params, n: usize, h: &[f64]) -> Result<f64> {
    if n == 0 || h.len() != 2 * n - 1 {
        return Err(Error::InvalidParameter(format!(
            "joint_density needs 2n-1 lengths, got n={n}, {} lengths",
            h.len()
        )));
    }
    if h.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidParameter(
            "edge lengths must be positive and finite".into(),
        ));
    }
    let l: f64 = h.iter().sum();
    let nf = n as f64;
    let ln = std::f64::consts::LN_2 + ln_gamma_fn(2.0 * nf - 1.0) - ln_gamma_fn(nf)
        + nf * (params.alpha / params.r).ln()
        + l.ln()
        - params.alpha * l * l / params.r;
    Ok(ln.exp())
}

/// Grid tree coded by `sqrt(2r/alpha)` times a normalized Brownian
/// excursion on an N-step grid: Gaussian walk, bridged, then rotated at
/// its minimum (Vervaat), with `r/N` of mass per step.
pub fn sample_excursion_tree(params: Params, n_steps: usize, seed: SeedSpec) -> Result<ExcursionTree> {
    let heights = sample_excursion_heights(params, n_steps, seed)?;
    excursion_to_tree(&heights, params.r / n_steps as f64)
}

/// The height array behind `sample_excursion_tree`, exposed for tests
/// that need the raw coding function.
pub fn sample_excursion_heights(params: Params, n_steps: usize, seed: SeedSpec) -> Result<Vec<f64>> {
    if n_steps < 2 {
        return Err(Error::InvalidParameter(
            "excursion grid needs at least 2 steps".into(),
        ));
    }
    let mut rng = seed.stream();
    let n = n_steps;
    let scale = 1.0 / (n as f64).sqrt();
    let mut walk = Vec::with_capacity(n + 1);
    walk.push(0.0f64);
    for i in 1..=n {
        let g: f64 = StandardNormal.sample(&mut rng);
        walk.push(walk[i - 1] + g * scale);
    }
    let w_n = walk[n];
    // bridge, then rotate at the argmin
    let mut bridge: Vec<f64> = (0..=n)
        .map(|i| walk[i] - (i as f64 / n as f64) * w_n)
        .collect();
    bridge[n] = 0.0;
    let mut arg_min = 0usize;
    for i in 1..n {
        if bridge[i] < bridge[arg_min] {
            arg_min = i;
        }
    }
    let b_min = bridge[arg_min];
    let amp = (2.0 * params.r / params.alpha).sqrt();
    let mut heights = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let j = (i + arg_min) % n;
        heights.push(amp * (bridge[j] - b_min));
    }
    heights[0] = 0.0;
    heights[n] = 0.0;
    Ok(heights)
}
