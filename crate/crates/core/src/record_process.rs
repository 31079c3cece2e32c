//! The Poisson mark measure on a tree, the record function theta, record
//! counting on the pruned spanned subtree, the mass-measure estimator of
//! Theta, and the half-line record process with its martingale checks.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::crt_sampler::{sample_spanned_tree, Params, SpannedTreeGrower};
use crate::error::{Error, Result};
use crate::randkit::{
    ks_statistic, mean_se, median, sample_exponential, RayleighLaw, SeedSpec, Stream,
};
use crate::tree_core::{EdgeId, GraftEvent, TreePoint, WeightedTree};

/// Hard cap on horizon doublings; reaching it means the mark intensity is
/// effectively zero on the queried path.
const MAX_DOUBLINGS: u32 = 200;

/// One lazy realization of the Poisson mark measure, kept per-edge.
/// Every mark with time below the edge's horizon is materialized; horizons
/// only grow, and marks are never resampled, so refining a tree or asking
/// for deeper horizons stays consistent with all earlier answers.
pub struct MarkRealization {
    pub params: Params,
    marks: Vec<Vec<(f64, f64)>>, // (offset, time), sorted by offset
    horizon: Vec<f64>,
    rng: Stream,
}

impl MarkRealization {
    pub fn new(params: Params, seed: SeedSpec) -> Self {
        MarkRealization {
            params,
            marks: Vec::new(),
            horizon: Vec::new(),
            rng: seed.stream(),
        }
    }

    pub fn ensure_edges(&mut self, count: usize) {
        while self.marks.len() < count {
            self.marks.push(Vec::new());
            self.horizon.push(0.0);
        }
    }

    pub fn marks_on(&self, edge: EdgeId) -> &[(f64, f64)] {
        &self.marks[edge]
    }

    pub fn horizon_of(&self, edge: EdgeId) -> f64 {
        self.horizon[edge]
    }

    /// Materialize all marks on `edge` (of length `len`) with times up to
    /// `h`. No-op when the horizon is already that deep.
    pub fn ensure_horizon(&mut self, edge: EdgeId, len: f64, h: f64) -> Result<()> {
        self.ensure_edges(edge + 1);
        let h0 = self.horizon[edge];
        if h <= h0 {
            return Ok(());
        }
        let lambda = 2.0 * self.params.alpha * len * (h - h0);
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Numeric(format!(
                "mark intensity {lambda} on edge {edge} (len {len}, horizon {h0} -> {h})"
            )));
        }
        if lambda > 0.0 {
            let count = Poisson::new(lambda)
                .map_err(|e| Error::Numeric(format!("poisson({lambda}): {e}")))?
                .sample(&mut self.rng) as usize;
            for _ in 0..count {
                let offset = self.rng.gen_range(0.0..len);
                let time = self.rng.gen_range(h0..h);
                self.marks[edge].push((offset, time));
            }
            self.marks[edge]
                .sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        }
        self.horizon[edge] = h;
        Ok(())
    }

    /// Follow an edge split: marks left of the cut move (same offsets) to
    /// the new root-side edge, the rest shift down; both pieces keep the
    /// host's horizon and the fresh branch starts empty.
    pub fn on_split(&mut self, ev: &GraftEvent) {
        let top = ev.branch.max(ev.root_side.unwrap_or(0));
        self.ensure_edges(top + 1);
        self.horizon[ev.branch] = 0.0;
        let Some(root_side) = ev.root_side else {
            return; // tip graft: nothing moved
        };
        let s = ev.split_offset;
        let host_marks = std::mem::take(&mut self.marks[ev.host]);
        let (lower, upper): (Vec<_>, Vec<_>) = host_marks.into_iter().partition(|m| m.0 <= s);
        self.marks[root_side] = lower;
        self.marks[ev.host] = upper.into_iter().map(|(o, t)| (o - s, t)).collect();
        self.horizon[root_side] = self.horizon[ev.host];
    }

    /// Minimum materialized mark time on `edge` among offsets `<= upto`.
    fn min_time(&self, edge: EdgeId, upto: f64) -> f64 {
        self.marks[edge]
            .iter()
            .take_while(|m| m.0 <= upto)
            .map(|m| m.1)
            .fold(f64::INFINITY, f64::min)
    }
}

/// First mark time on the root path of `p`, growing horizons by doubling
/// until the minimum is certified below the materialized horizon. Returns
/// infinity for the root point itself.
pub fn theta_on_path(
    marks: &mut MarkRealization,
    tree: &WeightedTree,
    p: TreePoint,
) -> Result<f64> {
    let path_len = tree.dist_to_root(p)?;
    if path_len == 0.0 {
        return Ok(f64::INFINITY);
    }
    marks.ensure_edges(tree.edge_count());
    let path = tree.path_from_root(p.edge)?;
    let mut h = (2.0 * marks.params.alpha * path_len).recip();
    for _ in 0..MAX_DOUBLINGS {
        let mut min = f64::INFINITY;
        for &e in &path {
            marks.ensure_horizon(e, tree.edge_length(e), h)?;
            let upto = if e == p.edge {
                p.offset
            } else {
                tree.edge_length(e)
            };
            min = min.min(marks.min_time(e, upto));
        }
        if min <= h {
            return Ok(min);
        }
        h *= 2.0;
    }
    Err(Error::Numeric(format!(
        "no mark found on a path of length {path_len} after {MAX_DOUBLINGS} doublings"
    )))
}

/// Outcome of one record sweep over the pruned spanned subtree.
#[derive(Debug, Clone)]
pub struct RecordOutcome {
    /// theta at each leaf, i.e. the first mark time on its full root path.
    pub theta_at_leaf: Vec<(EdgeId, f64)>,
    /// Record count on the tree minus its root edge.
    pub x_star: usize,
    /// First mark time on the root edge.
    pub theta_m: f64,
    /// The records themselves, in depth-first order.
    pub records: Vec<(TreePoint, f64)>,
}

/// Depth-first record sweep. theta at the first branch point is the
/// minimum mark time on the root edge; below it a mark is a record iff
/// its time beats the running minimum carried along the path, and marks
/// need only be materialized up to the entry minimum of their edge.
pub fn simulate_records(
    marks: &mut MarkRealization,
    tree: &WeightedTree,
) -> Result<RecordOutcome> {
    let (root_edge, h_root) = tree.first_branch_point()?;
    marks.ensure_edges(tree.edge_count());
    let mut h = (2.0 * marks.params.alpha * h_root).recip();
    let theta_m = loop {
        marks.ensure_horizon(root_edge, h_root, h)?;
        let m = marks.min_time(root_edge, h_root);
        if m <= h {
            break m;
        }
        h *= 2.0;
        if !h.is_finite() {
            return Err(Error::Numeric("root-edge horizon overflow".into()));
        }
    };

    let mut records = Vec::new();
    let mut theta_at_leaf = Vec::new();
    let mut stack: Vec<(EdgeId, f64)> = tree
        .children(root_edge)
        .iter()
        .rev()
        .map(|&c| (c, theta_m))
        .collect();
    while let Some((e, entry_min)) = stack.pop() {
        let len = tree.edge_length(e);
        marks.ensure_horizon(e, len, entry_min)?;
        let mut cur = entry_min;
        // clone-free scan; marks are sorted by offset
        for i in 0..marks.marks[e].len() {
            let (off, t) = marks.marks[e][i];
            if t < cur {
                records.push((TreePoint { edge: e, offset: off }, t));
                cur = t;
            }
        }
        if tree.children(e).is_empty() {
            theta_at_leaf.push((e, cur));
        } else {
            for &c in tree.children(e).iter().rev() {
                stack.push((c, cur));
            }
        }
    }
    Ok(RecordOutcome {
        theta_at_leaf,
        x_star: records.len(),
        theta_m,
        records,
    })
}

/// Mass-measure Monte Carlo estimate of Theta: leaves are distributed
/// like the normalized mass measure, so `(r/n) sum_k theta(U_k)` is the
/// natural estimator of the integral of theta against mass.
pub fn theta_hat(outcome: &RecordOutcome, params: Params, n: usize) -> Result<f64> {
    if outcome.theta_at_leaf.len() != n {
        return Err(Error::InvalidParameter(format!(
            "outcome has {} leaves, expected {n}",
            outcome.theta_at_leaf.len()
        )));
    }
    let sum: f64 = outcome.theta_at_leaf.iter().map(|&(_, t)| t).sum();
    Ok(params.r / n as f64 * sum)
}

/// One row of a record sweep, as exported by the CLI.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RecordRow {
    pub replicate: u64,
    pub n: usize,
    pub l_n: f64,
    pub h_root: f64,
    pub theta_m: f64,
    pub x_star: usize,
    pub theta_hat: f64,
    pub z: f64,
}

/// Grow one spanned tree, run one record sweep, reduce to a row.
/// Replicate `i` uses streams `2i` (tree) and `2i+1` (marks) of the
/// master seed, so sweeps do not depend on scheduling.
pub fn run_record_replicate(
    params: Params,
    n: usize,
    master_seed: u64,
    replicate: u64,
) -> Result<RecordRow> {
    let sample = sample_spanned_tree(params, n, SeedSpec::new(master_seed, 2 * replicate))?;
    let mut marks = MarkRealization::new(params, SeedSpec::new(master_seed, 2 * replicate + 1));
    let outcome = simulate_records(&mut marks, &sample.tree)?;
    let th = theta_hat(&outcome, params, n)?;
    let (_, h_root) = sample.tree.first_branch_point()?;
    Ok(RecordRow {
        replicate,
        n,
        l_n: *sample.eta.last().unwrap(),
        h_root,
        theta_m: outcome.theta_m,
        x_star: outcome.x_star,
        theta_hat: th,
        z: (2.0 * params.alpha / params.r).sqrt() * th,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RayleighReport {
    pub n: usize,
    pub replicates: usize,
    pub ks_distance: f64,
    pub threshold: f64,
    pub pass: bool,
    pub mean_theta: f64,
    pub se_theta: f64,
    pub mean_theta_sq: f64,
    pub se_theta_sq: f64,
    #[serde(skip)]
    pub rows: Vec<RecordRow>,
}

/// Sweep `replicates` record simulations and test the normalized
/// `Z = sqrt(2 alpha / r) Theta_hat` against the standard Rayleigh law.
pub fn rayleigh_check(
    params: Params,
    n: usize,
    replicates: usize,
    master_seed: u64,
    threshold: f64,
) -> Result<RayleighReport> {
    if n < 2 || replicates < 2 {
        return Err(Error::InvalidParameter(
            "rayleigh_check needs n >= 2 and at least 2 replicates".into(),
        ));
    }
    let rows: Vec<RecordRow> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| run_record_replicate(params, n, master_seed, i))
        .collect::<Result<_>>()?;
    let mut zs: Vec<f64> = rows.iter().map(|r| r.z).collect();
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let law = RayleighLaw;
    let d = ks_statistic(&zs, |x| law.cdf(x))?;
    let thetas: Vec<f64> = rows.iter().map(|r| r.theta_hat).collect();
    let theta_sqs: Vec<f64> = thetas.iter().map(|t| t * t).collect();
    let (mean_theta, se_theta) = mean_se(&thetas);
    let (mean_theta_sq, se_theta_sq) = mean_se(&theta_sqs);
    Ok(RayleighReport {
        n,
        replicates,
        ks_distance: d,
        threshold,
        pass: d < threshold,
        mean_theta,
        se_theta,
        mean_theta_sq,
        se_theta_sq,
        rows,
    })
}

/// Piecewise-constant record path on `[0, x_max]`: theta starts at `q0`
/// (`None` = started from infinity) and drops to `value` at each jump.
#[derive(Debug, Clone)]
pub struct HalfLinePath {
    pub x_max: f64,
    pub q0: Option<f64>,
    pub k0: u64,
    /// `(location, new value)`, locations strictly increasing, values
    /// strictly decreasing.
    pub jumps: Vec<(f64, f64)>,
    /// For an infinite start: all marks with time below this horizon were
    /// materialized, so jumps with values above it are not represented.
    pub materialized_to: f64,
}

impl HalfLinePath {
    pub fn theta(&self, x: f64) -> f64 {
        let mut v = self.q0.unwrap_or(f64::INFINITY);
        for &(loc, val) in &self.jumps {
            if loc <= x {
                v = val;
            } else {
                break;
            }
        }
        v
    }

    /// Jump count up to `x`, offset by the initial count `k0`.
    pub fn count(&self, x: f64) -> u64 {
        self.k0 + self.jumps.iter().take_while(|j| j.0 <= x).count() as u64
    }

    /// Exact integral of the piecewise-constant theta over `[0, x]`.
    pub fn int_theta(&self, x: f64) -> f64 {
        let mut v = self.q0.unwrap_or(f64::INFINITY);
        let mut at = 0.0;
        let mut total = 0.0;
        for &(loc, val) in &self.jumps {
            if loc >= x {
                break;
            }
            total += v * (loc - at);
            at = loc;
            v = val;
        }
        total + v * (x - at)
    }
}

/// Simulate the half-line record process on `[0, x_max]`.
///
/// From a finite start the jump chain is exact: from value `q` the next
/// record is `Exp(2 alpha q)` further along and uniform on `(0, q)`. From
/// an infinite start the mark strip is materialized with a doubling time
/// horizon until at least one mark exists; the records among materialized
/// marks are then the true records with values below the horizon.
pub fn simulate_halfline(
    params: Params,
    x_max: f64,
    q0: Option<f64>,
    k0: u64,
    seed: SeedSpec,
) -> Result<HalfLinePath> {
    if !(x_max > 0.0) || !x_max.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "x_max must be positive and finite, got {x_max}"
        )));
    }
    if let Some(q) = q0 {
        if !(q > 0.0) || !q.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "finite start value must be positive, got {q}"
            )));
        }
    }
    let mut rng = seed.stream();
    let mut jumps = Vec::new();
    let mut materialized_to = f64::INFINITY;
    match q0 {
        Some(q_start) => {
            let mut q = q_start;
            let mut y = 0.0;
            loop {
                if q < 1e-300 {
                    break;
                }
                y += sample_exponential(2.0 * params.alpha * q, &mut rng)?;
                if y > x_max {
                    break;
                }
                q *= rng.gen_range(0.0..1.0f64);
                jumps.push((y, q));
            }
        }
        None => {
            // materialize the Poisson strip [0, x_max] x (0, h] layer by layer
            let mut strip: Vec<(f64, f64)> = Vec::new();
            let mut h0 = 0.0;
            let mut h = (2.0 * params.alpha * x_max).recip();
            for _ in 0..MAX_DOUBLINGS {
                let lambda = 2.0 * params.alpha * x_max * (h - h0);
                let count = Poisson::new(lambda)
                    .map_err(|e| Error::Numeric(format!("poisson({lambda}): {e}")))?
                    .sample(&mut rng) as usize;
                for _ in 0..count {
                    strip.push((rng.gen_range(0.0..x_max), rng.gen_range(h0..h)));
                }
                if !strip.is_empty() {
                    break;
                }
                h0 = h;
                h *= 2.0;
            }
            if strip.is_empty() {
                return Err(Error::Numeric(
                    "no mark materialized on the half-line strip".into(),
                ));
            }
            strip.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut cur = f64::INFINITY;
            for (loc, t) in strip {
                if t < cur {
                    jumps.push((loc, t));
                    cur = t;
                }
            }
            materialized_to = h;
        }
    }
    Ok(HalfLinePath {
        x_max,
        q0,
        k0,
        jumps,
        materialized_to,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MartingalePoint {
    pub x: f64,
    pub mean_n: f64,
    pub se_n: f64,
    pub mean_m: f64,
    pub se_m: f64,
}

/// Empirical means of the compensated count `N_x = X(x) - k0 -
/// 2 alpha int_0^x theta` and of `M_x = N_x^2 - 2 alpha int_0^x theta`
/// over replicated half-line paths; both have zero expectation.
pub fn martingale_checks(
    params: Params,
    x_grid: &[f64],
    q0: f64,
    k0: u64,
    replicates: usize,
    master_seed: u64,
) -> Result<Vec<MartingalePoint>> {
    if x_grid.is_empty() || replicates < 2 {
        return Err(Error::InvalidParameter(
            "martingale_checks needs grid points and replicates".into(),
        ));
    }
    let x_max = x_grid.iter().cloned().fold(0.0, f64::max);
    let per_rep: Vec<Vec<(f64, f64)>> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let path = simulate_halfline(
                params,
                x_max,
                Some(q0),
                k0,
                SeedSpec::new(master_seed, i),
            )?;
            Ok(x_grid
                .iter()
                .map(|&x| {
                    let compensator = 2.0 * params.alpha * path.int_theta(x);
                    let n = (path.count(x) - k0) as f64 - compensator;
                    (n, n * n - compensator)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(x_grid
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let ns: Vec<f64> = per_rep.iter().map(|r| r[j].0).collect();
            let ms: Vec<f64> = per_rep.iter().map(|r| r[j].1).collect();
            let (mean_n, se_n) = mean_se(&ns);
            let (mean_m, se_m) = mean_se(&ms);
            MartingalePoint {
                x,
                mean_n,
                se_n,
                mean_m,
                se_m,
            }
        })
        .collect())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ConvergencePoint {
    pub n: usize,
    pub median_gap: f64,
    pub mean_scaled_x: f64,
}

/// Grow one tree through increasing leaf counts while keeping a single
/// mark realization consistent across every refinement, and measure how
/// `X_n^*/sqrt(2n)` approaches `sqrt(2 alpha / r) Theta_hat` computed at
/// the largest n. Returns the median absolute gap per checkpoint.
pub fn coupled_convergence(
    params: Params,
    checkpoints: &[usize],
    replicates: usize,
    master_seed: u64,
) -> Result<Vec<ConvergencePoint>> {
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "checkpoints must be strictly increasing".into(),
        ));
    }
    if checkpoints[0] < 2 {
        return Err(Error::InvalidParameter(
            "checkpoints must start at n >= 2".into(),
        ));
    }
    let per_rep: Vec<Vec<(f64, f64)>> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut grower =
                SpannedTreeGrower::new(params, SeedSpec::new(master_seed, 2 * i))?;
            let mut marks =
                MarkRealization::new(params, SeedSpec::new(master_seed, 2 * i + 1));
            let mut scaled = Vec::with_capacity(checkpoints.len());
            for &n in checkpoints {
                for ev in grower.grow_to(n)? {
                    marks.on_split(&ev);
                }
                let outcome = simulate_records(&mut marks, grower.tree())?;
                let x_scaled = outcome.x_star as f64 / (2.0 * n as f64).sqrt();
                let th = theta_hat(&outcome, params, n)?;
                scaled.push((x_scaled, (2.0 * params.alpha / params.r).sqrt() * th));
            }
            Ok(scaled)
        })
        .collect::<Result<_>>()?;
    Ok(checkpoints
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let gaps: Vec<f64> = per_rep
                .iter()
                .map(|r| (r[j].0 - r.last().unwrap().1).abs())
                .collect();
            let xs: Vec<f64> = per_rep.iter().map(|r| r[j].0).collect();
            ConvergencePoint {
                n,
                median_gap: median(&gaps),
                mean_scaled_x: mean_se(&xs).0,
            }
        })
        .collect())
}
