//! Removed-subtree events of the cutting process on excursion-grid trees:
//! the (theta_i, sigma^i) event list, the remaining-mass trajectory
//! sigma_q, the exact Theta identities they satisfy, the small-mass
//! asymptotics, and the Girsanov mass check via importance sampling over
//! the total mass.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::crt_sampler::{sample_excursion_tree, Params};
use crate::error::{Error, Result};
use crate::randkit::{mean_se, median, SeedSpec};
use crate::record_process::MarkRealization;
use crate::tree_core::{EdgeId, ExcursionTree};

/// The cutting process reduced to its jumps: event `i` removes a subtree
/// of mass `sigma_i` at time `theta_i`. Sorted by time.
#[derive(Debug, Clone)]
pub struct RemovalEvents {
    /// `(theta_i, sigma_i)`, ascending in theta.
    pub events: Vec<(f64, f64)>,
    pub total_mass: f64,
    /// `sum_x theta(x) mass(x)` accumulated atom by atom during the
    /// sweep, before any grouping into events.
    pub direct_integral: f64,
}

impl RemovalEvents {
    /// Remaining mass at time `q`: everything whose removal time is >= q.
    pub fn sigma_at(&self, q: f64) -> f64 {
        self.events
            .iter()
            .filter(|e| e.0 >= q)
            .map(|e| e.1)
            .sum()
    }

    /// `int_0^infty sigma_q dq`, evaluated as the area under the step
    /// function (a different summation route than `sum theta_i sigma_i`).
    /// The remaining mass is accumulated backward as a suffix sum: the
    /// forward variant `remaining -= sigma_i` leaves a ~n*eps absolute
    /// error in `remaining` that the long late time-gaps then amplify.
    pub fn int_sigma(&self) -> f64 {
        let mut total = 0.0;
        let mut remaining = 0.0;
        for (k, &(t, s)) in self.events.iter().enumerate().rev() {
            remaining += s;
            let prev = if k > 0 { self.events[k - 1].0 } else { 0.0 };
            total += remaining * (t - prev);
        }
        total
    }

    pub fn sum_theta_sigma(&self) -> f64 {
        self.events.iter().map(|&(t, s)| t * s).sum()
    }

    /// Theta of this realization.
    pub fn theta(&self) -> f64 {
        self.sum_theta_sigma()
    }
}

/// Sweep the grid tree's skeleton, propagating the record running minimum
/// from the root, resolve theta at every mass atom, and group atom masses
/// by their governing record. The horizon cap, when given, bounds the
/// adaptive mark materialization; hitting it returns `Error::Incomplete`.
pub fn removal_events(
    tree: &ExcursionTree,
    marks: &mut MarkRealization,
    horizon_cap: Option<f64>,
) -> Result<RemovalEvents> {
    marks.ensure_edges(tree.edge_count());
    let alpha = marks.params.alpha;
    let step_mass = tree.step_mass;
    // accumulate mass per governing record time (times are a.s. distinct
    // per record, and one record governs one connected component)
    let mut by_record: std::collections::HashMap<u64, f64> = Default::default();
    let mut direct = 0.0;
    let mut stack: Vec<(EdgeId, f64)> = tree.roots().iter().rev().map(|&e| (e, f64::INFINITY)).collect();
    while let Some((e, entry_min)) = stack.pop() {
        let len = tree.edge_length(e);
        let mut cur = entry_min;
        if cur.is_finite() {
            marks.ensure_horizon(e, len, cur)?;
        }
        let mut mark_idx = 0usize;
        let scan_to = |marks: &MarkRealization,
                       mark_idx: &mut usize,
                       cur: &mut f64,
                       upto: f64| {
            let list = marks.marks_on(e);
            while *mark_idx < list.len() && list[*mark_idx].0 <= upto {
                if list[*mark_idx].1 < *cur {
                    *cur = list[*mark_idx].1;
                }
                *mark_idx += 1;
            }
        };
        for atom in tree.atoms(e) {
            if cur.is_infinite() {
                // root edge before its first record: materialize marks
                // until the prefix minimum is certified
                let mut h = marks
                    .horizon_of(e)
                    .max((2.0 * alpha * atom.offset.max(1e-12)).recip());
                loop {
                    if let Some(cap) = horizon_cap {
                        if h > cap {
                            return Err(Error::Incomplete(format!(
                                "horizon cap {cap} too low to resolve theta on edge {e}"
                            )));
                        }
                    }
                    marks.ensure_horizon(e, len, h)?;
                    let m = marks
                        .marks_on(e)
                        .iter()
                        .take_while(|mk| mk.0 <= atom.offset)
                        .map(|mk| mk.1)
                        .fold(f64::INFINITY, f64::min);
                    if m <= h {
                        break;
                    }
                    h *= 2.0;
                    if !h.is_finite() {
                        return Err(Error::Numeric("removal horizon overflow".into()));
                    }
                }
                // restart the merged scan now that the mark list changed
                mark_idx = 0;
                cur = f64::INFINITY;
            }
            scan_to(marks, &mut mark_idx, &mut cur, atom.offset);
            debug_assert!(cur.is_finite());
            *by_record.entry(cur.to_bits()).or_insert(0.0) += step_mass;
            direct += cur * step_mass;
        }
        if !tree.children(e).is_empty() {
            if cur.is_infinite() {
                // no atom resolved a record yet: certify the full-edge minimum
                let mut h = marks.horizon_of(e).max((2.0 * alpha * len).recip());
                loop {
                    if let Some(cap) = horizon_cap {
                        if h > cap {
                            return Err(Error::Incomplete(format!(
                                "horizon cap {cap} too low on edge {e}"
                            )));
                        }
                    }
                    marks.ensure_horizon(e, len, h)?;
                    let m = marks
                        .marks_on(e)
                        .iter()
                        .map(|mk| mk.1)
                        .fold(f64::INFINITY, f64::min);
                    if m <= h {
                        break;
                    }
                    h *= 2.0;
                }
                mark_idx = 0;
                cur = f64::INFINITY;
            }
            scan_to(marks, &mut mark_idx, &mut cur, len);
            for &c in tree.children(e).iter().rev() {
                stack.push((c, cur));
            }
        }
    }
    let mut events: Vec<(f64, f64)> = by_record
        .into_iter()
        .map(|(bits, mass)| (f64::from_bits(bits), mass))
        .collect();
    events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(RemovalEvents {
        events,
        total_mass: tree.total_mass(),
        direct_integral: direct,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ThetaIdentityReport {
    pub sum_theta_sigma: f64,
    pub int_sigma: f64,
    pub direct_integral: f64,
    pub mass_defect: f64,
    pub max_rel_error: f64,
}

/// Check the per-realization identities: the event-sum, the area under
/// sigma_q, and the direct atom integral are three routes to the same
/// Theta, and the event masses exhaust the total mass.
pub fn theta_identities(events: &RemovalEvents) -> Result<ThetaIdentityReport> {
    if events.events.is_empty() {
        return Err(Error::Incomplete("no removal events".into()));
    }
    let a = events.sum_theta_sigma();
    let b = events.int_sigma();
    let c = events.direct_integral;
    let mass: f64 = events.events.iter().map(|e| e.1).sum();
    let scale = a.abs().max(1e-300);
    let max_rel_error = ((a - b).abs().max((a - c).abs())) / scale;
    Ok(ThetaIdentityReport {
        sum_theta_sigma: a,
        int_sigma: b,
        direct_integral: c,
        mass_defect: (mass - events.total_mass).abs(),
        max_rel_error,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AsymptoticsPoint {
    pub n: usize,
    /// `n^{-1/2} #\{sigma_i >= 1/n\}` over `2 sqrt(alpha/pi) Theta`.
    pub a_ratio: f64,
    /// `n^{1/2} sum sigma_i 1\{sigma_i <= 1/n\}` over the same limit.
    pub b_ratio: f64,
    pub out_of_resolution: bool,
}

/// Small-mass counting and summing statistics of one realization against
/// their common limit `2 sqrt(alpha/pi) Theta`.
pub fn small_mass_asymptotics(
    events: &RemovalEvents,
    alpha: f64,
    n_grid: &[usize],
) -> Result<Vec<AsymptoticsPoint>> {
    if events.events.is_empty() {
        return Err(Error::Incomplete("no removal events".into()));
    }
    let theta = events.theta();
    let limit = 2.0 * (alpha / std::f64::consts::PI).sqrt() * theta;
    let min_sigma = events
        .events
        .iter()
        .map(|e| e.1)
        .fold(f64::INFINITY, f64::min);
    Ok(n_grid
        .iter()
        .map(|&n| {
            let thr = 1.0 / n as f64;
            let count = events.events.iter().filter(|e| e.1 >= thr).count();
            let small_sum: f64 = events
                .events
                .iter()
                .filter(|e| e.1 <= thr)
                .map(|e| e.1)
                .sum();
            let a = count as f64 / (n as f64).sqrt();
            let b = (n as f64).sqrt() * small_sum;
            AsymptoticsPoint {
                n,
                a_ratio: a / limit,
                b_ratio: b / limit,
                out_of_resolution: thr < min_sigma,
            }
        })
        .collect())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GirsanovReport {
    pub estimate: f64,
    pub se: f64,
    pub target: f64,
    pub pass: bool,
}

/// Estimate `N[1 - e^{-mu sigma_q}]` under the excursion measure by
/// importance sampling the total mass against its `r^{-3/2}` density,
/// simulating `sigma_q` on a grid tree for each drawn mass, and compare
/// with the closed form `sqrt(mu/alpha + q^2) - q`.
///
/// A plain Gamma(1/2, rate mu) proposal carries the weight
/// `e^{mu r}/(2 sqrt(alpha mu) r)`, which blows up on the polynomial tail
/// of the mass density where the integrand tends to 1 — the resulting
/// estimator has unusable variance. The integral is therefore split at
/// `T = 4/mu`: the body keeps the Gamma proposal (the weight stays
/// bounded there because `1 - e^{-mu sigma_q} <= mu r` kills the `1/r`),
/// while the tail uses the exact `r^{-3/2}` proposal `r = T/U^2`, whose
/// weight is the constant `1/sqrt(alpha pi T)`.
pub fn girsanov_mass_check(
    alpha: f64,
    mu: f64,
    q: f64,
    grid_steps: usize,
    replicates: usize,
    master_seed: u64,
    tolerance_scale: f64,
) -> Result<GirsanovReport> {
    if !(mu > 0.0) || q < 0.0 || !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "girsanov check needs mu > 0, q >= 0, alpha > 0; got mu={mu}, q={q}, alpha={alpha}"
        )));
    }
    let target = (mu / alpha + q * q).sqrt() - q;
    let t_split = 4.0 / mu;
    let tail_weight = (alpha * std::f64::consts::PI * t_split).sqrt().recip();
    let sigma_q_of = |r: f64, tree_seed: SeedSpec, mark_seed: SeedSpec| -> Result<f64> {
        if q == 0.0 {
            return Ok(r); // nothing removed at time zero
        }
        let params = Params::new(alpha, r)?;
        let tree = sample_excursion_tree(params, grid_steps, tree_seed)?;
        let mut marks = MarkRealization::new(params, mark_seed);
        Ok(removal_events(&tree, &mut marks, None)?.sigma_at(q))
    };
    let values: Vec<f64> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeedSpec::new(master_seed, 6 * i).stream();
            let r_body = Gamma::new(0.5, 1.0 / mu)
                .map_err(|e| Error::Numeric(format!("gamma proposal: {e}")))?
                .sample(&mut rng)
                .max(1e-12);
            let mut value = 0.0;
            if r_body <= t_split {
                let sigma = sigma_q_of(
                    r_body,
                    SeedSpec::new(master_seed, 6 * i + 1),
                    SeedSpec::new(master_seed, 6 * i + 2),
                )?;
                let weight = (mu * r_body).exp() / (2.0 * (alpha * mu).sqrt() * r_body);
                value += weight * (-(-mu * sigma).exp_m1());
            }
            let u: f64 = rng.gen_range(1e-9..1.0f64);
            let r_tail = t_split / (u * u);
            let sigma = sigma_q_of(
                r_tail,
                SeedSpec::new(master_seed, 6 * i + 4),
                SeedSpec::new(master_seed, 6 * i + 5),
            )?;
            value += tail_weight * (-(-mu * sigma).exp_m1());
            Ok(value)
        })
        .collect::<Result<_>>()?;
    let (estimate, se) = mean_se(&values);
    let tol = 3.0 * se + 0.02 * tolerance_scale * target;
    Ok(GirsanovReport {
        estimate,
        se,
        target,
        pass: (estimate - target).abs() < tol,
    })
}

/// Convenience driver: one grid-tree replicate's removal events.
pub fn removal_replicate(
    params: Params,
    grid_steps: usize,
    master_seed: u64,
    replicate: u64,
) -> Result<RemovalEvents> {
    let tree = sample_excursion_tree(params, grid_steps, SeedSpec::new(master_seed, 2 * replicate))?;
    let mut marks = MarkRealization::new(params, SeedSpec::new(master_seed, 2 * replicate + 1));
    removal_events(&tree, &mut marks, None)
}

/// Median A/B ratios over replicated grid trees, the workhorse behind the
/// masses verification suite.
pub fn asymptotics_sweep(
    params: Params,
    grid_steps: usize,
    n_grid: &[usize],
    replicates: usize,
    master_seed: u64,
) -> Result<Vec<AsymptoticsPoint>> {
    let per_rep: Vec<Vec<AsymptoticsPoint>> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let ev = removal_replicate(params, grid_steps, master_seed, i)?;
            small_mass_asymptotics(&ev, params.alpha, n_grid)
        })
        .collect::<Result<_>>()?;
    Ok(n_grid
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let a: Vec<f64> = per_rep.iter().map(|r| r[j].a_ratio).collect();
            let b: Vec<f64> = per_rep.iter().map(|r| r[j].b_ratio).collect();
            AsymptoticsPoint {
                n,
                a_ratio: median(&a),
                b_ratio: median(&b),
                out_of_resolution: per_rep.iter().any(|r| r[j].out_of_resolution),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(alpha: f64, r: f64) -> Params {
        Params::new(alpha, r).unwrap()
    }

    #[test]
    fn identities_hold_per_realization() {
        let params = p(0.5, 1.0);
        for i in 0..20 {
            let ev = removal_replicate(params, 800, 300, i).unwrap();
            let rep = theta_identities(&ev).unwrap();
            assert!(rep.mass_defect < 1e-9 * params.r, "defect {}", rep.mass_defect);
            assert!(rep.max_rel_error < 1e-9, "rel {}", rep.max_rel_error);
            // sigma_q reconstruction at probe points
            for k in 0..100 {
                let q = k as f64 * 0.02;
                let direct: f64 = ev
                    .events
                    .iter()
                    .filter(|e| e.0 >= q)
                    .map(|e| e.1)
                    .sum();
                assert_eq!(direct, ev.sigma_at(q));
            }
            assert!((ev.sigma_at(0.0) - params.r).abs() < 1e-9);
            assert!(ev.events.windows(2).all(|w| w[0].0 < w[1].0));
            assert!(ev.events.iter().all(|&(t, s)| t > 0.0 && s > 0.0));
        }
    }

    #[test]
    fn zero_horizon_cap_is_incomplete() {
        let params = p(0.5, 1.0);
        let tree = sample_excursion_tree(params, 200, SeedSpec::new(301, 0)).unwrap();
        let mut marks = MarkRealization::new(params, SeedSpec::new(301, 1));
        match removal_events(&tree, &mut marks, Some(0.0)) {
            Err(Error::Incomplete(_)) => {}
            other => panic!("expected Incomplete, got {other:?}"),
        }
    }

    #[test]
    fn theta_mean_matches_closed_form() {
        // E[Theta] = (1/2) sqrt(pi r / alpha) up to grid bias
        let params = p(0.5, 1.0);
        let thetas: Vec<f64> = (0..150u64)
            .map(|i| removal_replicate(params, 2000, 302, i).unwrap().theta())
            .collect();
        let (mean, se) = mean_se(&thetas);
        let target = 0.5 * (std::f64::consts::PI * params.r / params.alpha).sqrt();
        assert!(
            (mean - target).abs() < 3.0 * se + 0.02 * target,
            "mean {mean} vs {target} (se {se})"
        );
    }

    #[test]
    fn asymptotics_monotonicity_and_resolution() {
        let params = p(0.5, 1.0);
        let ev = removal_replicate(params, 3000, 303, 0).unwrap();
        let pts = small_mass_asymptotics(&ev, params.alpha, &[4, 16, 64, 100_000_000]).unwrap();
        // counts of events above threshold grow with n
        let theta = ev.theta();
        let limit = 2.0 * (params.alpha / std::f64::consts::PI).sqrt() * theta;
        let counts: Vec<f64> = pts
            .iter()
            .map(|p_| p_.a_ratio * limit * (p_.n as f64).sqrt())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1] + 1e-9));
        // a threshold below the finest event mass is flagged
        let last = pts.last().unwrap();
        assert!(last.out_of_resolution);
        assert_eq!(last.b_ratio, 0.0);
    }

    #[test]
    fn asymptotics_ratios_approach_one() {
        // reduced-scale version of the acceptance sweep
        let params = p(0.5, 1.0);
        let pts = asymptotics_sweep(params, 20_000, &[16, 64], 30, 304).unwrap();
        let coarse = &pts[0];
        let fine = &pts[1];
        assert!(fine.a_ratio > 0.5 && fine.a_ratio < 1.6, "A {}", fine.a_ratio);
        assert!(fine.b_ratio > 0.5 && fine.b_ratio < 1.6, "B {}", fine.b_ratio);
        assert!(
            (fine.a_ratio - 1.0).abs() <= (coarse.a_ratio - 1.0).abs() + 0.15,
            "A not improving: {} -> {}",
            coarse.a_ratio,
            fine.a_ratio
        );
    }

    #[test]
    fn girsanov_at_q_zero_is_exact_in_the_grid() {
        // sigma_0 = r, so only the importance weights are exercised
        let rep = girsanov_mass_check(1.0, 1.0, 0.0, 2, 4000, 305, 1.0).unwrap();
        assert!((rep.target - 1.0).abs() < 1e-15);
        assert!(rep.pass, "estimate {} vs {} (se {})", rep.estimate, rep.target, rep.se);
    }

    #[test]
    fn girsanov_with_pruning_small_scale() {
        let rep = girsanov_mass_check(0.5, 1.0, 1.0, 1500, 1200, 306, 2.0).unwrap();
        let target = 3.0f64.sqrt() - 1.0;
        assert!((rep.target - target).abs() < 1e-15);
        assert!(
            rep.pass,
            "estimate {} vs {} (se {})",
            rep.estimate, rep.target, rep.se
        );
    }

    #[test]
    fn girsanov_target_monotone_in_q() {
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let q = k as f64 * 0.5;
            let t = (1.0f64 / 0.5 + q * q).sqrt() - q;
            assert!(t < prev);
            prev = t;
        }
        assert!(girsanov_mass_check(0.5, -1.0, 0.0, 10, 10, 307, 1.0).is_err());
    }

    #[test]
    fn theta_agrees_with_leaf_estimator_route() {
        // Theta from full-grid removal events vs the record_process
        // mass-estimator on spanned trees: same mean
        let params = p(0.5, 1.0);
        let grid_thetas: Vec<f64> = (0..100u64)
            .map(|i| removal_replicate(params, 2000, 308, i).unwrap().theta())
            .collect();
        let (m1, s1) = mean_se(&grid_thetas);
        let rep = crate::record_process::rayleigh_check(params, 512, 100, 309, 1.0).unwrap();
        let gap = (m1 - rep.mean_theta).abs();
        let tol = 3.0 * (s1 * s1 + rep.se_theta * rep.se_theta).sqrt() + 0.02;
        assert!(gap < tol, "{m1} vs {} (tol {tol})", rep.mean_theta);
    }
}
