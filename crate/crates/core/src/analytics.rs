//! Closed-form moments of Theta, the Laplace-transform machinery around
//! F = G^{-1}, the H function, root-height moments, and quadrature
//! verifiers tying them together.

use crate::crt_sampler::{sample_excursion_tree, Params};
use crate::error::{Error, Result};
use crate::quad;
use crate::randkit::{ln_gamma_fn, mean_se, rayleigh_mgf, SeedSpec};
use crate::tree_core::{EdgeId, WeightedTree};

/// Exact moments of Theta: order 1 is `(1/2) sqrt(pi r / alpha)`, order 2
/// is `r / alpha`.
pub fn theta_moment_exact(params: Params, order: u32) -> Result<f64> {
    match order {
        1 => Ok(0.5 * (std::f64::consts::PI * params.r / params.alpha).sqrt()),
        2 => Ok(params.r / params.alpha),
        _ => Err(Error::InvalidParameter(format!(
            "theta moment only has closed forms for orders 1 and 2, got {order}"
        ))),
    }
}

/// Conditional moment of the mass estimator of Theta given the spanned
/// tree, with mass `r/n` on each listed leaf.
///
/// Order 1 sums `1/(2 alpha d_k)` (each leaf's theta is exponential with
/// rate `2 alpha d_k`); order 2 sums the symmetrized pair kernel
/// `(1/d_j + 1/d_k) / (2 span(j,k))` over ordered pairs, scaled by
/// `2/(2 alpha)^2`.
pub fn conditional_moment(
    tree: &WeightedTree,
    leaves: &[EdgeId],
    params: Params,
    order: u32,
) -> Result<f64> {
    if leaves.is_empty() {
        return Err(Error::InvalidParameter("no leaves given".into()));
    }
    let depths: Vec<f64> = leaves
        .iter()
        .map(|&e| tree.tip_depth(e))
        .collect::<Result<_>>()?;
    if depths.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Singular("leaf at zero distance from the root".into()));
    }
    let n = leaves.len() as f64;
    let two_alpha = 2.0 * params.alpha;
    match order {
        1 => {
            let sum: f64 = depths.iter().map(|d| d.recip()).sum();
            Ok(params.r / n / two_alpha * sum)
        }
        2 => {
            let mut sum = 0.0;
            for j in 0..leaves.len() {
                sum += depths[j].powi(-2); // diagonal: span(j,j) = d_j
                for k in j + 1..leaves.len() {
                    let span = tree.pair_spanned_length(leaves[j], leaves[k])?;
                    if !(span > 0.0) {
                        return Err(Error::Singular(format!(
                            "degenerate pair span between leaves {j} and {k}"
                        )));
                    }
                    sum += (depths[j].recip() + depths[k].recip()) / span;
                }
            }
            Ok(2.0 / (two_alpha * two_alpha) * (params.r / n).powi(2) * sum)
        }
        _ => Err(Error::InvalidParameter(format!(
            "conditional moment implemented for orders 1 and 2, got {order}"
        ))),
    }
}

/// Parameters of the joint Laplace functional in (Theta, sigma).
#[derive(Debug, Clone, Copy)]
pub struct LaplaceParams {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
}

impl LaplaceParams {
    pub fn new(lambda: f64, mu: f64, alpha: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !(mu >= 0.0) || !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need lambda >= 0, mu >= 0, alpha > 0; got ({lambda}, {mu}, {alpha})"
            )));
        }
        Ok(Self { lambda, mu, alpha })
    }

    fn x0(&self) -> f64 {
        (self.mu / self.alpha).sqrt()
    }
}

/// The explicit inverse of F: defined for `x >= sqrt(mu/alpha)`, strictly
/// increasing from 0.
pub fn g_function(x: f64, lp: LaplaceParams) -> Result<f64> {
    let x0 = lp.x0();
    if !(lp.lambda > 0.0) {
        return Err(Error::InvalidParameter("G needs lambda > 0".into()));
    }
    if x < x0 - 1e-12 * (1.0 + x0) {
        return Err(Error::InvalidParameter(format!(
            "G is defined for x >= sqrt(mu/alpha) = {x0}, got {x}"
        )));
    }
    let c = lp.lambda / (2.0 * lp.alpha);
    Ok((x0 + c) * ((x - x0) / c).exp() - x - c)
}

fn g_prime(x: f64, lp: LaplaceParams) -> f64 {
    let c = lp.lambda / (2.0 * lp.alpha);
    (lp.x0() + c) / c * ((x - lp.x0()) / c).exp() - 1.0
}

/// F(q), the value of the Laplace functional at pruning time q, by
/// monotone inversion of G: bracketing bisection, then Newton polish to
/// `|G(F(q)) - q| <= 1e-13 (1 + q)`.
pub fn f_function(q: f64, lp: LaplaceParams) -> Result<f64> {
    if !(q >= 0.0) {
        return Err(Error::InvalidParameter(format!("F needs q >= 0, got {q}")));
    }
    let x0 = lp.x0();
    if lp.lambda == 0.0 {
        return Ok(x0); // the lambda -> 0 limit of the inversion
    }
    if q == 0.0 {
        return Ok(x0);
    }
    let mut lo = x0;
    let mut hi = x0 + lp.lambda / (2.0 * lp.alpha);
    while g_function(hi, lp)? < q {
        hi = x0 + 2.0 * (hi - x0);
        if !hi.is_finite() {
            return Err(Error::Numeric("F bracket overflow".into()));
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if g_function(mid, lp)? < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    let tol = 1e-13 * (1.0 + q);
    for _ in 0..40 {
        let res = g_function(x, lp)? - q;
        if res.abs() <= tol {
            return Ok(x);
        }
        let step = res / g_prime(x, lp);
        let next = (x - step).clamp(lo, hi);
        if next == x {
            break;
        }
        x = next;
    }
    let res = (g_function(x, lp)? - q).abs();
    if res <= 1e-10 * (1.0 + q) {
        Ok(x)
    } else {
        Err(Error::Numeric(format!(
            "F inversion stalled at residual {res} for q = {q}"
        )))
    }
}

/// `F'(q) = lambda / (2 alpha (F(q) + q))`.
pub fn f_derivative(q: f64, lp: LaplaceParams) -> Result<f64> {
    let f = f_function(q, lp)?;
    if f + q <= 0.0 {
        return Err(Error::Singular("F(q) + q vanishes".into()));
    }
    Ok(lp.lambda / (2.0 * lp.alpha * (f + q)))
}

/// Residual of the integral equation satisfied by F:
/// `alpha F(q)^2 + 2 alpha int_0^q x F'(x) dx - lambda q - mu`.
pub fn int_ff_residual(q: f64, lp: LaplaceParams) -> Result<f64> {
    let f = f_function(q, lp)?;
    let integral = quad::integrate(
        &|x| {
            let fp = f_derivative(x, lp).unwrap_or(f64::NAN);
            x * fp
        },
        0.0,
        q,
        1e-12,
    )?;
    if !integral.value.is_finite() {
        return Err(Error::Numeric("F' quadrature produced NaN".into()));
    }
    Ok(lp.alpha * f * f + 2.0 * lp.alpha * integral.value - lp.lambda * q - lp.mu)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct FExpansionReport {
    pub fd_first: f64,
    pub exact_first: f64,
    pub fd_second: f64,
    pub exact_second: f64,
    pub err_first: f64,
    pub err_second: f64,
}

/// Small-lambda expansion of F around lambda = 0, checked by one-sided
/// finite differences (F only exists for lambda >= 0) with Richardson
/// extrapolation. First derivative target `log(1+z)/(2 alpha)` and second
/// derivative target `-(z - log(1+z)) / (2 alpha^{3/2} mu^{1/2} (1+z))`,
/// with `z = q sqrt(alpha/mu)`.
pub fn f_expansion_check(q: f64, mu: f64, alpha: f64) -> Result<FExpansionReport> {
    if !(q >= 0.0) || !(mu > 0.0) || !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "expansion check needs q >= 0, mu > 0, alpha > 0; got ({q}, {mu}, {alpha})"
        )));
    }
    let h = 1e-4;
    let f_at = |lam: f64| -> Result<f64> { f_function(q, LaplaceParams::new(lam, mu, alpha)?) };
    let f0 = (mu / alpha).sqrt();
    let f1 = f_at(h)?;
    let f2 = f_at(2.0 * h)?;
    let f4 = f_at(4.0 * h)?;
    let fd_first = (4.0 * f1 - f2 - 3.0 * f0) / (2.0 * h);
    let d = |fh: f64, f2h: f64, step: f64| (f2h - 2.0 * fh + f0) / (step * step);
    let fd_second = 2.0 * d(f1, f2, h) - d(f2, f4, 2.0 * h);
    let z = q * (alpha / mu).sqrt();
    let exact_first = (1.0 + z).ln() / (2.0 * alpha);
    let exact_second =
        -(z - (1.0 + z).ln()) / ((1.0 + z) * 2.0 * alpha.powf(1.5) * mu.sqrt());
    Ok(FExpansionReport {
        fd_first,
        exact_first,
        fd_second,
        exact_second,
        err_first: (fd_first - exact_first).abs(),
        err_second: (fd_second - exact_second).abs(),
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct QuadIdentity {
    pub numeric: f64,
    pub closed_form: f64,
    pub rel_error: f64,
}

// the transform arguments below are nonnegative by construction, so the
// domain check of rayleigh_mgf cannot fire
fn mgf(y: f64) -> f64 {
    rayleigh_mgf(y.max(0.0)).unwrap()
}

fn identity(numeric: f64, closed_form: f64) -> QuadIdentity {
    QuadIdentity {
        numeric,
        closed_form,
        rel_error: (numeric - closed_form).abs() / closed_form.abs().max(1e-300),
    }
}

/// Joint transform of (sigma, Theta): mix the Rayleigh transform of Theta
/// over the `r^{-3/2}` mass density (substituting `r = s^2` to remove the
/// endpoint singularity) and compare with `1/(2 sqrt(alpha mu) + lambda)`.
pub fn laplace_sigma_theta(lp: LaplaceParams) -> Result<QuadIdentity> {
    if !(lp.mu > 0.0) {
        return Err(Error::InvalidParameter("mixing needs mu > 0".into()));
    }
    let scale = lp.lambda / (2.0 * lp.alpha).sqrt();
    let pre = (lp.alpha * std::f64::consts::PI).sqrt().recip();
    let q = quad::integrate_to_inf(
        &|s: f64| pre * (-lp.mu * s * s).exp() * mgf(scale * s),
        0.0,
        1e-12,
    )?;
    Ok(identity(
        q.value,
        (2.0 * (lp.alpha * lp.mu).sqrt() + lp.lambda).recip(),
    ))
}

/// The Rayleigh mixing identity
/// `(1/sqrt(pi)) int_0^inf dr/sqrt(r) e^{-mu r} E[e^{-sqrt(2r) c Z}]
///  = 1/(c + sqrt(mu))`, again via `r = s^2`.
pub fn lap_rayleigh_identity(mu: f64, c: f64) -> Result<QuadIdentity> {
    if !(mu > 0.0) || !(c >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "identity needs mu > 0, c >= 0; got ({mu}, {c})"
        )));
    }
    let pre = 2.0 / std::f64::consts::PI.sqrt();
    let q = quad::integrate_to_inf(
        &|s: f64| pre * (-mu * s * s).exp() * mgf(std::f64::consts::SQRT_2 * c * s),
        0.0,
        1e-12,
    )?;
    Ok(identity(q.value, (c + mu.sqrt()).recip()))
}

/// Expected Theta after pruning to time q:
/// `H_q(r) = sqrt(r/(2 alpha)) int_0^{q sqrt(2 alpha r)} rayleigh_mgf(y) dy`.
pub fn h_function(q: f64, params: Params) -> Result<f64> {
    if !(q >= 0.0) {
        return Err(Error::InvalidParameter(format!("H needs q >= 0, got {q}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let scale = (params.r / (2.0 * params.alpha)).sqrt();
    if q.is_infinite() {
        // the transform integrates to sqrt(pi/2), recovering E[Theta]
        let integral = quad::integrate_to_inf(&mgf, 0.0, 1e-12)?;
        return Ok(scale * integral.value);
    }
    let upper = q * (2.0 * params.alpha * params.r).sqrt();
    let integral = quad::integrate(&mgf, 0.0, upper, 1e-12)?;
    Ok(scale * integral.value)
}

/// k-th moment of the first branch height of the n-leaf spanned tree:
/// `(r/alpha)^{k/2} (Gamma(k+1)/2^k) Gamma(n - 1/2) / Gamma(n + k/2 - 1/2)`.
pub fn h0_moment(n: usize, k: f64, params: Params) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    if !(k > -1.0) {
        return Err(Error::InvalidParameter(format!(
            "moment order must exceed -1, got {k}"
        )));
    }
    let nf = n as f64;
    let log = 0.5 * k * (params.r / params.alpha).ln() + ln_gamma_fn(k + 1.0)
        - k * std::f64::consts::LN_2
        + ln_gamma_fn(nf - 0.5)
        - ln_gamma_fn(nf + 0.5 * k - 0.5);
    Ok(log.exp())
}

/// Mean mass grafted per unit skeleton length (with the 2 alpha mark
/// normalization) onto a spanned tree of total length `l`: `r/(2 alpha l)`.
pub fn grafted_mass_mean(params: Params, l: f64) -> Result<f64> {
    if !(l > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "spanned length must be positive, got {l}"
        )));
    }
    Ok(params.r / (2.0 * params.alpha * l))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GraftedMassReport {
    pub ratio_mean: f64,
    pub se: f64,
    pub pass: bool,
}

/// Grid check of the grafted-mass intensity: the mass attaching to a
/// skeleton segment A of the n-leaf spanned subtree is `r * len(A) / L_n`
/// in expectation, i.e. the per-length graft intensity is uniform. A is
/// taken as the root path of the first sampled leaf; the report carries
/// the ratio of attached mass to its prediction, averaged over
/// replicates.
pub fn grafted_mass_grid_check(
    params: Params,
    grid_steps: usize,
    n_leaves: usize,
    replicates: usize,
    master_seed: u64,
    tolerance_scale: f64,
) -> Result<GraftedMassReport> {
    if n_leaves < 2 || grid_steps < 8 * n_leaves {
        return Err(Error::InvalidParameter(format!(
            "need n >= 2 and grid_steps >= 8n, got n = {n_leaves}, grid = {grid_steps}"
        )));
    }
    let mut ratios = Vec::with_capacity(replicates);
    for i in 0..replicates as u64 {
        let tree = sample_excursion_tree(params, grid_steps, SeedSpec::new(master_seed, 2 * i))?;
        let mut rng = SeedSpec::new(master_seed, 2 * i + 1).stream();
        let flat: Vec<(EdgeId, f64)> = (0..tree.edge_count())
            .flat_map(|e| tree.atoms(e).iter().map(move |a| (e, a.offset)))
            .collect();
        let picked = rand::seq::index::sample(&mut rng, flat.len(), n_leaves);
        // covered prefix of each edge inside the spanned subtree
        let mut cov = vec![0.0f64; tree.edge_count()];
        for idx in picked.iter() {
            let (mut e, o) = flat[idx];
            cov[e] = cov[e].max(o);
            while let Some(p) = tree.parent(e) {
                if cov[p] == tree.edge_length(p) {
                    break;
                }
                cov[p] = tree.edge_length(p);
                e = p;
            }
        }
        let l_n: f64 = cov.iter().sum();
        // segment A: the root path of the first picked leaf
        let (leaf_edge, leaf_offset) = flat[picked.index(0)];
        let mut allowed = vec![f64::NEG_INFINITY; tree.edge_count()];
        allowed[leaf_edge] = leaf_offset;
        let mut e = leaf_edge;
        while let Some(p) = tree.parent(e) {
            allowed[p] = tree.edge_length(p);
            e = p;
        }
        let len_a = tree.edge_lo(leaf_edge) + leaf_offset;
        let mut mass_a = 0.0;
        for &(e, o) in &flat {
            // attachment point of this atom's component on the skeleton
            let (ae, ao) = if o <= cov[e] {
                (e, o)
            } else {
                let mut cur = e;
                while cov[cur] == 0.0 {
                    match tree.parent(cur) {
                        Some(p) => cur = p,
                        None => break,
                    }
                }
                (cur, cov[cur])
            };
            if ao <= allowed[ae] {
                mass_a += tree.step_mass;
            }
        }
        ratios.push(mass_a * l_n / (len_a * params.r));
    }
    let (ratio_mean, se) = mean_se(&ratios);
    let tol = 3.0 * se + 0.02 * tolerance_scale;
    Ok(GraftedMassReport {
        ratio_mean,
        se,
        pass: (ratio_mean - 1.0).abs() < tol,
    })
}

/// Monte Carlo conditional moments of the Theta estimator on a fixed
/// spanned tree over independent mark realizations. Returns
/// ((mean, se), (mean of squares, se)).
pub fn conditional_moment_mc(
    tree: &WeightedTree,
    params: Params,
    realizations: usize,
    master_seed: u64,
) -> Result<((f64, f64), (f64, f64))> {
    use rayon::prelude::*;
    let n = tree.leaf_count();
    let hats: Vec<f64> = (0..realizations as u64)
        .into_par_iter()
        .map(|i| {
            let mut marks =
                crate::record_process::MarkRealization::new(params, SeedSpec::new(master_seed, i));
            let outcome = crate::record_process::simulate_records(&mut marks, tree)?;
            crate::record_process::theta_hat(&outcome, params, n)
        })
        .collect::<Result<_>>()?;
    let sq: Vec<f64> = hats.iter().map(|h| h * h).collect();
    Ok((mean_se(&hats), mean_se(&sq)))
}
