//! RNG stream derivation, elementary samplers, special functions and the
//! statistical test helpers shared by the simulation modules.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// A named RNG stream: `(master_seed, stream_index)` derives a stream by
/// counter-based hashing, so replicate `i` always sees the same draws no
/// matter how work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        SeedSpec {
            master_seed,
            stream_index,
        }
    }

    /// Derive a further stream index, for nested replication (e.g. one
    /// stream per replicate, then one per sub-task).
    pub fn substream(&self, index: u64) -> SeedSpec {
        SeedSpec {
            master_seed: splitmix64(self.master_seed ^ splitmix64(self.stream_index)),
            stream_index: index,
        }
    }

    /// Instantiate the stream. Pure in `(master_seed, stream_index)`.
    pub fn stream(&self) -> Stream {
        let mut state = self
            .master_seed
            .wrapping_add(splitmix64(self.stream_index ^ 0x9e37_79b9_7f4a_7c15));
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            chunk.copy_from_slice(&splitmix64(state).to_le_bytes());
        }
        ChaCha12Rng::from_seed(key)
    }
}

/// The RNG behind every sampler in this crate.
pub type Stream = ChaCha12Rng;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard Rayleigh law, density `x exp(-x^2/2)` on `x > 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayleighLaw;

impl RayleighLaw {
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            -(-x * x / 2.0).exp_m1()
        }
    }

    pub fn mean(&self) -> f64 {
        (std::f64::consts::PI / 2.0).sqrt()
    }

    pub fn second_moment(&self) -> f64 {
        2.0
    }

    /// Inverse-CDF sample: `sqrt(-2 ln U)`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        (-2.0 * u.ln()).sqrt()
    }
}

/// One exponential draw with the given rate; mean `1/rate`.
pub fn sample_exponential<R: Rng>(rate: f64, rng: &mut R) -> Result<f64> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "exponential rate must be positive and finite, got {rate}"
        )));
    }
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    Ok(-u.ln() / rate)
}

/// Sum of `n` independent Exp(1) draws, i.e. a gamma(1, n) variable.
pub fn sample_gamma_integer<R: Rng>(n: u32, rng: &mut R) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "gamma shape must be a positive integer".into(),
        ));
    }
    let mut total = 0.0;
    for _ in 0..n {
        total += sample_exponential(1.0, rng)?;
    }
    Ok(total)
}

/// `E[exp(-y Z)]` for standard Rayleigh `Z`.
///
/// For moderate `y` this is the erfc identity
/// `1 - y sqrt(pi/2) exp(y^2/2) erfc(y/sqrt 2)`; beyond `y = 9` the
/// cancellation in `1 - (...)` starts eating digits, so the asymptotic series
/// `sum (-1)^k (2k+1)!! / y^(2k+2)` takes over (its terms there are far
/// below machine precision before they start growing).
pub fn rayleigh_mgf(y: f64) -> Result<f64> {
    if !(y >= 0.0) || !y.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "rayleigh_mgf argument must be nonnegative and finite, got {y}"
        )));
    }
    if y == 0.0 {
        return Ok(1.0);
    }
    if y <= 9.0 {
        let half = (std::f64::consts::PI / 2.0).sqrt();
        Ok(1.0 - y * half * (y * y / 2.0).exp() * libm::erfc(y / std::f64::consts::SQRT_2))
    } else {
        let y2 = y * y;
        let mut term = 1.0 / y2;
        let mut sum = term;
        for k in 0..40u32 {
            let next = -term * (2 * k + 3) as f64 / y2;
            if next.abs() < sum.abs() * 1e-17 || next.abs() > term.abs() {
                break;
            }
            sum += next;
            term = next;
        }
        Ok(sum)
    }
}

/// Kolmogorov-Smirnov sup-distance between the empirical CDF of a sorted
/// sample and a target CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::InvalidParameter("empty sample for KS test".into()));
    }
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max((f - (i as f64 + 1.0) / n).abs());
    }
    Ok(d)
}

/// Asymptotic 99% KS critical value, `1.63 / sqrt(n)`.
pub fn ks_critical_99(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

/// Pearson chi-square statistic for observed counts against expected counts.
pub fn chi_square_statistic(observed: &[f64], expected: &[f64]) -> Result<f64> {
    if observed.len() != expected.len() || observed.is_empty() {
        return Err(Error::InvalidParameter(
            "chi-square requires matching nonempty count vectors".into(),
        ));
    }
    let mut stat = 0.0;
    for (&o, &e) in observed.iter().zip(expected) {
        if !(e > 0.0) {
            return Err(Error::InvalidParameter(
                "chi-square expected counts must be positive".into(),
            ));
        }
        let d = o - e;
        stat += d * d / e;
    }
    Ok(stat)
}

/// Upper-tail p-value of the chi-square law with `dof` degrees of freedom.
pub fn chi_square_pvalue(stat: f64, dof: usize) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    gamma_ur(dof as f64 / 2.0, stat / 2.0)
}

/// `ln Gamma(x)`, re-exported for the closed-form moment formulas.
pub fn ln_gamma_fn(x: f64) -> f64 {
    ln_gamma(x)
}

/// Regularized upper incomplete gamma `Q(a, x)`; `1 - Q` is the gamma CDF.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    gamma_ur(a, x)
}

/// Sample mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Median of a sample (by sorting a copy).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad;

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn exponential_mean() {
        let mut rng = SeedSpec::new(7, 0).stream();
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sample_exponential(1.0, &mut rng).unwrap();
        }
        assert!((sum / n as f64 - 1.0).abs() < 3e-3);
    }

    #[test]
    fn exponential_rate_scaling() {
        // Exp(2) draws are distributed as Exp(1)/2; KS between the two.
        let mut a = SeedSpec::new(11, 0).stream();
        let mut b = SeedSpec::new(11, 1).stream();
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_exponential(2.0, &mut a).unwrap())
            .collect();
        let _ys: Vec<f64> = (0..n)
            .map(|_| sample_exponential(1.0, &mut b).unwrap() / 2.0)
            .collect();
        let xs = sorted(xs);
        let d = ks_statistic(&xs, |x| -(-2.0 * x).exp_m1()).unwrap();
        assert!(d < 0.01, "KS = {d}");
    }

    #[test]
    fn exponential_rejects_bad_rate() {
        let mut rng = SeedSpec::new(1, 0).stream();
        assert!(sample_exponential(0.0, &mut rng).is_err());
        assert!(sample_exponential(-1.0, &mut rng).is_err());
        assert!(sample_exponential(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn streams_are_deterministic() {
        let spec = SeedSpec::new(123456789, 42);
        let a: Vec<f64> = {
            let mut r = spec.stream();
            (0..64).map(|_| r.gen::<f64>()).collect()
        };
        let b: Vec<f64> = {
            let mut r = spec.stream();
            (0..64).map(|_| r.gen::<f64>()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_uncorrelated() {
        let mut a = SeedSpec::new(99, 0).stream();
        let mut b = SeedSpec::new(99, 1).stream();
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| a.gen::<f64>() - 0.5).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.gen::<f64>() - 0.5).collect();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let syy: f64 = ys.iter().map(|y| y * y).sum();
        let corr = sxy / (sxx * syy).sqrt();
        assert!(corr.abs() < 0.05, "corr = {corr}");
    }

    #[test]
    fn gamma_integer_basics() {
        assert!(sample_gamma_integer(0, &mut SeedSpec::new(1, 0).stream()).is_err());
        let mut rng = SeedSpec::new(5, 0).stream();
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_gamma_integer(10, &mut rng).unwrap())
            .collect();
        let (mean, _) = mean_se(&draws);
        assert!((mean - 10.0).abs() < 3.0 * (10.0 / n as f64).sqrt());
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var - 10.0).abs() < 0.5, "var = {var}");
    }

    #[test]
    fn gamma_three_matches_density() {
        // Chi-square of gamma(1,3) draws against the closed-form density
        // x^2 e^{-x} / 2, binned into equiprobable cells via the CDF.
        let mut rng = SeedSpec::new(18, 0).stream();
        let n = 50_000usize;
        let cdf = |x: f64| 1.0 - gamma_q(3.0, x);
        let bins = 40usize;
        let mut counts = vec![0.0; bins];
        for _ in 0..n {
            let x = sample_gamma_integer(3, &mut rng).unwrap();
            let k = ((cdf(x) * bins as f64) as usize).min(bins - 1);
            counts[k] += 1.0;
        }
        let expected = vec![n as f64 / bins as f64; bins];
        let stat = chi_square_statistic(&counts, &expected).unwrap();
        let p = chi_square_pvalue(stat, bins - 1);
        assert!(p > 0.01, "chi2 = {stat}, p = {p}");
    }

    #[test]
    fn mgf_at_zero_is_one() {
        assert_eq!(rayleigh_mgf(0.0).unwrap(), 1.0);
    }

    #[test]
    fn mgf_matches_quadrature_oracle() {
        // Independent oracle: adaptive quadrature of x exp(-x^2/2 - yx).
        for &y in &[0.25, 0.5, 1.0, 2.0, 5.0, 19.5] {
            let oracle = quad::integrate(|x| x * (-x * x / 2.0 - y * x).exp(), 0.0, 60.0, 1e-12)
                .unwrap()
                .value;
            let v = rayleigh_mgf(y).unwrap();
            assert!(
                (v - oracle).abs() <= 1e-10 * oracle.max(1e-12),
                "y = {y}: {v} vs {oracle}"
            );
        }
        // Frozen oracle value at y = 1.
        assert!((rayleigh_mgf(1.0).unwrap() - 0.344_320_457_581_201_4).abs() < 1e-12);
    }

    #[test]
    fn mgf_tail_and_monotonicity() {
        let v = rayleigh_mgf(100.0).unwrap();
        assert!(v > 0.0 && v < 1e-3);
        let mut prev = 1.0;
        for i in 1..200 {
            let y = i as f64 * 0.5;
            let v = rayleigh_mgf(y).unwrap();
            assert!(v < prev, "not decreasing at y = {y}");
            prev = v;
        }
        // Convexity on a grid.
        for i in 1..100 {
            let y = i as f64 * 0.25;
            let h = 0.125;
            let a = rayleigh_mgf(y - h).unwrap();
            let b = rayleigh_mgf(y).unwrap();
            let c = rayleigh_mgf(y + h).unwrap();
            assert!(a + c >= 2.0 * b - 1e-12);
        }
        assert!(rayleigh_mgf(-0.1).is_err());
    }

    #[test]
    fn mgf_branch_seam_is_smooth() {
        let lo = rayleigh_mgf(9.0).unwrap();
        let hi = rayleigh_mgf(9.0 + 1e-9).unwrap();
        assert!((lo - hi).abs() < 1e-9 * lo);
    }

    #[test]
    fn mgf_integral_is_rayleigh_inverse_moment() {
        // int_0^inf E[e^{-yZ}] dy = E[1/Z] = sqrt(pi/2).
        let v = quad::integrate(|y| rayleigh_mgf(y).unwrap(), 0.0, 400.0, 1e-11).unwrap();
        let tail = 1.0 / 400.0; // int_400^inf ~ 1/y
        let target = (std::f64::consts::PI / 2.0).sqrt();
        assert!(((v.value + tail) - target).abs() < 1e-8 * target + 1e-8);
    }

    #[test]
    fn ks_statistic_examples() {
        assert!(ks_statistic(&[], |_| 0.0).is_err());
        let d = ks_statistic(&[0.5; 100], |x| x).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        let d = ks_statistic(&[1.0], |_| 0.5).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ks_accepts_its_own_law() {
        let mut rng = SeedSpec::new(3, 0).stream();
        let n = 10_000;
        let xs = sorted((0..n).map(|_| rng.gen::<f64>()).collect());
        let d = ks_statistic(&xs, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(d < ks_critical_99(n), "D = {d}");
    }

    #[test]
    fn min_of_exponentials_is_exponential() {
        let mut a = SeedSpec::new(31, 0).stream();
        let mut b = SeedSpec::new(31, 1).stream();
        let (ra, rb) = (0.7, 1.9);
        let n = 100_000;
        let xs = sorted(
            (0..n)
                .map(|_| {
                    sample_exponential(ra, &mut a)
                        .unwrap()
                        .min(sample_exponential(rb, &mut b).unwrap())
                })
                .collect(),
        );
        let d = ks_statistic(&xs, |x| -(-(ra + rb) * x).exp_m1()).unwrap();
        assert!(d < 0.013, "D = {d}");
    }

    #[test]
    fn rayleigh_inverse_cdf_sampling() {
        let law = RayleighLaw;
        let mut rng = SeedSpec::new(13, 0).stream();
        let n = 100_000;
        let xs = sorted((0..n).map(|_| law.sample(&mut rng)).collect());
        let d = ks_statistic(&xs, |x| law.cdf(x)).unwrap();
        assert!(d < ks_critical_99(n), "D = {d}");
        assert_eq!(law.cdf(0.0), 0.0);
        assert!((law.mean() - 1.2533141373155001).abs() < 1e-12);
    }
}
