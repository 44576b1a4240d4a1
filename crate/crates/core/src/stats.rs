//! Densities, special functions and small summary helpers shared by the
//! likelihoods and samplers.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

pub use statrs::function::gamma::ln_gamma as lgamma;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

pub fn ln_factorial(k: u64) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// Negative binomial (NB2) log-pmf with mean `m` and size `size`.
/// Variance is `m + m^2 / size`.
pub fn nb2_log_pmf(k: u64, m: f64, size: f64) -> f64 {
    if m <= 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let kf = k as f64;
    // size * ln(size / (size + m)) written to stay accurate for large size.
    let zero_term = -size * (m / size).ln_1p();
    if k == 0 {
        return zero_term;
    }
    ln_gamma_ratio(kf, size) - ln_factorial(k) + zero_term + kf * (m / (size + m)).ln()
}

/// `ln Gamma(s + k) - ln Gamma(s)`, using a series in `k / s` when `s` dwarfs
/// `k` and the direct difference would cancel.
fn ln_gamma_ratio(k: f64, s: f64) -> f64 {
    if s > 1e4 * (k + 1.0) {
        let s1 = k * (k - 1.0) / 2.0;
        let s2 = (k - 1.0) * k * (2.0 * k - 1.0) / 6.0;
        let s3 = s1 * s1;
        k * s.ln() + s1 / s - s2 / (2.0 * s * s) + s3 / (3.0 * s * s * s)
    } else {
        ln_gamma(k + s) - ln_gamma(s)
    }
}

pub fn poisson_log_pmf(k: u64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * lambda.ln() - lambda - ln_factorial(k)
}

pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `Phi(b) - Phi(a)` for `a <= b`, computed in the tail that keeps precision.
pub fn std_normal_mass(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        std_normal_cdf(-a) - std_normal_cdf(-b)
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

/// Log density of a normal truncated to `[lo, hi]`.
pub fn truncated_normal_log_pdf(x: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if !(x >= lo && x <= hi) {
        return f64::NEG_INFINITY;
    }
    let mass = std_normal_mass((lo - mean) / sd, (hi - mean) / sd);
    normal_log_pdf(x, mean, sd) - mass.ln()
}

pub fn beta_log_pdf(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) || !(a > 0.0 && b > 0.0) {
        return f64::NEG_INFINITY;
    }
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
}

/// Student-t log density with location 0.
pub fn student_t_log_pdf(x: f64, nu: f64, scale: f64) -> f64 {
    let z = x / scale;
    ln_gamma(0.5 * (nu + 1.0))
        - ln_gamma(0.5 * nu)
        - 0.5 * (nu * std::f64::consts::PI).ln()
        - scale.ln()
        - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
}

/// Half-Student-t log density on `x >= 0`.
pub fn half_t_log_pdf(x: f64, nu: f64, scale: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    std::f64::consts::LN_2 + student_t_log_pdf(x, nu, scale)
}

/// Draw from a standard normal truncated to `[a, inf)`.
///
/// Plain rejection for small `a`, otherwise Robert's translated-exponential
/// proposal with the optimal rate.
pub fn std_normal_lower_tail<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a < 0.45 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a {
                return z;
            }
        }
    }
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = rng.sample(Exp1);
        let z = a + e / alpha;
        let u: f64 = rng.random();
        if u <= (-0.5 * (z - alpha) * (z - alpha)).exp() {
            return z;
        }
    }
}

/// Draw from `N(mean, sd^2)` truncated to `(-inf, upper]`.
pub fn normal_upper_truncated<R: Rng + ?Sized>(mean: f64, sd: f64, upper: f64, rng: &mut R) -> f64 {
    let b = (upper - mean) / sd;
    let w = std_normal_lower_tail(-b, rng);
    (mean - sd * w).min(upper)
}

/// Draw from `N(mean, sd^2)` truncated to `[lo, hi]` by inversion.
pub fn normal_interval_truncated<R: Rng + ?Sized>(
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> f64 {
    let a = std_normal_cdf((lo - mean) / sd);
    let b = std_normal_cdf((hi - mean) / sd);
    let u: f64 = rng.random();
    let p = a + u * (b - a);
    let x = mean + sd * std_normal_quantile(p);
    x.clamp(lo, hi)
}

/// Inverse standard normal cdf (Acklam's rational approximation refined by
/// one Halley step).
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    let lower = 0.02425;
    let x = if p < lower {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - lower {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = std_normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Draw from an NB2 with mean `m` and size `size` as a gamma-Poisson mixture.
pub fn sample_nb2<R: Rng + ?Sized>(m: f64, size: f64, rng: &mut R) -> u64 {
    if m <= 0.0 {
        return 0;
    }
    let rate = rand_distr::Gamma::new(size, m / size)
        .expect("positive shape and scale")
        .sample(rng);
    sample_poisson(rate, rng)
}

pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(lambda)
        .expect("positive rate")
        .sample(rng) as u64
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Quantile with linear interpolation between order statistics.
/// `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

/// Median and the central interval with the given mass.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Summary {
    pub fn of(xs: &[f64], mass: f64) -> Self {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let tail = 0.5 * (1.0 - mass);
        Self {
            median: quantile_sorted(&v, 0.5),
            lo: quantile_sorted(&v, tail),
            hi: quantile_sorted(&v, 1.0 - tail),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nb2_zero_mass_closed_form() {
        // size 1, mean 2: (1 / 3)^1
        assert_abs_diff_eq!(nb2_log_pmf(0, 2.0, 1.0).exp(), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(nb2_log_pmf(0, 2.0, 2.0).exp(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn nb2_matches_product_formula() {
        let (m, r) = (3.0_f64, 10.0_f64);
        let p = r / (r + m);
        // C(k + r - 1, k) p^r (1-p)^k evaluated with an explicit product
        for k in 0..12u64 {
            let mut coef = 1.0;
            for j in 0..k {
                coef *= (r + j as f64) / (j as f64 + 1.0);
            }
            let expected = coef * p.powf(r) * (1.0 - p).powi(k as i32);
            assert_abs_diff_eq!(nb2_log_pmf(k, m, r).exp(), expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn nb2_approaches_poisson_for_huge_size() {
        for k in 0..10 {
            assert_abs_diff_eq!(
                nb2_log_pmf(k, 4.0, 1e12),
                poisson_log_pmf(k, 4.0),
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn zero_mean_edge_cases() {
        assert_eq!(nb2_log_pmf(0, 0.0, 1.0), 0.0);
        assert_eq!(nb2_log_pmf(1, 0.0, 1.0), f64::NEG_INFINITY);
        assert_eq!(poisson_log_pmf(0, 0.0), 0.0);
        assert_eq!(poisson_log_pmf(2, 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn truncated_normal_integrates_to_one() {
        let (mu, sd, lo, hi) = (0.3, 0.5, 0.0, 1.0);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| truncated_normal_log_pdf(lo + (i as f64 + 0.5) * h, mu, sd, lo, hi).exp() * h)
            .sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for p in [1e-10, 1e-4, 0.02, 0.3, 0.5, 0.77, 0.99, 1.0 - 1e-9] {
            assert_abs_diff_eq!(std_normal_cdf(std_normal_quantile(p)), p, epsilon = 1e-13);
        }
    }

    #[test]
    fn tail_sampler_respects_bound_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for a in [-1.0, 0.0, 1.0, 3.0] {
            let draws: Vec<f64> = (0..40_000).map(|_| std_normal_lower_tail(a, &mut rng)).collect();
            assert!(draws.iter().all(|z| *z >= a));
            // mean of the truncated normal is phi(a) / (1 - Phi(a))
            let phi = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let expected = phi / std_normal_cdf(-a);
            assert!((mean(&draws) - expected).abs() < 0.02, "a = {a}");
        }
    }

    #[test]
    fn upper_truncated_draws_stay_below_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert!(normal_upper_truncated(2.0, 0.1, 0.0, &mut rng) <= 0.0);
        }
    }

    #[test]
    fn student_t_reduces_to_cauchy() {
        let x = 1.7;
        let cauchy = -(std::f64::consts::PI * (1.0 + x * x)).ln();
        assert_abs_diff_eq!(student_t_log_pdf(x, 1.0, 1.0), cauchy, epsilon = 1e-13);
    }

    #[test]
    fn beta_uniform_case() {
        assert_abs_diff_eq!(beta_log_pdf(0.3, 1.0, 1.0), 0.0, epsilon = 1e-15);
        assert_eq!(beta_log_pdf(1.0, 2.0, 2.0), f64::NEG_INFINITY);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert_abs_diff_eq!(quantile(&xs, 0.5), 2.5);
        let s = Summary::of(&xs, 0.5);
        assert!(s.lo <= s.median && s.median <= s.hi);
    }
}
