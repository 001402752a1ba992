//! Pólya-Gamma random variates.
//!
//! `PG(1, c)` draws use Devroye's alternating-series rejection sampler with a
//! truncated exponential / truncated inverse-Gaussian proposal mixture split at
//! `t = 0.64`. `PG(b, c)` for integer `b` is the sum of `b` independent
//! `PG(1, c)` draws up to a configurable trial count; beyond that a
//! moment-matched normal approximation is used.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use statrs::function::erf::erfc;

/// Truncation point between the two proposal regimes.
const TRUNC: f64 = 0.64;

/// Largest trial count sampled exactly by summation.
pub const DEFAULT_EXACT_LIMIT: u32 = 64;

/// Outer rejection loops allowed before the sampler is considered broken.
/// The acceptance rate is above 0.99 for every tilt, so hitting this means a bug.
const MAX_REJECTIONS: usize = 10_000;

/// Parameters of a `PG(b, c)` draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgParams {
    pub b: u32,
    pub c: f64,
}

/// Sampler for `PG(b, c)` with a configurable exact/approximate boundary.
#[derive(Clone, Copy, Debug)]
pub struct PgSampler {
    exact_limit: u32,
}

impl Default for PgSampler {
    fn default() -> Self {
        Self {
            exact_limit: DEFAULT_EXACT_LIMIT,
        }
    }
}

impl PgSampler {
    pub fn new(exact_limit: u32) -> Self {
        Self { exact_limit }
    }

    pub fn exact_limit(&self) -> u32 {
        self.exact_limit
    }

    /// Draws from `PG(b, c)`. `b = 0` is the point mass at zero.
    pub fn sample<R: Rng + ?Sized>(&self, b: u32, c: f64, rng: &mut R) -> f64 {
        let c = c.abs();
        if b <= self.exact_limit {
            (0..b).map(|_| sample_pg1(c, rng)).sum()
        } else {
            sample_pg_normal(b, c, rng)
        }
    }
}

/// Draws from `PG(b, c)` using the default exact limit.
pub fn sample_pg<R: Rng + ?Sized>(b: u32, c: f64, rng: &mut R) -> f64 {
    PgSampler::default().sample(b, c, rng)
}

/// Exact draw from `PG(1, c)`.
pub fn sample_pg1<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    // Work with J*(1, z), z = |c|/2; PG(1, c) = J*(1, z) / 4.
    let z = 0.5 * c.abs();
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let p_exp = mass_texpon(z, fz);

    for _ in 0..MAX_REJECTIONS {
        let x = if rng.random::<f64>() < p_exp {
            let e: f64 = rng.sample(Exp1);
            TRUNC + e / fz
        } else {
            truncated_inverse_gaussian(z, rng)
        };

        let mut s = series_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
    panic!("PG(1, {c}) sampler exceeded {MAX_REJECTIONS} rejections");
}

/// Moment-matched normal draw, resampled until positive.
fn sample_pg_normal<R: Rng + ?Sized>(b: u32, c: f64, rng: &mut R) -> f64 {
    let (mean, var) = pg_moments(b, c);
    let sd = var.sqrt();
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let x = mean + sd * z;
        if x > 0.0 {
            return x;
        }
    }
}

/// `E[PG(b, c)] = b / (2c) * tanh(c / 2)`, with the `b / 4` limit at zero.
pub fn pg_mean(b: u32, c: f64) -> f64 {
    let h = 0.5 * c.abs();
    let ratio = if h < 1e-4 {
        // tanh(h)/h
        1.0 - h * h / 3.0
    } else {
        h.tanh() / h
    };
    0.25 * b as f64 * ratio
}

/// `Var[PG(b, c)] = b (sinh c - c) / (4 c^3 cosh^2(c/2))`.
pub fn pg_variance(b: u32, c: f64) -> f64 {
    let c = c.abs();
    let h = 0.5 * c;
    let unit = if h < 0.025 {
        pg1_variance_series(h)
    } else {
        pg1_variance_closed(c)
    };
    b as f64 * unit
}

fn pg1_variance_series(h: f64) -> f64 {
    let h2 = h * h;
    1.0 / 24.0 - h2 / 30.0 + 17.0 * h2 * h2 / 840.0
}

fn pg1_variance_closed(c: f64) -> f64 {
    let h = 0.5 * c;
    let sech = 1.0 / h.cosh();
    (2.0 * h.tanh() - c * sech * sech) / (4.0 * c * c * c)
}

/// Mean and variance sharing one `tanh` evaluation.
pub fn pg_moments(b: u32, c: f64) -> (f64, f64) {
    let c = c.abs();
    let h = 0.5 * c;
    let bf = b as f64;
    if h < 0.025 {
        return (pg_mean(b, c), bf * pg1_variance_series(h));
    }
    let t = h.tanh();
    let mean = 0.25 * bf * t / h;
    let var = bf * (2.0 * t - c * (1.0 - t * t)) / (4.0 * c * c * c);
    (mean, var)
}

/// Analytic Laplace transform `E[exp(-s ω)]` of `PG(b, c)`.
pub fn pg_laplace(b: u32, c: f64, s: f64) -> f64 {
    let num = (0.5 * c).cosh();
    let den = (0.5 * (c * c + 2.0 * s).sqrt()).cosh();
    (num / den).powi(b as i32)
}

/// Probability of proposing from the truncated exponential branch.
fn mass_texpon(z: f64, fz: f64) -> f64 {
    let rt = (1.0 / TRUNC).sqrt();
    let b = rt * (TRUNC * z - 1.0);
    let a = -rt * (TRUNC * z + 1.0);
    let x0 = fz.ln() + fz * TRUNC;
    let xb = x0 - z + ln_norm_cdf(b);
    let xa = x0 + z + ln_norm_cdf(a);
    let q_over_p = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + q_over_p)
}

/// Terms of the alternating series for the J*(1, 0) density.
fn series_coef(n: u32, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let nh = n as f64 + 0.5;
        let expnt = -1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * nh * nh / x;
        expnt.exp()
    } else {
        0.0
    }
}

/// Inverse-Gaussian(1/z, 1) truncated to (0, TRUNC).
fn truncated_inverse_gaussian<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let mut x = TRUNC + 1.0;
    if z < 1.0 / TRUNC {
        // Mean beyond the truncation point: propose from the z = 0 limit
        // (a truncated 1/chi^2_1) and accept with the tilt.
        let mut alpha = 0.0;
        while rng.random::<f64>() > alpha {
            let (mut e1, mut e2): (f64, f64) = (rng.sample(Exp1), rng.sample(Exp1));
            while e1 * e1 > 2.0 * e2 / TRUNC {
                e1 = rng.sample(Exp1);
                e2 = rng.sample(Exp1);
            }
            let d = 1.0 + e1 * TRUNC;
            x = TRUNC / (d * d);
            alpha = (-0.5 * z * z * x).exp();
        }
    } else {
        let mu = 1.0 / z;
        while x > TRUNC {
            let n: f64 = rng.sample(StandardNormal);
            let y = n * n;
            let mu_y = mu * y;
            x = mu + 0.5 * mu * mu_y - 0.5 * mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if rng.random::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
        }
    }
    x
}

/// `ln Φ(x)` with an asymptotic tail for very negative arguments.
fn ln_norm_cdf(x: f64) -> f64 {
    if x < -30.0 {
        ln_norm_cdf_tail(x)
    } else {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    }
}

// Mills ratio: Φ(x) ≈ φ(x)/|x| (1 - 1/x²)
fn ln_norm_cdf_tail(x: f64) -> f64 {
    let x2 = x * x;
    -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * PI).ln() + (1.0 - 1.0 / x2).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_moments_agree() {
        for &c in &[0.0, 0.01, 0.049, 0.05, 0.3, 2.0, 8.0, 40.0] {
            let (m, v) = pg_moments(7, c);
            assert!((m - pg_mean(7, c)).abs() < 1e-14 * (1.0 + m));
            assert!((v - pg_variance(7, c)).abs() < 1e-12 * v.max(1e-3), "{c}: {v} {}", pg_variance(7, c));
        }
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empirical_mean(b: u32, c: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampler = PgSampler::default();
        let draws: Vec<f64> = (0..n).map(|_| sampler.sample(b, c, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, var)
    }

    #[test]
    fn pg1_mean_at_zero_tilt() {
        let (m, _) = empirical_mean(1, 0.0, 100_000, 1);
        assert!((m - 0.25).abs() < 0.0025, "mean {m}");
    }

    #[test]
    fn pg1_mean_at_tilt_two() {
        let (m, _) = empirical_mean(1, 2.0, 100_000, 2);
        let expected = 1.0f64.tanh() / 4.0;
        assert!((expected - 0.190_399).abs() < 1e-6);
        assert!((m - expected).abs() < 0.01 * expected, "mean {m}");
    }

    #[test]
    fn draws_are_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &c in &[0.0, 0.1, 1.0, 5.0, 40.0] {
            for _ in 0..2000 {
                assert!(sample_pg1(c, &mut rng) > 0.0);
            }
        }
        for _ in 0..2000 {
            assert!(sample_pg(1000, 0.0, &mut rng) > 0.0);
            assert!(sample_pg(200, 30.0, &mut rng) > 0.0);
        }
    }

    #[test]
    fn sum_of_three() {
        let (m, _) = empirical_mean(3, 1.0, 100_000, 4);
        let expected = 1.5 * 0.5f64.tanh();
        assert!((expected - 0.693_176).abs() < 1e-5);
        assert!((m - expected).abs() < 0.01 * expected, "mean {m}");
    }

    #[test]
    fn normal_regime_mean() {
        let (m, _) = empirical_mean(1000, 0.0, 100_000, 5);
        assert!((m - 250.0).abs() < 2.5, "mean {m}");
    }

    #[test]
    fn variance_matches_pg1_draws() {
        for (i, &c) in [0.0, 0.7, 3.0].iter().enumerate() {
            let (_, v) = empirical_mean(1, c, 200_000, 10 + i as u64);
            let expected = pg_variance(1, c);
            assert!((v - expected).abs() < 0.03 * expected, "c={c} var {v} vs {expected}");
        }
    }

    #[test]
    fn variance_series_is_continuous() {
        for &c in &[0.04, 0.05, 0.06] {
            let series = pg1_variance_series(0.5 * c);
            let closed = pg1_variance_closed(c);
            assert!((series - closed).abs() < 1e-10, "c={c}");
        }
        assert!((pg_variance(1, 0.0) - 1.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn mean_formula_limits() {
        assert_eq!(pg_mean(4, 0.0), 1.0);
        assert!((pg_mean(1, 20.0) - 10f64.tanh() / 40.0).abs() < 1e-15);
        assert_eq!(pg_mean(2, -3.0), pg_mean(2, 3.0));
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = ChaCha8Rng::seed_from_u64(99);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            assert_eq!(sample_pg(7, 1.3, &mut a), sample_pg(7, 1.3, &mut b));
        }
    }

    #[test]
    fn laplace_transform_matches_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &c in &[0.0, 1.5] {
            let draws: Vec<f64> = (0..100_000).map(|_| sample_pg1(c, &mut rng)).collect();
            for &s in &[0.1, 1.0] {
                let vals: Vec<f64> = draws.iter().map(|w| (-s * w).exp()).collect();
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                let expected = pg_laplace(1, c, s);
                assert!((m - expected).abs() < 4.0 * sd / n.sqrt(), "c={c} s={s}: {m} vs {expected}");
            }
        }
    }

    #[test]
    fn ln_norm_cdf_tail_matches() {
        // scipy.stats.norm.logcdf(-29.999) = -454.2912111961239
        assert!((ln_norm_cdf(-29.999) + 454.291_211_196_123_9).abs() < 1e-9);
        let direct = ln_norm_cdf(-30.0);
        let asym = ln_norm_cdf_tail(-30.0);
        assert!((direct - asym).abs() < 1e-5);
        assert!((ln_norm_cdf(0.0) - 0.5f64.ln()).abs() < 1e-14);
    }
}
