//! Small numeric statistics kit: chi-square quantiles for detector
//! thresholds, plus the interval/test helpers used by batch reports.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

/// ln Γ(x) via the Lanczos approximation (g=7, n=9), |err| < 1e-13 for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x), series for x < a+1 and
/// continued fraction otherwise.
pub fn lower_regularized_gamma(a: f64, x: f64) -> Result<f64, StatsError> {
    if a <= 0.0 || x < 0.0 {
        return Err(StatsError::InvalidArgument("gamma requires a > 0, x >= 0"));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let ln_pref = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // series expansion
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..500 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        Ok((ln_pref.exp() * sum).clamp(0.0, 1.0))
    } else {
        // Lentz continued fraction for Q(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        Ok((1.0 - ln_pref.exp() * h).clamp(0.0, 1.0))
    }
}

/// CDF of the chi-square distribution with `df` degrees of freedom.
pub fn chi2_cdf(df: f64, x: f64) -> Result<f64, StatsError> {
    if df <= 0.0 {
        return Err(StatsError::InvalidArgument("chi2 df must be positive"));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    lower_regularized_gamma(df / 2.0, x / 2.0)
}

/// Quantile of the chi-square distribution, solved by bisection on the CDF.
pub fn chi2_quantile(df: f64, p: f64) -> Result<f64, StatsError> {
    if !(0.0..1.0).contains(&p) {
        return Err(StatsError::InvalidArgument("quantile p must be in [0, 1)"));
    }
    if df <= 0.0 {
        return Err(StatsError::InvalidArgument("chi2 df must be positive"));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let mut hi = df.max(1.0);
    while chi2_cdf(df, hi)? < p {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(StatsError::InvalidArgument("quantile bracket overflow"));
        }
    }
    let mut lo = 0.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(df, mid)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let phat = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (phat + z2 / (2.0 * n)) / denom;
    let half = z * ((phat * (1.0 - phat) + z2 / (4.0 * n)) / n).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Two-proportion z statistic (pooled). Returns 0 when both samples are empty.
pub fn two_proportion_z(s1: u64, n1: u64, s2: u64, n2: u64) -> f64 {
    if n1 == 0 || n2 == 0 {
        return 0.0;
    }
    let (p1, p2) = (s1 as f64 / n1 as f64, s2 as f64 / n2 as f64);
    let pooled = (s1 + s2) as f64 / (n1 + n2) as f64;
    let var = pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64);
    if var <= 0.0 {
        return 0.0;
    }
    (p1 - p2) / var.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_quantile_matches_known_value() {
        // 95th percentile of chi-square with 10 degrees of freedom
        let q = chi2_quantile(10.0, 0.95).unwrap();
        assert!((q - 18.307).abs() < 1e-3, "q = {q}");
    }

    #[test]
    fn chi2_cdf_quantile_round_trip() {
        for df in [1.0, 2.0, 5.0, 10.0, 20.0, 50.0] {
            for p in [0.01, 0.1, 0.5, 0.9, 0.95, 0.99] {
                let x = chi2_quantile(df, p).unwrap();
                let back = chi2_cdf(df, x).unwrap();
                assert!((back - p).abs() < 1e-9, "df={df} p={p} back={back}");
            }
        }
    }

    #[test]
    fn wilson_interval_contains_point_estimate() {
        let (lo, hi) = wilson_interval(90, 100, 1.96);
        assert!(lo < 0.9 && 0.9 < hi);
        assert!(lo > 0.8 && hi < 0.97);
    }

    #[test]
    fn two_proportion_z_sign_and_magnitude() {
        let z = two_proportion_z(90, 100, 10, 100);
        assert!(z > 10.0);
        assert_eq!(two_proportion_z(5, 100, 5, 100), 0.0);
    }
}
