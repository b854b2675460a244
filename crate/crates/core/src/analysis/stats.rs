use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestReport {
    pub mean_diff: f64,
    pub std_err: f64,
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub ci95: (f64, f64),
    pub n: usize,
}

/// Mean and standard error (n - 1 denominator) of `xs`.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
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
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail `P(|T| >= |t|)` of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// `t` with two-sided tail `alpha`, by bisection.
pub fn t_critical(alpha: f64, df: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    while student_t_sf(hi, df) > alpha {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_sf(mid, df) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Paired t-test on differences against a zero mean.
///
/// Zero spread with a nonzero mean gives `t = ±inf` and `p = 0`; all-equal
/// zero differences give `t = 0` and `p = 1`.
pub fn paired_t_test(diffs: &[f64]) -> Result<TTestReport> {
    let n = diffs.len();
    if n < 2 {
        return Err(AnalysisError::TooFewSamples { need: 2, got: n });
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let (mean, se) = mean_stderr(diffs);
    let df = (n - 1) as f64;
    let (t, p) = if se > 0.0 {
        let t = mean / se;
        (t, student_t_sf(t, df))
    } else if mean == 0.0 {
        (0.0, 1.0)
    } else {
        (mean.signum() * f64::INFINITY, 0.0)
    };
    let half = t_critical(0.05, df) * se;
    Ok(TTestReport {
        mean_diff: mean,
        std_err: se,
        t,
        p,
        ci95: (mean - half, mean + half),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn one_degree_of_freedom_is_cauchy() {
        // P(|T| > 1) = 1/2 for the Cauchy distribution
        assert!((student_t_sf(1.0, 1.0) - 0.5).abs() < 1e-13);
        assert!((t_critical(0.5, 1.0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn small_hand_case() {
        let r = paired_t_test(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.mean_diff, 2.0);
        assert!((r.std_err - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((r.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!((r.p - 0.0742).abs() < 5e-4);
        // t_crit(0.975, 2) = 4.302653
        assert!((r.ci95.1 - 2.0 - 4.302_652_729_749_464 / 3f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn symmetric_and_degenerate() {
        let r = paired_t_test(&[0.3, -0.3, 1.0, -1.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
        let r = paired_t_test(&[0.5, 0.5]).unwrap();
        assert_eq!(r.t, f64::INFINITY);
        assert_eq!(r.p, 0.0);
        assert_eq!(paired_t_test(&[0.0, 0.0]).unwrap().p, 1.0);
        assert!(paired_t_test(&[1.0]).is_err());
    }
}
