//! Paired Student's t-test.
//!
//! The two-sided p-value comes from the t-distribution CDF expressed through
//! the regularized incomplete beta function, evaluated with a Lentz
//! continued fraction.

use crate::error::{Error, Result};

/// ln Γ(x) for x > 0, Lanczos approximation (g = 7, 9 coefficients).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection: Γ(x) Γ(1-x) = π / sin(πx)
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3.0e-16;
    const FPMIN: f64 = 1.0e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "inc_beta parameters must be positive");
    assert!((0.0..=1.0).contains(&x), "inc_beta x out of range: {x}");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a t statistic with `dof` degrees of freedom:
/// P(|T| >= |t|) = I_{dof/(dof+t^2)}(dof/2, 1/2).
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    assert!(dof > 0.0, "degrees of freedom must be positive");
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(dof / 2.0, 0.5, dof / (dof + t * t))
}

/// Result of a paired t-test on two equal-length samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTTest {
    pub t: f64,
    pub p: f64,
    pub dof: f64,
    pub mean_a: f64,
    pub mean_b: f64,
}

/// Paired t-test over the differences a_i - b_i, two-sided.
///
/// Zero-variance differences give t = 0, p = 1 when the mean difference is
/// also zero, and |t| = inf, p = 0 otherwise. Fewer than two pairs is an
/// error; callers treat it as non-significant.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Stats(format!(
            "paired t-test needs at least 2 pairs, got {n}"
        )));
    }
    let nf = n as f64;
    let mean_a = a.iter().sum::<f64>() / nf;
    let mean_b = b.iter().sum::<f64>() / nf;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_d = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean_d).powi(2)).sum::<f64>() / (nf - 1.0);
    let dof = nf - 1.0;

    let (t, p) = if var == 0.0 {
        if mean_d == 0.0 {
            (0.0, 1.0)
        } else {
            (mean_d.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean_d / (var / nf).sqrt();
        (t, student_t_two_sided_p(t, dof))
    };
    Ok(PairedTTest {
        t,
        p,
        dof,
        mean_a,
        mean_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ln_gamma_spot_values() {
        assert_relative_eq!(ln_gamma(5.0), 24.0_f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(
            ln_gamma(0.5),
            std::f64::consts::PI.sqrt().ln(),
            max_relative = 1e-12
        );
        assert_relative_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn inc_beta_boundaries_and_symmetry() {
        assert_eq!(inc_beta(2.0, 3.0, 0.0), 0.0);
        assert_eq!(inc_beta(2.0, 3.0, 1.0), 1.0);
        // I_x(a, b) = 1 - I_{1-x}(b, a)
        for &(a, b, x) in &[(2.0, 3.0, 0.3), (0.5, 0.5, 0.8), (10.0, 0.5, 0.05)] {
            assert_relative_eq!(
                inc_beta(a, b, x),
                1.0 - inc_beta(b, a, 1.0 - x),
                max_relative = 1e-12
            );
        }
        // I_x(1, 1) = x
        assert_relative_eq!(inc_beta(1.0, 1.0, 0.42), 0.42, max_relative = 1e-12);
    }

    #[test]
    fn identical_samples_give_t_zero_p_one() {
        let a = [1.0, 2.0, 3.0];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn known_example_matches_reference() {
        // independently computed with scipy.stats.ttest_rel
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = paired_t_test(&a, &b).unwrap();
        assert_relative_eq!(r.t, 3.0 * 2.0_f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(r.p, 0.013236, epsilon = 1e-6);
        assert_eq!(r.mean_a, 3.0);
        assert_eq!(r.mean_b, 0.0);
    }

    #[test]
    fn constant_nonzero_difference_is_infinitely_significant() {
        let a = [2.0, 3.0, 4.0];
        let b = [1.0, 2.0, 3.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.t.is_infinite() && r.t > 0.0);
        assert_eq!(r.p, 0.0);
    }

    #[test]
    fn growing_offset_shrinks_p() {
        let b = [0.1, -0.4, 0.2, 0.9, -0.2, 0.5];
        // per-pair jitter keeps the difference variance fixed and non-zero
        let jitter = [0.05, -0.03, 0.08, 0.01, -0.06, 0.02];
        let mut last_p = 1.0;
        for offset in [0.1, 0.5, 1.0, 2.0] {
            let a: Vec<f64> = b
                .iter()
                .zip(&jitter)
                .map(|(v, j)| v + offset + j)
                .collect();
            let p = paired_t_test(&a, &b).unwrap().p;
            assert!(p < last_p, "p not decreasing: {p} vs {last_p}");
            last_p = p;
        }
    }

    #[test]
    fn too_few_pairs_or_mismatched_lengths_error() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }
}
