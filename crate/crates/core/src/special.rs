//! The exponential integral E1, used as an independent closed-form route for
//! cross-checking expectations of `log(1 + c X)` under exponential laws.

/// E1(x) = ∫_x^∞ e^{-t}/t dt for x > 0.
///
/// Power series below 1, modified Lentz continued fraction above. Relative
/// accuracy is ~1e-14 across the positive axis.
pub fn exp1(x: f64) -> f64 {
    assert!(x > 0.0, "exp1 requires a positive argument");
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    if x <= 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..=40 {
            term *= -x / k as f64;
            let contrib = -term / k as f64;
            sum += contrib;
            if contrib.abs() < 1e-18 * sum.abs().max(1.0) {
                break;
            }
        }
        -EULER_GAMMA - x.ln() + sum
    } else {
        // E1(x) = e^{-x} / (x + 1/(1 + 1/(x + 2/(1 + 2/(x + ...)))))
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=200 {
            let a = -(i as f64) * (i as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let delta = c * d;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-x).exp()
    }
}

/// E[log(1 + c X)] for X ~ Exp(lambda): equals `e^{lambda/c} E1(lambda/c)`.
pub fn expected_log1p_exponential(c: f64, lambda: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let z = lambda / c;
    // For large z the product e^z E1(z) ~ 1/z; the direct form overflows, so
    // use the asymptotic continued-fraction tail.
    if z > 700.0 {
        let mut acc: f64 = 0.0;
        for k in (1..=10).rev() {
            let kf = k as f64;
            acc = kf / (1.0 + kf / (z + acc));
        }
        1.0 / (z + acc)
    } else {
        z.exp() * exp1(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::adaptive_gk15;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matches_quadrature_definition() {
        for &x in &[0.05, 0.3, 0.6, 1.0, 2.5, 7.0, 30.0] {
            // E1(x) = ∫_0^1 exp(-x/u)/u du after t = x/u.
            let direct = adaptive_gk15(
                |u: f64| if u == 0.0 { 0.0 } else { (-x / u).exp() / u },
                &[0.0, 0.25, 0.5, 1.0],
                1e-12,
                4000,
            )
            .unwrap()
            .value;
            assert_abs_diff_eq!(exp1(x), direct, epsilon = 1e-11);
        }
    }

    #[test]
    fn known_value() {
        // E1(1) = 0.21938393439552026...
        assert_abs_diff_eq!(exp1(1.0), 0.219_383_934_395_520_26, epsilon = 1e-14);
    }

    #[test]
    fn expected_log_identity_against_quadrature() {
        for &(c, lambda) in &[(1.0, 0.6), (2.0, 1.3), (0.2, 0.4)] {
            let quad = adaptive_gk15(
                |u: f64| (c * -(-u).ln_1p() / lambda).ln_1p(),
                &[0.0, 0.5, 0.9, 0.99, 0.999, 0.9999, 1.0],
                1e-11,
                4000,
            )
            .unwrap()
            .value;
            assert_abs_diff_eq!(expected_log1p_exponential(c, lambda), quad, epsilon = 1e-10);
        }
    }

    #[test]
    fn large_argument_stays_finite() {
        let v = expected_log1p_exponential(1e-6, 1.0);
        assert!(v > 0.0 && v < 1e-5);
    }
}
