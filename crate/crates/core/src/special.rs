//! Digamma and log-gamma for positive real arguments.
//!
//! Both use upward recurrence to `x >= 15` followed by the asymptotic
//! (Stirling / Bernoulli) series, which is accurate to a few ulps there.

const SHIFT: f64 = 15.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function, `x > 0`. Returns NaN otherwise.
pub fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut z = x;
    let mut prod = 1.0;
    while z < SHIFT {
        prod *= z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // Bernoulli coefficients B_2k / (2k (2k-1)).
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2 * (1.0 / 1188.0 + inv2 * (-691.0 / 360_360.0 + inv2 / 156.0))))));
    (z - 0.5) * z.ln() - z + HALF_LN_2PI + series - prod.ln()
}

/// Digamma function ψ(x) = d/dx ln Γ(x), `x > 0`. Returns NaN otherwise.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    acc + z.ln() - 0.5 * inv - series
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_known_values() {
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-14);
        assert!((digamma(0.5) + EULER_GAMMA + 2.0 * std::f64::consts::LN_2).abs() < 1e-13);
        // ψ(n+1) = H_n - γ
        let h10: f64 = (1..=10).map(|i| 1.0 / i as f64).sum();
        assert!((digamma(11.0) - (h10 - EULER_GAMMA)).abs() < 1e-13);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        let ln_fact_20: f64 = (1..=20).map(|i| (i as f64).ln()).sum();
        assert!((ln_gamma(21.0) - ln_fact_20).abs() < 1e-12);
    }

    #[test]
    fn recurrences_hold() {
        for &x in &[1e-6, 0.013, 0.7, 3.3, 14.9, 15.0, 40.5, 1234.5] {
            let lg = ln_gamma(x + 1.0) - ln_gamma(x) - x.ln();
            assert!(lg.abs() < 1e-12 * (1.0 + ln_gamma(x).abs()), "ln_gamma recurrence at {x}");
            let dg = digamma(x + 1.0) - digamma(x) - 1.0 / x;
            assert!(dg.abs() < 1e-12 * (1.0 + 1.0 / x), "digamma recurrence at {x}");
        }
    }

    #[test]
    fn digamma_is_derivative_of_ln_gamma() {
        for &x in &[0.3, 1.7, 9.0, 55.0] {
            let h = 1e-5;
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((fd - digamma(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn matches_statrs() {
        for i in 1..200 {
            let x = 0.05 * i as f64 + 0.001 * (i * i) as f64;
            assert!((ln_gamma(x) - statrs::function::gamma::ln_gamma(x)).abs() < 1e-12 * (1.0 + x));
            assert!((digamma(x) - statrs::function::gamma::digamma(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_positive() {
        assert!(ln_gamma(0.0).is_nan());
        assert!(digamma(-1.0).is_nan());
    }
}
