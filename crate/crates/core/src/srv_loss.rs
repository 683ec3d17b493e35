//! Hierarchical Poisson-Binomial model for Schmidt rank vectors.
//!
//! The leading rank is `n ~ Poisson(lambda)`, then `m ~ Binomial(n, p)` and
//! `k ~ Binomial(m, q)`. Marginally `m ~ Poisson(p lambda)` and
//! `k ~ Poisson(p q lambda)`, so the point prediction is
//! `(lambda, p lambda, p q lambda)`.

use crate::error::{Error, Result};
use crate::labeler::SrvLabel;

/// Floor added to the softplus link and clamp margin for the logistic links.
pub const LINK_EPS: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Distribution parameters predicted by the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrvParams {
    pub lambda: f64,
    pub p: f64,
    pub q: f64,
    /// Pre-link network outputs.
    pub raw: [f64; 3],
}

impl SrvParams {
    pub fn from_raw(raw: [f64; 3]) -> Self {
        SrvParams {
            lambda: softplus(raw[0]) + LINK_EPS,
            p: logistic(raw[1]).clamp(LINK_EPS, 1.0 - LINK_EPS),
            q: logistic(raw[2]).clamp(LINK_EPS, 1.0 - LINK_EPS),
            raw,
        }
    }

    /// Parameters given directly, without a raw representation.
    pub fn new(lambda: f64, p: f64, q: f64) -> Self {
        SrvParams {
            lambda,
            p,
            q,
            raw: [f64::NAN; 3],
        }
    }

    /// Derivatives of `(lambda, p, q)` with respect to the raw outputs; zero
    /// where a clamp is active.
    pub fn link_derivatives(&self) -> [f64; 3] {
        let dl = logistic(self.raw[0]);
        let lp = logistic(self.raw[1]);
        let lq = logistic(self.raw[2]);
        let inside = |v: f64| v > LINK_EPS && v < 1.0 - LINK_EPS;
        [
            dl,
            if inside(lp) { lp * (1.0 - lp) } else { 0.0 },
            if inside(lq) { lq * (1.0 - lq) } else { 0.0 },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrvPrediction {
    pub n_hat: f64,
    pub m_hat: f64,
    pub k_hat: f64,
}

impl SrvPrediction {
    pub fn as_array(&self) -> [f64; 3] {
        [self.n_hat, self.m_hat, self.k_hat]
    }

    pub fn distance(&self, label: &SrvLabel) -> f64 {
        let y = label.as_f64();
        let p = self.as_array();
        ((y[0] - p[0]).powi(2) + (y[1] - p[1]).powi(2) + (y[2] - p[2]).powi(2)).sqrt()
    }
}

pub fn predict(params: &SrvParams) -> SrvPrediction {
    SrvPrediction {
        n_hat: params.lambda,
        m_hat: params.p * params.lambda,
        k_hat: params.p * params.q * params.lambda,
    }
}

/// `c * ln(x)`, exactly zero when `c == 0` whatever `x` is.
#[inline]
fn weighted_ln(c: f64, x: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c * x.ln()
    }
}

/// Log-likelihood of a label, dropping terms that do not depend on the
/// parameters.
pub fn log_likelihood(params: &SrvParams, label: &SrvLabel) -> f64 {
    let (n, m, k) = (label.n as f64, label.m as f64, label.k as f64);
    let SrvParams { lambda, p, q, .. } = *params;
    weighted_ln(n, lambda) - lambda
        + weighted_ln(m, p)
        + weighted_ln(n - m, 1.0 - p)
        + weighted_ln(k, q)
        + weighted_ln(m - k, 1.0 - q)
}

/// Gradient of [`log_likelihood`] with respect to `(lambda, p, q)`.
pub fn log_likelihood_grad(params: &SrvParams, label: &SrvLabel) -> [f64; 3] {
    let (n, m, k) = (label.n as f64, label.m as f64, label.k as f64);
    let SrvParams { lambda, p, q, .. } = *params;
    let ratio = |c: f64, x: f64| if c == 0.0 { 0.0 } else { c / x };
    [
        ratio(n, lambda) - 1.0,
        ratio(m, p) - ratio(n - m, 1.0 - p),
        ratio(k, q) - ratio(m - k, 1.0 - q),
    ]
}

/// Negative log-likelihood of one sample and its gradient with respect to
/// the raw (pre-link) outputs.
pub fn nll_raw(raw: [f64; 3], label: &SrvLabel) -> (f64, [f64; 3]) {
    let params = SrvParams::from_raw(raw);
    let ll = log_likelihood(&params, label);
    let g = log_likelihood_grad(&params, label);
    let d = params.link_derivatives();
    (-ll, [-g[0] * d[0], -g[1] * d[1], -g[2] * d[2]])
}

/// Mean negative log-likelihood over a batch, with per-sample raw gradients
/// already divided by the batch size.
pub fn batch_nll(raws: &[[f64; 3]], labels: &[SrvLabel]) -> (f64, Vec<[f64; 3]>) {
    let scale = 1.0 / raws.len().max(1) as f64;
    let mut total = 0.0;
    let grads = raws
        .iter()
        .zip(labels)
        .map(|(r, l)| {
            let (v, g) = nll_raw(*r, l);
            total += v;
            [g[0] * scale, g[1] * scale, g[2] * scale]
        })
        .collect();
    (total * scale, grads)
}

const LN_FACT_TABLE: usize = 256;

fn ln_factorial_table() -> &'static [f64; LN_FACT_TABLE] {
    static TABLE: std::sync::OnceLock<[f64; LN_FACT_TABLE]> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; LN_FACT_TABLE];
        for i in 2..LN_FACT_TABLE {
            t[i] = t[i - 1] + (i as f64).ln();
        }
        t
    })
}

/// `ln(n!)`, i.e. `lgamma(n + 1)` for integer arguments.
pub fn ln_factorial(n: u64) -> f64 {
    let table = ln_factorial_table();
    if (n as usize) < LN_FACT_TABLE {
        return table[n as usize];
    }
    table[LN_FACT_TABLE - 1] + (LN_FACT_TABLE as u64..=n).map(|i| (i as f64).ln()).sum::<f64>()
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

pub fn poisson_pmf(rate: f64, x: u64) -> f64 {
    if rate == 0.0 {
        return if x == 0 { 1.0 } else { 0.0 };
    }
    (weighted_ln(x as f64, rate) - rate - ln_factorial(x)).exp()
}

/// Joint pmf of `(n, m, k)`; zero outside `m <= n`, `k <= m`.
pub fn joint_pmf(lambda: f64, p: f64, q: f64, n: i64, m: i64, k: i64) -> Result<f64> {
    if n < 0 || m < 0 || k < 0 {
        return Err(Error::Structural(format!("negative count in ({n},{m},{k})")));
    }
    if m > n || k > m {
        return Ok(0.0);
    }
    let (n, m, k) = (n as u64, m as u64, k as u64);
    let (nf, mf, kf) = (n as f64, m as f64, k as f64);
    let ln = weighted_ln(nf, lambda) - lambda - ln_factorial(n)
        + ln_binomial(n, m)
        + weighted_ln(mf, p)
        + weighted_ln(nf - mf, 1.0 - p)
        + ln_binomial(m, k)
        + weighted_ln(kf, q)
        + weighted_ln(mf - kf, 1.0 - q);
    Ok(ln.exp())
}

pub fn marginal_pmf_m(lambda: f64, p: f64, m: u64) -> f64 {
    poisson_pmf(p * lambda, m)
}

pub fn marginal_pmf_k(lambda: f64, p: f64, q: f64, k: u64) -> f64 {
    poisson_pmf(p * q * lambda, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(n: u32, m: u32, k: u32) -> SrvLabel {
        SrvLabel::new(n, m, k).unwrap()
    }

    #[test]
    fn log_likelihood_reference_value() {
        // 4 ln 4 - 4 + 2 ln .5 + 2 ln .5 + 2 ln .5 + 0
        let v = log_likelihood(&SrvParams::new(4.0, 0.5, 0.5), &label(4, 2, 2));
        let oracle = 4.0 * 4f64.ln() - 4.0 - 6.0 * 2f64.ln();
        assert!((v - oracle).abs() < 1e-14);
        assert!((v - (-2.6137)).abs() < 5e-5);
    }

    #[test]
    fn zero_coefficients_contribute_nothing() {
        let l = label(1, 1, 1);
        let near_one = SrvParams::new(1.0, 1.0 - 1e-15, 1.0 - 1e-15);
        assert!((log_likelihood(&near_one, &l) + 1.0).abs() < 1e-12);
        // p = q = 1 exactly: ln(1-p) would be -inf, but the coefficients are 0
        let exact = SrvParams::new(1.0, 1.0, 1.0);
        assert_eq!(log_likelihood(&exact, &l), -1.0);
        let g = log_likelihood_grad(&exact, &l);
        assert_eq!(g, [0.0, 1.0, 1.0]);
        // m == k with q = 1 and n == m with p = 1, larger label
        assert_eq!(
            log_likelihood(&SrvParams::new(3.0, 1.0, 1.0), &label(3, 3, 3)),
            3.0 * 3f64.ln() - 3.0
        );
    }

    fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let l = label(5, 3, 2);
        let base = SrvParams::new(3.7, 0.42, 0.61);
        let g = log_likelihood_grad(&base, &l);
        let fl = central_diff(|x| log_likelihood(&SrvParams { lambda: x, ..base }, &l), base.lambda);
        let fp = central_diff(|x| log_likelihood(&SrvParams { p: x, ..base }, &l), base.p);
        let fq = central_diff(|x| log_likelihood(&SrvParams { q: x, ..base }, &l), base.q);
        assert!(rel_close(g[0], fl, 1e-6));
        assert!(rel_close(g[1], fp, 1e-6));
        assert!(rel_close(g[2], fq, 1e-6));
    }

    #[test]
    fn joint_pmf_basics() {
        assert_eq!(joint_pmf(2.0, 0.3, 0.3, 2, 3, 1).unwrap(), 0.0);
        assert!(joint_pmf(2.0, 0.3, 0.3, -1, 0, 0).is_err());
        for n in 0..8 {
            let v = joint_pmf(1.0, 1.0, 1.0, n, n, n).unwrap();
            let want = (-1f64).exp() / ln_factorial(n as u64).exp();
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_pmf_sums_to_one() {
        let mut total = 0.0;
        for n in 0..=60 {
            for m in 0..=n {
                for k in 0..=m {
                    total += joint_pmf(3.0, 0.5, 0.5, n, m, k).unwrap();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn marginal_of_m_by_summation() {
        for m in 0..=15u64 {
            let mut s = 0.0;
            for n in m as i64..=80 {
                for k in 0..=m as i64 {
                    s += joint_pmf(4.0, 0.5, 0.5, n, m as i64, k).unwrap();
                }
            }
            let poisson2 = (-2f64).exp() * 2f64.powi(m as i32) / ln_factorial(m).exp();
            assert!((marginal_pmf_m(4.0, 0.5, m) - poisson2).abs() < 1e-15);
            assert!((s - marginal_pmf_m(4.0, 0.5, m)).abs() < 1e-10);
        }
    }

    #[test]
    fn marginal_of_k_collapses_when_p_q_are_one() {
        for k in 0..10 {
            assert!((marginal_pmf_k(3.0, 1.0, 1.0, k) - poisson_pmf(3.0, k)).abs() < 1e-15);
        }
    }

    #[test]
    fn prediction_examples() {
        let p = predict(&SrvParams::new(6.0, 0.5, 0.5));
        assert_eq!(p.as_array(), [6.0, 3.0, 1.5]);
        let eps = 1e-9;
        let p = predict(&SrvParams::new(4.0, 1.0 - eps, 1.0 - eps));
        for v in p.as_array() {
            assert!((v - 4.0).abs() < 1e-7);
        }
    }

    #[test]
    fn maximum_at_empirical_rates() {
        let l = label(6, 4, 3);
        let best = SrvParams::new(6.0, 4.0 / 6.0, 3.0 / 4.0);
        let g = log_likelihood_grad(&best, &l);
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-12);
        let top = log_likelihood(&best, &l);
        for dl in [-0.5, -0.1, 0.1, 0.5] {
            for dp in [-0.05, 0.0, 0.05] {
                for dq in [-0.05, 0.0, 0.05] {
                    let v = log_likelihood(&SrvParams::new(6.0 + dl, best.p + dp, best.q + dq), &l);
                    assert!(v < top);
                }
            }
        }
    }

    #[test]
    fn boundary_rates_are_constrained_maxima() {
        // m = n and k = m put p and q on the upper bound; the derivative
        // there points outward and every feasible move loses likelihood
        for l in [label(5, 5, 4), label(4, 3, 3), label(3, 3, 3)] {
            let (n, m, k) = (l.n as f64, l.m as f64, l.k as f64);
            let best = SrvParams::new(n, m / n, k / m);
            let g = log_likelihood_grad(&best, &l);
            assert!(g[0].abs() < 1e-12);
            for (v, gi) in [(best.p, g[1]), (best.q, g[2])] {
                if v == 1.0 {
                    assert!(gi > 0.0);
                } else {
                    assert!(gi.abs() < 1e-12);
                }
            }
            let top = log_likelihood(&best, &l);
            for d in [1e-3, 0.05, 0.3] {
                assert!(log_likelihood(&SrvParams::new(n, best.p * (1.0 - d), best.q), &l) < top);
                assert!(log_likelihood(&SrvParams::new(n, best.p, best.q * (1.0 - d)), &l) < top);
            }
        }
    }

    #[test]
    fn raw_gradient_matches_finite_differences() {
        let l = label(4, 3, 1);
        let raw = [0.7, -0.3, 1.1];
        let (_, g) = nll_raw(raw, &l);
        for i in 0..3 {
            let f = |x: f64| {
                let mut r = raw;
                r[i] = x;
                nll_raw(r, &l).0
            };
            let fd = central_diff(f, raw[i]);
            assert!(rel_close(g[i], fd, 1e-6), "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn batch_nll_is_a_mean() {
        let l = label(3, 2, 1);
        let (one, g1) = batch_nll(&[[0.2, 0.1, -0.4]], &[l]);
        let (two, g2) = batch_nll(&[[0.2, 0.1, -0.4]; 2], &[l, l]);
        assert!((one - two).abs() < 1e-15);
        assert!((g1[0][0] - 2.0 * g2[0][0]).abs() < 1e-15);
    }

    #[test]
    fn links_stay_in_range() {
        for x in [-1e3, -40.0, -1.0, 0.0, 1.0, 40.0, 1e3] {
            let p = SrvParams::from_raw([x, x, x]);
            assert!(p.lambda > 0.0 && p.lambda.is_finite());
            assert!(p.p >= LINK_EPS && p.p <= 1.0 - LINK_EPS);
        }
    }

    proptest! {
        #[test]
        fn predictions_are_ordered(raw in prop::array::uniform3(-8.0f64..8.0)) {
            let p = predict(&SrvParams::from_raw(raw));
            prop_assert!(p.n_hat >= p.m_hat && p.m_hat >= p.k_hat && p.k_hat > 0.0);
        }

        #[test]
        fn joint_pmf_mass_is_one(lambda in 0.1f64..15.0, p in 0.01f64..0.99, q in 0.01f64..0.99) {
            let top = (lambda + 10.0 * lambda.sqrt() + 20.0).ceil() as i64;
            let mut total = 0.0;
            for n in 0..=top {
                for m in 0..=n {
                    for k in 0..=m {
                        total += joint_pmf(lambda, p, q, n, m, k).unwrap();
                    }
                }
            }
            prop_assert!((total - 1.0).abs() < 1e-8);
        }
    }
}
