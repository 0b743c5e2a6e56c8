//! GEV distribution functions and the lognormal nugget.
//!
//! `GEV(mu, sigma, xi)` has cdf `exp(-[1 + xi (t - mu)/sigma]_+^(-1/xi))` for
//! `xi != 0` and the Gumbel form `exp(-exp(-(t - mu)/sigma))` at `xi = 0`.
//! The field innovations use the Fréchet family `GEV(1, xi, xi)`, whose
//! support is `t > 0` and whose quantile reduces to `(-ln p)^(-xi)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{open_unit, PolarNormal};

/// Shapes with `|xi|` below this use the Gumbel branch.
pub const GUMBEL_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !(mu.is_finite() && sigma.is_finite() && xi.is_finite()) {
            return Err(Error::Domain(format!(
                "GEV parameters must be finite (mu={mu}, sigma={sigma}, xi={xi})"
            )));
        }
        if sigma <= 0.0 {
            return Err(Error::Domain(format!("GEV scale must be positive, got {sigma}")));
        }
        Ok(Self { mu, sigma, xi })
    }

    /// The innovation family `GEV(1, xi, xi)`, `xi > 0`.
    pub fn innovation(xi: f64) -> Result<Self> {
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::Domain(format!("innovation shape must be positive, got {xi}")));
        }
        Ok(Self { mu: 1.0, sigma: xi, xi })
    }

    fn is_gumbel(&self) -> bool {
        self.xi.abs() < GUMBEL_THRESHOLD
    }
}

pub fn gev_cdf(t: f64, p: &GevParams) -> f64 {
    let y = (t - p.mu) / p.sigma;
    if p.is_gumbel() {
        return (-(-y).exp()).exp();
    }
    let a = p.xi * y;
    if a <= -1.0 {
        // Outside the support: below the lower endpoint (xi > 0) or above
        // the upper endpoint (xi < 0).
        return if p.xi > 0.0 { 0.0 } else { 1.0 };
    }
    let tail = (-a.ln_1p() / p.xi).exp();
    (-tail).exp()
}

pub fn gev_quantile(prob: f64, p: &GevParams) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0,1), got {prob}")));
    }
    Ok(quantile_unchecked(prob, p))
}

#[inline]
fn quantile_unchecked(prob: f64, p: &GevParams) -> f64 {
    let l = -(prob.ln());
    if p.is_gumbel() {
        p.mu - p.sigma * l.ln()
    } else {
        p.mu + p.sigma / p.xi * (-p.xi * l.ln()).exp_m1()
    }
}

/// Log-density; `-inf` outside the support.
pub fn gev_logpdf(t: f64, p: &GevParams) -> f64 {
    let y = (t - p.mu) / p.sigma;
    if p.is_gumbel() {
        return -p.sigma.ln() - y - (-y).exp();
    }
    let a = p.xi * y;
    if a <= -1.0 {
        return f64::NEG_INFINITY;
    }
    let ln_z = a.ln_1p();
    -p.sigma.ln() - (1.0 + 1.0 / p.xi) * ln_z - (-ln_z / p.xi).exp()
}

/// Inverse-transform map from a uniform draw to a GEV variate.
pub fn gev_from_uniform(u: f64, p: &GevParams) -> Result<f64> {
    gev_quantile(u, p)
}

pub fn gev_sample<R: Rng + ?Sized>(p: &GevParams, n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n];
    gev_fill(p, &mut out, rng);
    out
}

pub fn gev_fill<R: Rng + ?Sized>(p: &GevParams, out: &mut [f64], rng: &mut R) {
    for v in out.iter_mut() {
        *v = quantile_unchecked(open_unit(rng), p);
    }
}

/// Multiplicative lognormal nugget with mean 1 and variance `tau2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuggetSpec {
    pub tau2: f64,
    pub sigma_p2: f64,
    pub mu_p: f64,
}

impl NuggetSpec {
    pub fn new(tau2: f64) -> Result<Self> {
        if !(tau2 >= 0.0 && tau2.is_finite()) {
            return Err(Error::Domain(format!("nugget variance must be >= 0, got {tau2}")));
        }
        let sigma_p2 = tau2.ln_1p();
        Ok(Self {
            tau2,
            sigma_p2,
            mu_p: -sigma_p2 / 2.0,
        })
    }
}

pub fn nugget_sample<R: Rng + ?Sized>(spec: &NuggetSpec, n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n];
    nugget_fill(spec, &mut out, rng);
    out
}

pub fn nugget_fill<R: Rng + ?Sized>(spec: &NuggetSpec, out: &mut [f64], rng: &mut R) {
    if spec.tau2 == 0.0 {
        out.fill(1.0);
        return;
    }
    let sd = spec.sigma_p2.sqrt();
    let mut normal = PolarNormal::new();
    for v in out.iter_mut() {
        *v = (spec.mu_p + sd * normal.sample(rng)).exp();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use proptest::prelude::*;

    const INV_E: f64 = 0.367_879_441_171_442_33;

    fn bisect_quantile(prob: f64, p: &GevParams, lo: f64, hi: f64) -> f64 {
        let (mut lo, mut hi) = (lo, hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gev_cdf(mid, p) < prob {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn cdf_examples() {
        let gumbel = GevParams::new(0.0, 1.0, 0.0).unwrap();
        assert!((gev_cdf(0.0, &gumbel) - INV_E).abs() < 1e-15);
        let frechet = GevParams::innovation(0.5).unwrap();
        assert!((gev_cdf(1.0, &frechet) - INV_E).abs() < 1e-15);
        let near = GevParams::new(0.0, 1.0, 1e-12).unwrap();
        assert!((gev_cdf(0.0, &near) - INV_E).abs() < 1e-9);
    }

    #[test]
    fn cdf_support_endpoints() {
        let pos = GevParams::new(0.0, 1.0, 0.5).unwrap();
        assert_eq!(gev_cdf(-2.0, &pos), 0.0);
        assert_eq!(gev_cdf(-10.0, &pos), 0.0);
        let neg = GevParams::new(0.0, 1.0, -0.5).unwrap();
        assert_eq!(gev_cdf(2.0, &neg), 1.0);
        assert_eq!(gev_cdf(5.0, &neg), 1.0);
    }

    #[test]
    fn quantile_examples_against_bisection() {
        for xi in [0.01, 0.3, 0.9] {
            let p = GevParams::innovation(xi).unwrap();
            assert!((gev_quantile(INV_E, &p).unwrap() - 1.0).abs() < 1e-14);
        }
        let p = GevParams::innovation(0.5).unwrap();
        let oracle = bisect_quantile(0.5, &p, 1e-6, 100.0);
        assert!((oracle - 1.201_122).abs() < 1e-6);
        assert!((gev_quantile(0.5, &p).unwrap() - oracle).abs() < 1e-10);

        let g = GevParams::new(0.0, 1.0, 0.0).unwrap();
        let oracle = bisect_quantile(0.5, &g, -50.0, 50.0);
        assert!((oracle - 0.366_513).abs() < 1e-6);
        assert!((gev_quantile(0.5, &g).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn quantile_domain_errors() {
        let p = GevParams::innovation(0.5).unwrap();
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(gev_quantile(bad, &p), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn logpdf_examples() {
        let g = GevParams::new(0.0, 1.0, 0.0).unwrap();
        assert!((gev_logpdf(0.0, &g) + 1.0).abs() < 1e-15);
        let f = GevParams::innovation(0.5).unwrap();
        assert_eq!(gev_logpdf(0.0, &f), f64::NEG_INFINITY);
        assert_eq!(gev_logpdf(-1.0, &f), f64::NEG_INFINITY);
    }

    #[test]
    fn logpdf_matches_finite_difference_of_cdf() {
        let mut rng = stream(3);
        let h = 1e-6;
        for _ in 0..200 {
            let xi: f64 = rng.random_range(-0.4..0.9);
            let p = GevParams::new(rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0), xi)
                .unwrap();
            let u = rng.random_range(0.02..0.98);
            let t = gev_quantile(u, &p).unwrap();
            let fd = (gev_cdf(t + h, &p) - gev_cdf(t - h, &p)) / (2.0 * h);
            let dens = gev_logpdf(t, &p).exp();
            assert!((dens - fd).abs() <= 1e-4 * dens, "t={t} p={p:?} {dens} vs {fd}");
        }
    }

    #[test]
    fn logpdf_integrates_to_one() {
        // Trapezoid in the probability scale: integrate f(q(u)) q'(u) du = 1,
        // i.e. the density over a fine grid of the support.
        let p = GevParams::innovation(0.3).unwrap();
        let lo = gev_quantile(1e-12, &p).unwrap();
        let hi = gev_quantile(1.0 - 1e-9, &p).unwrap();
        let n = 400_000;
        let step = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * gev_logpdf(lo + i as f64 * step, &p).exp();
        }
        assert!((acc * step - 1.0).abs() < 1e-6, "{}", acc * step);
    }

    #[test]
    fn sample_forced_uniform_and_determinism() {
        let p = GevParams::innovation(0.5).unwrap();
        assert!((gev_from_uniform(INV_E, &p).unwrap() - 1.0).abs() < 1e-14);
        let a = gev_sample(&p, 1000, &mut stream(11));
        let b = gev_sample(&p, 1000, &mut stream(11));
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn nugget_examples() {
        let zero = NuggetSpec::new(0.0).unwrap();
        assert!(nugget_sample(&zero, 100, &mut stream(1)).iter().all(|&v| v == 1.0));
        let s = NuggetSpec::new(0.01).unwrap();
        assert!((s.sigma_p2 - 0.009_950_33).abs() < 1e-8);
        assert!((s.mu_p + 0.004_975_17).abs() < 1e-8);
        assert!(NuggetSpec::new(-0.1).is_err());
    }

    #[test]
    fn nugget_identities_on_construction() {
        for tau2 in [0.0, 1e-4, 0.05, 0.1, 3.0] {
            let s = NuggetSpec::new(tau2).unwrap();
            assert_eq!(s.sigma_p2, tau2.ln_1p());
            assert_eq!(s.mu_p, -s.sigma_p2 / 2.0);
            // lognormal mean exp(mu + s2/2) = 1, variance (e^s2 - 1) e^(2mu + s2) = tau2
            assert!(((s.mu_p + s.sigma_p2 / 2.0).exp() - 1.0).abs() < 1e-15);
            let var = s.sigma_p2.exp_m1() * (2.0 * s.mu_p + s.sigma_p2).exp();
            assert!((var - tau2).abs() <= 1e-12 * (1.0 + tau2));
        }
    }

    proptest! {
        #[test]
        fn cdf_quantile_round_trip(
            mu in -5.0f64..5.0,
            sigma in 0.1f64..5.0,
            xi in -0.9f64..1.5,
            k in 1u32..1000,
        ) {
            let p = GevParams::new(mu, sigma, xi).unwrap();
            let prob = k as f64 / 1000.0;
            let q = gev_quantile(prob, &p).unwrap();
            prop_assert!((gev_cdf(q, &p) - prob).abs() < 1e-10);
        }

        #[test]
        fn branch_continuity(t in -3.0f64..20.0, sign in prop::bool::ANY) {
            let xi = if sign { 1e-8 } else { -1e-8 };
            let g = GevParams::new(0.0, 1.0, 0.0).unwrap();
            let p = GevParams::new(0.0, 1.0, xi).unwrap();
            prop_assert!((gev_cdf(t, &p) - gev_cdf(t, &g)).abs() < 1e-6);
        }

        #[test]
        fn cdf_is_monotone(xi in -0.8f64..1.2, a in -10.0f64..30.0, b in -10.0f64..30.0) {
            let p = GevParams::new(0.5, 1.3, xi).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(gev_cdf(lo, &p) <= gev_cdf(hi, &p));
        }

        #[test]
        fn innovation_draws_are_positive(xi in 0.01f64..1.0, seed in 0u64..1000) {
            let p = GevParams::innovation(xi).unwrap();
            let v = gev_sample(&p, 256, &mut stream(seed));
            prop_assert!(v.iter().all(|&x| x > 0.0));
        }
    }
}
