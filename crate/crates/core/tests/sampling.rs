mod common;

use common::{gev_cdf_oracle, ks_pvalue, ks_statistic};
use gevsar::distributions::{gev_sample, nugget_sample, GevParams, NuggetSpec};
use gevsar::rng::substream;

#[test]
fn gev_draws_pass_ks_against_the_closed_form_cdf() {
    let cases = [(0.0, 1.0, 0.0), (1.0, 0.5, 0.3), (1.0, 1.0, -0.4), (2.0, 3.0, 0.9), (1.0, 0.05, 0.05)];
    for (i, &(mu, sigma, xi)) in cases.iter().enumerate() {
        let p = GevParams::new(mu, sigma, xi).unwrap();
        let x = gev_sample(&p, 20_000, &mut substream(41, &[i as u64]));
        let d = ks_statistic(&x, |t| gev_cdf_oracle(t, mu, sigma, xi));
        assert!(ks_pvalue(d, x.len()) > 0.001, "case {i}: D = {d}");
    }
}

#[test]
fn ks_helper_rejects_a_wrong_law() {
    let p = GevParams::new(0.0, 1.0, 0.2).unwrap();
    let x = gev_sample(&p, 20_000, &mut substream(2, &[]));
    let d = ks_statistic(&x, |t| gev_cdf_oracle(t, 0.0, 1.0, 0.3));
    assert!(ks_pvalue(d, x.len()) < 1e-6);
}

#[test]
fn nugget_mean_and_variance() {
    for (i, &tau2) in [0.0001, 0.01, 0.1].iter().enumerate() {
        let x = nugget_sample(&NuggetSpec::new(tau2).unwrap(), 200_000, &mut substream(5, &[i as u64]));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 1.0).abs() < 3.5 * (tau2 / n).sqrt(), "tau2 {tau2}: mean {mean}");
        assert!((var / tau2 - 1.0).abs() < 0.05, "tau2 {tau2}: var {var}");
        assert!(x.iter().all(|v| *v > 0.0));
    }
}
