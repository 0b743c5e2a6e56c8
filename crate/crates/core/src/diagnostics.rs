//! Validation tools: madograms, QQ data, quantile mapping, relative errors,
//! median-IQR standardization and the spline bias corrector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{FieldStack, ModelParams};
use crate::spline::SmoothingSpline;
use crate::stats::{median, quantile_sorted, sorted_copy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MadogramBin {
    /// Mean pair distance inside the bin, in pixels.
    pub h: f64,
    /// `2γ̂(h)`: mean absolute difference over the bin's pairs.
    pub value: f64,
    pub pairs: u64,
}

pub type MadogramCurve = Vec<MadogramBin>;

pub fn default_madogram_bins(d: usize) -> (f64, usize) {
    let max_h = d as f64 / 2.0;
    (max_h, (max_h.ceil() as usize).max(1))
}

/// Madogram of one or more `d x d` fields. Pairs are binned by Euclidean
/// distance into `n_bins` equal-width, right-closed bins over `(0, max_h]`
/// and pooled across fields; empty bins are dropped.
pub fn madogram_fields(fields: &[&[f64]], d: usize, max_h: f64, n_bins: usize) -> Result<MadogramCurve> {
    if n_bins == 0 {
        return Err(Error::Domain("madogram needs at least one bin".into()));
    }
    if d < 2 {
        return Err(Error::Domain(format!("madogram needs d >= 2, got {d}")));
    }
    if !(max_h > 0.0 && max_h <= d as f64 * std::f64::consts::SQRT_2) {
        return Err(Error::Domain(format!("max_h must lie in (0, d*sqrt 2], got {max_h}")));
    }
    for f in fields {
        if f.len() != d * d {
            return Err(Error::InputShape { expected: format!("{} values", d * d), actual: format!("{}", f.len()) });
        }
    }
    let width = max_h / n_bins as f64;
    let reach = max_h.floor() as isize;
    // offsets (di, dj) with each unordered pair visited once
    let mut offsets = Vec::new();
    for di in 0..=reach {
        for dj in -reach..=reach {
            if di == 0 && dj <= 0 {
                continue;
            }
            let h = ((di * di + dj * dj) as f64).sqrt();
            if h <= max_h {
                let bin = (((h / width).ceil() as usize).max(1) - 1).min(n_bins - 1);
                offsets.push((di, dj, h, bin));
            }
        }
    }
    let mut sum = vec![0.0; n_bins];
    let mut dist = vec![0.0; n_bins];
    let mut count = vec![0u64; n_bins];
    let di_max = d as isize;
    for f in fields {
        for &(di, dj, h, bin) in &offsets {
            let mut s = 0.0;
            let mut c = 0u64;
            for i in 0..di_max - di {
                for j in 0.max(-dj)..di_max.min(di_max - dj) {
                    let a = f[(i * di_max + j) as usize];
                    let b = f[((i + di) * di_max + j + dj) as usize];
                    s += (a - b).abs();
                    c += 1;
                }
            }
            sum[bin] += s;
            dist[bin] += h * c as f64;
            count[bin] += c;
        }
    }
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| MadogramBin { h: dist[b] / count[b] as f64, value: sum[b] / count[b] as f64, pairs: count[b] })
        .collect())
}

pub fn empirical_madogram(field: &[f64], d: usize, max_h: f64, n_bins: usize) -> Result<MadogramCurve> {
    madogram_fields(&[field], d, max_h, n_bins)
}

/// Madogram pooled over every replicate of a stack.
pub fn stack_madogram(stack: &FieldStack, max_h: f64, n_bins: usize) -> Result<MadogramCurve> {
    let reps: Vec<Vec<f64>> = (0..stack.r).map(|k| stack.replicate(k)).collect();
    let refs: Vec<&[f64]> = reps.iter().map(|v| v.as_slice()).collect();
    madogram_fields(&refs, stack.d, max_h, n_bins)
}

pub fn madogram_csv(curve: &[MadogramBin]) -> String {
    let mut out = String::from("h,value,pairs\n");
    for b in curve {
        out.push_str(&format!("{},{},{}\n", b.h, b.value, b.pairs));
    }
    out
}

/// `(y - median) / IQR` over all values jointly (type-7 quartiles).
pub fn median_iqr_standardize_values(values: &[f64]) -> Result<Vec<f64>> {
    let s = sorted_copy(values);
    if s.is_empty() {
        return Err(Error::Domain("cannot standardize an empty sample".into()));
    }
    let med = quantile_sorted(&s, 0.5);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    if !(iqr > 1e-12 * (med.abs() + 1.0)) {
        return Err(Error::DegenerateField { spread: iqr, location: med });
    }
    Ok(values.iter().map(|v| (v - med) / iqr).collect())
}

pub fn median_iqr_standardize(stack: &FieldStack) -> Result<FieldStack> {
    let mut out = FieldStack::new(stack.d, stack.r, median_iqr_standardize_values(&stack.values)?)?;
    out.provenance = stack.provenance.clone();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqRow {
    pub prob: f64,
    pub obs: f64,
    /// Median over repetitions of the simulated quantile.
    pub sim: f64,
    /// Pointwise 2.5% and 97.5% bounds over repetitions.
    pub lo: f64,
    pub hi: f64,
}

/// Type-7 quantiles of `obs` against one or more simulated repetitions.
pub fn qq_data(obs: &[f64], sims: &[Vec<f64>], probs: &[f64]) -> Result<Vec<QqRow>> {
    if obs.is_empty() || sims.is_empty() || sims.iter().any(|s| s.is_empty()) {
        return Err(Error::Domain("QQ data needs nonempty samples".into()));
    }
    if probs.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Domain("QQ probabilities must lie in (0,1)".into()));
    }
    let so = sorted_copy(obs);
    let ss: Vec<Vec<f64>> = sims.iter().map(|s| sorted_copy(s)).collect();
    Ok(probs
        .iter()
        .map(|&p| {
            let per_rep = sorted_copy(&ss.iter().map(|s| quantile_sorted(s, p)).collect::<Vec<_>>());
            QqRow {
                prob: p,
                obs: quantile_sorted(&so, p),
                sim: quantile_sorted(&per_rep, 0.5),
                lo: quantile_sorted(&per_rep, 0.025),
                hi: quantile_sorted(&per_rep, 0.975),
            }
        })
        .collect())
}

pub fn qq_csv(rows: &[QqRow]) -> String {
    let mut out = String::from("prob,obs_q,sim_q_median,lo,hi\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.prob, r.obs, r.sim, r.lo, r.hi));
    }
    out
}

/// Probability at which the type-7 quantile function of `sorted` hits `v`
/// (clamped to [0, 1]; ties resolve to the first matching order statistic).
fn ecdf7(sorted: &[f64], v: f64) -> f64 {
    let n = sorted.len();
    if n == 1 || v <= sorted[0] {
        return 0.0;
    }
    if v >= sorted[n - 1] {
        return 1.0;
    }
    let i = sorted.partition_point(|&s| s < v);
    // sorted[i-1] < v <= sorted[i]
    let (a, b) = (sorted[i - 1], sorted[i]);
    let frac = if b > a { (v - a) / (b - a) } else { 1.0 };
    ((i - 1) as f64 + frac) / (n - 1) as f64
}

/// Replaces each simulated value by the reference quantile at its level in
/// the simulated distribution; monotone, so ranks are preserved.
pub fn quantile_map(sim: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    if sim.is_empty() || reference.is_empty() {
        return Err(Error::Domain("quantile mapping needs nonempty samples".into()));
    }
    Ok(quantile_map_sorted(sim, &sorted_copy(reference)))
}

/// [`quantile_map`] against an already sorted, nonempty reference.
pub fn quantile_map_sorted(sim: &[f64], sorted_reference: &[f64]) -> Vec<f64> {
    let ss = sorted_copy(sim);
    sim.iter().map(|&v| quantile_sorted(sorted_reference, ecdf7(&ss, v))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreEntry {
    pub are: f64,
    pub log_are: f64,
    /// Zero observation (ARE undefined) or zero error (log is -inf).
    pub flagged: bool,
}

pub fn are(observed: &[f64], simulated: &[f64]) -> Result<Vec<AreEntry>> {
    if observed.len() != simulated.len() {
        return Err(Error::InputShape {
            expected: format!("{} simulated values", observed.len()),
            actual: format!("{}", simulated.len()),
        });
    }
    Ok(observed
        .iter()
        .zip(simulated)
        .map(|(&o, &s)| {
            if o == 0.0 {
                return AreEntry { are: f64::NAN, log_are: f64::NAN, flagged: true };
            }
            let a = (s - o).abs() / o.abs();
            AreEntry { are: a, log_are: a.ln(), flagged: a == 0.0 || !a.is_finite() }
        })
        .collect())
}

/// Median log-ARE over unflagged entries (`None` when all are flagged).
pub fn median_log_are(entries: &[AreEntry]) -> Option<f64> {
    let v: Vec<f64> = entries.iter().filter(|e| !e.flagged).map(|e| e.log_are).collect();
    (!v.is_empty()).then(|| median(&v))
}

pub fn are_csv(entries: &[AreEntry]) -> String {
    let mut out = String::from("index,are,log_are,flagged\n");
    for (i, e) in entries.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i, e.are, e.log_are, e.flagged));
    }
    out
}

pub const MIN_CORRECTOR_PAIRS: usize = 50;

/// Per-parameter smoothing splines from raw estimate to truth, fitted on
/// the transformed scales (ξ, ln κ², ln τ²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrector {
    pub splines: [SmoothingSpline; 3],
}

fn to_scales(p: &ModelParams) -> Result<[f64; 3]> {
    if !(p.kappa2 > 0.0 && p.tau2 > 0.0) {
        return Err(Error::Domain(format!("bias corrector needs kappa2, tau2 > 0, got {p:?}")));
    }
    Ok([p.xi, p.kappa2.ln(), p.tau2.ln()])
}

impl BiasCorrector {
    pub fn fit(truths: &[ModelParams], estimates: &[ModelParams]) -> Result<Self> {
        if truths.len() != estimates.len() {
            return Err(Error::InputShape {
                expected: format!("{} estimates", truths.len()),
                actual: format!("{}", estimates.len()),
            });
        }
        if truths.len() < MIN_CORRECTOR_PAIRS {
            return Err(Error::Domain(format!(
                "bias corrector needs at least {MIN_CORRECTOR_PAIRS} pairs, got {}",
                truths.len()
            )));
        }
        let t: Vec<[f64; 3]> = truths.iter().map(to_scales).collect::<Result<_>>()?;
        let e: Vec<[f64; 3]> = estimates.iter().map(to_scales).collect::<Result<_>>()?;
        let fit = |c: usize| {
            let x: Vec<f64> = e.iter().map(|v| v[c]).collect();
            let y: Vec<f64> = t.iter().map(|v| v[c]).collect();
            SmoothingSpline::fit(&x, &y)
        };
        Ok(Self { splines: [fit(0)?, fit(1)?, fit(2)?] })
    }

    pub fn correct(&self, est: &ModelParams) -> Result<ModelParams> {
        let z = to_scales(est)?;
        Ok(ModelParams {
            xi: self.splines[0].eval(z[0]),
            kappa2: self.splines[1].eval(z[1]).exp(),
            tau2: self.splines[2].eval(z[2]).exp(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{nugget_fill, NuggetSpec};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn constant_field_is_flat_zero() {
        let f = vec![3.5; 64];
        let c = empirical_madogram(&f, 8, 4.0, 4).unwrap();
        assert!(c.iter().all(|b| b.value == 0.0 && b.pairs > 0));
    }

    #[test]
    fn checkerboard_pairs() {
        let f = [0.0, 1.0, 1.0, 0.0];
        let c = empirical_madogram(&f, 2, 1.5, 3).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].h, c[0].value, c[0].pairs), (1.0, 1.0, 4));
        assert!((c[1].h - std::f64::consts::SQRT_2).abs() < 1e-15);
        assert_eq!((c[1].value, c[1].pairs), (0.0, 2));
    }

    #[test]
    fn madogram_pair_counts_match_enumeration() {
        let d = 5;
        let mut rng = stream(1);
        let f: Vec<f64> = (0..d * d).map(|_| rng.random_range(0.0..1.0)).collect();
        let c = empirical_madogram(&f, d, 3.0, 6).unwrap();
        // brute force over all unordered pairs
        let mut sum = [0.0; 6];
        let mut cnt = [0u64; 6];
        for a in 0..d * d {
            for b in a + 1..d * d {
                let (ia, ja, ib, jb) = ((a / d) as f64, (a % d) as f64, (b / d) as f64, (b % d) as f64);
                let h = ((ia - ib).powi(2) + (ja - jb).powi(2)).sqrt();
                if h <= 3.0 {
                    let bin = ((h / 0.5).ceil() as usize).max(1) - 1;
                    sum[bin] += (f[a] - f[b]).abs();
                    cnt[bin] += 1;
                }
            }
        }
        let want: Vec<(f64, u64)> = (0..6).filter(|&b| cnt[b] > 0).map(|b| (sum[b] / cnt[b] as f64, cnt[b])).collect();
        assert_eq!(c.len(), want.len());
        for (got, (v, n)) in c.iter().zip(want) {
            assert_eq!(got.pairs, n);
            assert!((got.value - v).abs() < 1e-12);
        }
        assert!(c.windows(2).all(|w| w[0].h < w[1].h));
    }

    #[test]
    fn madogram_errors() {
        let f = vec![0.0; 16];
        assert!(matches!(empirical_madogram(&f, 4, 2.0, 0), Err(Error::Domain(_))));
        assert!(empirical_madogram(&f, 4, 10.0, 2).is_err());
        assert!(empirical_madogram(&f[..4], 1, 1.0, 1).is_err());
    }

    fn transpose(f: &[f64], d: usize) -> Vec<f64> {
        (0..d * d).map(|k| f[(k % d) * d + k / d]).collect()
    }

    fn rotate(f: &[f64], d: usize) -> Vec<f64> {
        (0..d * d).map(|k| f[(d - 1 - k % d) * d + k / d]).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn madogram_symmetries(d in 2usize..9, seed in 0u64..1000, shift in -10.0f64..10.0) {
            let mut rng = stream(seed);
            let f: Vec<f64> = (0..d * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (mh, nb) = (d as f64 * 0.8, 5);
            let base = empirical_madogram(&f, d, mh, nb).unwrap();
            for other in [transpose(&f, d), rotate(&f, d)] {
                let c = empirical_madogram(&other, d, mh, nb).unwrap();
                prop_assert_eq!(c.len(), base.len());
                for (a, b) in c.iter().zip(&base) {
                    prop_assert_eq!(a.pairs, b.pairs);
                    prop_assert!((a.value - b.value).abs() < 1e-12);
                }
            }
            let shifted: Vec<f64> = f.iter().map(|v| v + shift).collect();
            let c = empirical_madogram(&shifted, d, mh, nb).unwrap();
            for (a, b) in c.iter().zip(&base) {
                prop_assert!((a.value - b.value).abs() < 1e-9);
            }
        }

        #[test]
        fn standardize_affine_invariance(seed in 0u64..1000, a in 0.01f64..100.0, b in -50.0f64..50.0) {
            let mut rng = stream(seed);
            let v: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..3.0f64).powi(3)).collect();
            let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let s1 = median_iqr_standardize_values(&v).unwrap();
            let s2 = median_iqr_standardize_values(&w).unwrap();
            for (x, y) in s1.iter().zip(&s2) {
                prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn iid_noise_madogram_is_flat() {
        let spec = NuggetSpec::new(0.1).unwrap();
        let mut rng = stream(9);
        let fields: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let mut f = vec![0.0; 256];
                nugget_fill(&spec, &mut f, &mut rng);
                f
            })
            .collect();
        let refs: Vec<&[f64]> = fields.iter().map(|f| f.as_slice()).collect();
        let c = madogram_fields(&refs, 16, 8.0, 8).unwrap();
        let tail: Vec<&MadogramBin> = c.iter().filter(|b| b.h > 1.0).collect();
        let mean = tail.iter().map(|b| b.value).sum::<f64>() / tail.len() as f64;
        for b in tail {
            assert!((b.value - mean).abs() < 0.1 * mean, "{b:?} vs {mean}");
        }
    }

    #[test]
    fn standardized_median_and_iqr() {
        let mut rng = stream(2);
        let v: Vec<f64> = (0..501).map(|_| rng.random_range(1.0..9.0)).collect();
        let s = median_iqr_standardize_values(&v).unwrap();
        let sorted = sorted_copy(&s);
        assert!(quantile_sorted(&sorted, 0.5).abs() < 1e-12);
        assert!((quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25) - 1.0).abs() < 1e-12);
        let again = median_iqr_standardize_values(&s).unwrap();
        for (a, b) in again.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            median_iqr_standardize_values(&[1.0, 1.0, 1.0, 1.0, 7.0]),
            Err(Error::DegenerateField { .. })
        ));
    }

    #[test]
    fn qq_examples() {
        let obs: Vec<f64> = (1..=100).map(f64::from).collect();
        let rows = qq_data(&obs, &[obs.clone()], &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(rows[1].obs, 50.5);
        assert!(rows.iter().all(|r| r.obs == r.sim && r.lo == r.sim && r.hi == r.sim));
        assert!(qq_data(&obs, &[], &[0.5]).is_err());
        assert!(qq_data(&obs, &[obs.clone()], &[1.0]).is_err());
    }

    #[test]
    fn envelope_contains_median_curve() {
        let mut rng = stream(3);
        let obs: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
        let sims: Vec<Vec<f64>> = (0..400).map(|_| (0..300).map(|_| rng.random_range(0.0..1.2)).collect()).collect();
        let probs: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect();
        for r in qq_data(&obs, &sims, &probs).unwrap() {
            assert!(r.lo <= r.sim && r.sim <= r.hi);
        }
        let csv = qq_csv(&qq_data(&obs, &sims, &[0.5]).unwrap());
        assert!(csv.starts_with("prob,obs_q,sim_q_median,lo,hi\n"));
    }

    #[test]
    fn quantile_mapping_examples() {
        let mut rng = stream(5);
        let obs: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..10.0)).collect();
        let same = quantile_map(&obs, &obs).unwrap();
        for (a, b) in same.iter().zip(&obs) {
            assert!((a - b).abs() < 1e-12);
        }
        let shifted: Vec<f64> = obs.iter().map(|v| v + 5.0).collect();
        let mapped = quantile_map(&shifted, &obs).unwrap();
        for (a, b) in mapped.iter().zip(&obs) {
            assert!((a - b).abs() < 1e-9);
        }
        let sim: Vec<f64> = (0..300).map(|_| rng.random_range(0.0f64..1.0).powi(3) * 7.0).collect();
        let m = quantile_map(&sim, &obs).unwrap();
        for i in 0..sim.len() {
            for j in 0..sim.len() {
                if sim[i] < sim[j] {
                    assert!(m[i] <= m[j]);
                }
            }
        }
        let back = quantile_map(&m, &sim).unwrap();
        for (a, b) in back.iter().zip(&sim) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn are_examples() {
        let e = are(&[2.0], &[1.0]).unwrap();
        assert_eq!(e[0].are, 0.5);
        assert!((e[0].log_are - 0.5f64.ln()).abs() < 1e-15);
        let e = are(&[1.0, 3.0], &[1.0, 3.0]).unwrap();
        assert!(e.iter().all(|x| x.are == 0.0 && x.flagged));
        assert_eq!(median_log_are(&e), None);
        let e = are(&[0.0, 4.0], &[1.0, 5.0]).unwrap();
        assert!(e[0].flagged && !e[1].flagged);
        assert_eq!(median_log_are(&e), Some(0.25f64.ln()));
        let a = are(&[2.0, -3.0], &[1.5, -2.0]).unwrap();
        let b = are(&[20.0, -30.0], &[15.0, -20.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.are - y.are).abs() < 1e-15);
        }
        assert!(are(&[1.0], &[]).is_err());
    }

    fn params(n: usize, seed: u64) -> Vec<ModelParams> {
        crate::dataset::sample_params(n, &crate::dataset::ParamRanges::default(), &mut stream(seed))
    }

    #[test]
    fn identity_corrector() {
        let p = params(300, 1);
        let bc = BiasCorrector::fit(&p, &p).unwrap();
        for q in params(50, 2) {
            let c = bc.correct(&q).unwrap();
            assert!((c.xi - q.xi).abs() < 1e-3);
            assert!((c.kappa2.ln() - q.kappa2.ln()).abs() < 1e-3);
            assert!((c.tau2.ln() - q.tau2.ln()).abs() < 1e-3);
        }
    }

    #[test]
    fn halving_corrector() {
        let est = params(400, 3);
        let truth: Vec<ModelParams> = est
            .iter()
            .map(|p| ModelParams { xi: 0.5 * p.xi, kappa2: p.kappa2.sqrt(), tau2: p.tau2.sqrt() })
            .collect();
        let bc = BiasCorrector::fit(&truth, &est).unwrap();
        for q in params(50, 4) {
            if q.xi < 0.1 || q.xi > 0.8 {
                continue;
            }
            let c = bc.correct(&q).unwrap();
            assert!((c.xi / (0.5 * q.xi) - 1.0).abs() < 0.02);
            // ln κ² halves as well
            assert!((c.kappa2.ln() / (0.5 * q.kappa2.ln()) - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn corrector_preconditions() {
        let p = params(20, 1);
        assert!(matches!(BiasCorrector::fit(&p, &p), Err(Error::Domain(_))));
        let p = params(60, 1);
        let flat: Vec<ModelParams> = p.iter().map(|_| p[0]).collect();
        assert!(matches!(BiasCorrector::fit(&p, &flat), Err(Error::DegenerateDesign(_))));
    }
}
