//! Linear quantile regression and the interval models built on it.
//!
//! `fit_qr` runs a few rounds of IRLS on a smoothed pinball loss to get
//! close to the optimum, then walks the vertices of the exact problem:
//! at a basic solution (`p` observations fitted exactly) it tests the `2p`
//! edge directions and line-searches the steepest descending one by
//! stepping over residual sign changes. The loss strictly decreases at each
//! pivot, and the search stops at a vertex where no edge descends.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::ParamRanges;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::lattice::{ModelParams, Simulator};
use crate::network::{estimate_batch, NetworkWeights};
use crate::rng::substream;

pub const MIN_OBSERVATIONS: usize = 20;
pub const LOWER_LEVEL: f64 = 0.025;
pub const UPPER_LEVEL: f64 = 0.975;

pub fn pinball(u: f64, level: f64) -> f64 {
    if u < 0.0 {
        u * (level - 1.0)
    } else {
        u * level
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrFit {
    /// Intercept first, then one slope per covariate.
    pub coef: Vec<f64>,
    pub loss: f64,
    pub pivots: usize,
}

/// Row-major design with a leading intercept column.
struct Design<'a> {
    x: &'a [f64],
    k: usize,
    n: usize,
}

impl Design<'_> {
    fn p(&self) -> usize {
        self.k + 1
    }

    fn row(&self, i: usize, out: &mut [f64]) {
        out[0] = 1.0;
        out[1..].copy_from_slice(&self.x[i * self.k..(i + 1) * self.k]);
    }

    fn dot(&self, i: usize, b: &[f64]) -> f64 {
        b[0] + self.x[i * self.k..(i + 1) * self.k].iter().zip(&b[1..]).map(|(a, c)| a * c).sum::<f64>()
    }
}

fn total_loss(d: &Design, y: &[f64], b: &[f64], level: f64) -> f64 {
    (0..d.n).map(|i| pinball(y[i] - d.dot(i, b), level)).sum()
}

fn irls(d: &Design, y: &[f64], level: f64) -> Result<Vec<f64>> {
    let p = d.p();
    let mut row = vec![0.0; p];
    let weighted_ls = |w: &dyn Fn(usize) -> f64, row: &mut [f64]| -> Option<Vec<f64>> {
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for i in 0..d.n {
            d.row(i, row);
            let wi = w(i);
            for r in 0..p {
                rhs[r] += wi * row[r] * y[i];
                for c in 0..=r {
                    a[(r, c)] += wi * row[r] * row[c];
                }
            }
        }
        for r in 0..p {
            for c in 0..r {
                a[(c, r)] = a[(r, c)];
            }
        }
        a.cholesky().map(|ch| ch.solve(&rhs).as_slice().to_vec())
    };
    let mut b = weighted_ls(&|_| 1.0, &mut row)
        .ok_or_else(|| Error::DegenerateDesign(format!("{} x {p} design is rank deficient", d.n)))?;
    let spread = {
        let mean = y.iter().sum::<f64>() / d.n as f64;
        (y.iter().map(|v| (v - mean).abs()).sum::<f64>() / d.n as f64).max(1e-300)
    };
    let mut eps = spread;
    for _ in 0..40 {
        let r: Vec<f64> = (0..d.n).map(|i| y[i] - d.dot(i, &b)).collect();
        let w = |i: usize| {
            let side = if r[i] < 0.0 { 1.0 - level } else { level };
            side / r[i].abs().max(eps)
        };
        match weighted_ls(&w, &mut row) {
            Some(nb) if nb.iter().all(|v| v.is_finite()) => b = nb,
            _ => break,
        }
        eps = (eps * 0.5).max(spread * 1e-9);
    }
    Ok(b)
}

fn solve_basis(d: &Design, basis: &[usize], y: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let p = d.p();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut row = vec![0.0; p];
    for (r, &i) in basis.iter().enumerate() {
        d.row(i, &mut row);
        for c in 0..p {
            a[(r, c)] = row[c];
        }
    }
    let inv = a.clone().lu().try_inverse()?;
    let yb = DVector::from_iterator(p, basis.iter().map(|&i| y[i]));
    let b = &inv * yb;
    if b.iter().all(|v| v.is_finite()) {
        Some((b.as_slice().to_vec(), inv))
    } else {
        None
    }
}

/// Greedy choice of `p` linearly independent rows, smallest |residual| first.
fn initial_basis(d: &Design, resid: &[f64]) -> Result<Vec<usize>> {
    let p = d.p();
    let mut order: Vec<usize> = (0..d.n).collect();
    order.sort_by(|&a, &b| resid[a].abs().total_cmp(&resid[b].abs()).then(a.cmp(&b)));
    let mut basis = Vec::with_capacity(p);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut row = vec![0.0; p];
    for &i in &order {
        d.row(i, &mut row);
        let norm0 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = row.clone();
        for q in &ortho {
            let proj: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 * norm0.max(1e-300) {
            v.iter_mut().for_each(|a| *a /= norm);
            ortho.push(v);
            basis.push(i);
            if basis.len() == p {
                return Ok(basis);
            }
        }
    }
    Err(Error::DegenerateDesign(format!(
        "design with {} rows has rank {} < {p}",
        d.n,
        basis.len()
    )))
}

/// Pinball-loss regression of `y` on an intercept plus `k` covariates stored
/// row-major in `x` (`n * k` values; `k = 0` fits the intercept only).
pub fn fit_qr(x: &[f64], k: usize, y: &[f64], level: f64) -> Result<QrFit> {
    let n = y.len();
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0,1), got {level}")));
    }
    if n < MIN_OBSERVATIONS {
        return Err(Error::Domain(format!("quantile regression needs n >= {MIN_OBSERVATIONS}, got {n}")));
    }
    if x.len() != n * k {
        return Err(Error::InputShape {
            expected: format!("{n} x {k} covariates"),
            actual: format!("{} values", x.len()),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain("quantile regression inputs must be finite".into()));
    }
    let d = Design { x, k, n };
    let p = d.p();
    let warm = irls(&d, y, level)?;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - d.dot(i, &warm)).collect();
    let mut basis = initial_basis(&d, &resid)?;
    let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let zero_tol = 1e-12 * scale;

    let mut in_basis = vec![false; n];
    let mut pivots = 0;
    let max_pivots = 50 * n + 1000;
    let mut q = vec![0.0; n * p];
    let mut row = vec![0.0; p];
    let mut kinks: Vec<(f64, f64, usize)> = Vec::with_capacity(n);
    let (beta, _) = loop {
        let (beta, inv) = solve_basis(&d, &basis, y)
            .ok_or_else(|| Error::DegenerateDesign("basis became singular".into()))?;
        in_basis.iter_mut().for_each(|v| *v = false);
        basis.iter().for_each(|&i| in_basis[i] = true);
        // q[i][j] = x_i · (column j of the basis inverse)
        for i in 0..n {
            d.row(i, &mut row);
            for j in 0..p {
                q[i * p + j] = (0..p).map(|c| row[c] * inv[(c, j)]).sum();
            }
        }
        let r: Vec<f64> = (0..n)
            .map(|i| if in_basis[i] { 0.0 } else { y[i] - d.dot(i, &beta) })
            .collect();

        // steepest descending edge: direction -s * M e_j, basis residual j -> s t
        let mut best: Option<(f64, usize, f64)> = None;
        for j in 0..p {
            for s in [1.0, -1.0] {
                let mut g = if s > 0.0 { level } else { 1.0 - level };
                for i in 0..n {
                    if in_basis[i] {
                        continue;
                    }
                    let a = -s * q[i * p + j];
                    g += if r[i] > zero_tol {
                        -level * a
                    } else if r[i] < -zero_tol {
                        (1.0 - level) * a
                    } else if a > 0.0 {
                        (1.0 - level) * a
                    } else {
                        -level * a
                    };
                }
                let norm = (0..p).map(|c| inv[(c, j)].powi(2)).sum::<f64>().sqrt();
                let rate = g / norm;
                if g < -1e-12 * n as f64 && best.is_none_or(|b| rate < b.0) {
                    best = Some((rate, j, s));
                }
            }
        }
        let Some((_, j, s)) = best else { break (beta, inv) };
        if pivots >= max_pivots {
            break (beta, inv);
        }

        let mut g = if s > 0.0 { level } else { 1.0 - level };
        kinks.clear();
        for i in 0..n {
            if in_basis[i] {
                continue;
            }
            let a = -s * q[i * p + j];
            if r[i] > zero_tol {
                g += -level * a;
            } else if r[i] < -zero_tol {
                g += (1.0 - level) * a;
            } else {
                g += if a > 0.0 { (1.0 - level) * a } else { -level * a };
                continue;
            }
            if a != 0.0 {
                let t = r[i] / a;
                if t > 0.0 {
                    kinks.push((t, a.abs(), i));
                }
            }
        }
        kinks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let mut entering = None;
        for &(_, w, i) in &kinks {
            g += w;
            if g >= 0.0 {
                entering = Some(i);
                break;
            }
        }
        let Some(i) = entering else {
            return Err(Error::DegenerateDesign("pinball loss is unbounded along an edge".into()));
        };
        basis[j] = i;
        pivots += 1;
    };
    let loss = total_loss(&d, y, &beta, level);
    Ok(QrFit { coef: beta, loss, pivots })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelFit {
    pub level: f64,
    pub coef: [f64; 4],
    pub pinball_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseModel {
    /// `xi`, `ln_kappa2` or `ln_tau2`.
    pub response: String,
    pub lower: LevelFit,
    pub upper: LevelFit,
}

/// Six quantile planes: responses (ξ, ln κ², ln τ²) on covariates
/// (ξ̂, ln κ̂², ln τ̂²), each at the 2.5% and 97.5% levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileModel {
    pub covariates: [String; 3],
    pub responses: [ResponseModel; 3],
    pub n: usize,
}

pub const RESPONSE_NAMES: [&str; 3] = ["xi", "ln_kappa2", "ln_tau2"];

fn transformed(p: &ModelParams) -> Result<[f64; 3]> {
    if !(p.kappa2 > 0.0 && p.tau2 > 0.0) {
        return Err(Error::Domain(format!(
            "interval model needs kappa2, tau2 > 0, got {} and {}",
            p.kappa2, p.tau2
        )));
    }
    Ok([p.xi, p.kappa2.ln(), p.tau2.ln()])
}

pub fn fit_interval_models(estimates: &[ModelParams], truths: &[ModelParams]) -> Result<QuantileModel> {
    if estimates.len() != truths.len() {
        return Err(Error::InputShape {
            expected: format!("{} truths", estimates.len()),
            actual: format!("{}", truths.len()),
        });
    }
    let n = estimates.len();
    let mut x = Vec::with_capacity(3 * n);
    for e in estimates {
        x.extend(transformed(e)?);
    }
    let t: Vec<[f64; 3]> = truths.iter().map(transformed).collect::<Result<_>>()?;
    let mut responses = Vec::with_capacity(3);
    for (c, name) in RESPONSE_NAMES.iter().enumerate() {
        let y: Vec<f64> = t.iter().map(|v| v[c]).collect();
        let fit = |level: f64| -> Result<LevelFit> {
            let f = fit_qr(&x, 3, &y, level)?;
            Ok(LevelFit { level, coef: [f.coef[0], f.coef[1], f.coef[2], f.coef[3]], pinball_loss: f.loss })
        };
        responses.push(ResponseModel { response: name.to_string(), lower: fit(LOWER_LEVEL)?, upper: fit(UPPER_LEVEL)? });
    }
    Ok(QuantileModel {
        covariates: ["xi_hat".into(), "ln_kappa2_hat".into(), "ln_tau2_hat".into()],
        responses: responses.try_into().expect("three responses"),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Intervals for (ξ, κ², τ²) in natural units; crossing bounds are swapped.
pub fn predict_interval(model: &QuantileModel, est: &ModelParams) -> Result<[Interval; 3]> {
    let z = transformed(est)?;
    let eval = |c: &[f64; 4]| c[0] + c[1] * z[0] + c[2] * z[1] + c[3] * z[2];
    let mut out = [Interval { lo: 0.0, hi: 0.0 }; 3];
    for (c, m) in model.responses.iter().enumerate() {
        let (a, b) = (eval(&m.lower.coef), eval(&m.upper.coef));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        out[c] = if c == 0 { Interval { lo, hi } } else { Interval { lo: lo.exp(), hi: hi.exp() } };
    }
    Ok(out)
}

pub fn save_model(model: &QuantileModel, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(model)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn load_model(path: &Path) -> Result<QuantileModel> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("quantile model: {e}")))
}

/// `k^3` grid at the interior fractions `(i+1)/(k+1)` of each training
/// range, on that parameter's sampling scale.
pub fn interior_grid(ranges: &ParamRanges, k: usize) -> Vec<ModelParams> {
    let frac = |i: usize| (i + 1) as f64 / (k + 1) as f64;
    let mut out = Vec::with_capacity(k * k * k);
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                out.push(ModelParams {
                    xi: ranges.xi.at_fraction(frac(a)),
                    kappa2: ranges.kappa2.at_fraction(frac(b)),
                    tau2: ranges.tau2.at_fraction(frac(c)),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub truth: ModelParams,
    pub reps: usize,
    /// Fraction of replicates whose interval holds the truth, per parameter;
    /// `None` with zero replicates or when the cell failed.
    pub coverage: Option<[f64; 3]>,
    pub error: Option<String>,
}

pub fn coverage_eval(
    grid: &[ModelParams],
    reps: usize,
    weights: &NetworkWeights<f32>,
    norm: &crate::dataset::NormStats,
    model: &QuantileModel,
    sim: &Simulator,
    seed: u64,
) -> Vec<CoverageRow> {
    grid.iter()
        .enumerate()
        .map(|(cell, truth)| {
            let mut row = CoverageRow { truth: *truth, reps, coverage: None, error: None };
            if reps == 0 {
                return row;
            }
            match coverage_cell(truth, reps, weights, norm, model, sim, seed, cell as u64) {
                Ok(c) => row.coverage = Some(c),
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn coverage_cell(
    truth: &ModelParams,
    reps: usize,
    weights: &NetworkWeights<f32>,
    norm: &crate::dataset::NormStats,
    model: &QuantileModel,
    sim: &Simulator,
    seed: u64,
    cell: u64,
) -> Result<[f64; 3]> {
    let r = weights.spec.channels;
    let stacks = (0..reps)
        .map(|k| sim.simulate(truth, r, &mut substream(seed, &[cell, k as u64])))
        .collect::<Result<Vec<_>>>()?;
    let ests = estimate_batch(weights, &stacks, norm)?;
    let t = truth.as_array();
    let mut hits = [0usize; 3];
    for e in &ests {
        let iv = predict_interval(model, e)?;
        for c in 0..3 {
            if iv[c].contains(t[c]) {
                hits[c] += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / reps as f64))
}

pub fn coverage_csv(rows: &[CoverageRow]) -> String {
    let mut out = String::from("xi,kappa2,tau2,coverage_xi,coverage_kappa2,coverage_tau2,reps\n");
    for r in rows {
        let cov = match r.coverage {
            Some(c) => format!("{},{},{}", c[0], c[1], c[2]),
            None => ",,".to_string(),
        };
        out.push_str(&format!("{},{},{},{},{}\n", r.truth.xi, r.truth.kappa2, r.truth.tau2, cov, r.reps));
    }
    out
}
