//! No-nugget likelihood on the square lattice and a Nelder–Mead fitter.
//!
//! With nodes on the pixels, `y = Φ B⁻¹ e` is invertible and the density of
//! a replicate follows by change of variables:
//! `-ln p(y) = -Σ ln f(eᵢ) - ln|det B| + ln|det Φ|` with `e = B Φ⁻¹ y`.
//! Because `B(κ²) = κ² I + B(0)`, the innovations are affine in κ²:
//! `e = κ² z + B(0) z` for the fixed `z = Φ⁻¹ y`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{gev_logpdf, GevParams};
use crate::error::{Error, Result};
use crate::lattice::{build_basis, FieldStack, LatticeConfig, SarMatrix, Stencil};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub lattice: LatticeConfig,
    /// Use `Φ = I` instead of the Wendland basis (test mode).
    pub delta_basis: bool,
    pub xi_range: (f64, f64),
    pub kappa2_range: (f64, f64),
    pub starts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl MleConfig {
    /// Square lattice for a `d x d` grid with the default radius and stencil.
    pub fn square(d: usize) -> Result<Self> {
        Ok(Self {
            lattice: LatticeConfig::square(d, LatticeConfig::DEFAULT_SUPPORT_RADIUS, Stencil::Tridiagonal1d)?,
            delta_basis: false,
            xi_range: (0.01, 0.9),
            kappa2_range: (0.001, 2.0),
            starts: 3,
            max_iter: 400,
            tol: 1e-6,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.lattice.buffer != 0 {
            return Err(Error::Config("likelihood needs a square lattice (buffer 0)".into()));
        }
        let (a, b) = self.xi_range;
        let (c, d) = self.kappa2_range;
        if !(0.0 < a && a < b) || !(0.0 < c && c < d && d.is_finite()) {
            return Err(Error::Config(format!(
                "invalid search box xi {:?}, kappa2 {:?}",
                self.xi_range, self.kappa2_range
            )));
        }
        if self.starts == 0 || self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::Config("starts, max_iter and tol must be positive".into()));
        }
        Ok(())
    }
}

/// Factorized square basis, shared read-only across fits on one grid.
#[derive(Debug, Clone)]
pub struct BasisFactor {
    n: usize,
    inner: Option<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>>,
    log_abs_det: f64,
}

impl BasisFactor {
    pub fn new(cfg: &MleConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.lattice.location_count();
        if cfg.delta_basis {
            return Ok(Self { n, inner: None, log_abs_det: 0.0 });
        }
        let phi = build_basis(&cfg.lattice);
        if phi.rows != phi.cols {
            return Err(Error::Config(format!("basis is {} x {}, not square", phi.rows, phi.cols)));
        }
        let dense = DMatrix::from_row_slice(n, n, &phi.to_dense());
        let chol = dense
            .cholesky()
            .ok_or_else(|| Error::SingularBasis(format!("{n} x {n} square basis is not positive definite")))?;
        let log_abs_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { n, inner: Some(chol), log_abs_det })
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_abs_det
    }

    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        match &self.inner {
            None => y.to_vec(),
            Some(c) => c.solve(&nalgebra::DVector::from_column_slice(y)).as_slice().to_vec(),
        }
    }
}

/// Per-stack likelihood with everything that does not depend on the
/// parameters precomputed.
#[derive(Debug, Clone)]
pub struct NoNuggetLikelihood {
    stencil: Stencil,
    side: usize,
    order: usize,
    log_det_phi: f64,
    /// `z = Φ⁻¹ y` and `B(0) z`, one pair per replicate.
    slopes: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    /// Open interval of κ² keeping every innovation positive.
    feasible: (f64, f64),
}

fn sar_at(stencil: Stencil, order: usize, side: usize, kappa2: f64) -> SarMatrix {
    match stencil {
        Stencil::Tridiagonal1d => SarMatrix::tridiagonal(order, kappa2),
        Stencil::Lattice2d => SarMatrix::lattice(side, kappa2),
    }
}

impl NoNuggetLikelihood {
    pub fn new(stack: &FieldStack, cfg: &MleConfig, basis: &BasisFactor) -> Result<Self> {
        cfg.validate()?;
        if stack.d != cfg.lattice.grid_dim || basis.n != stack.d * stack.d {
            return Err(Error::InputShape {
                expected: format!("{0} x {0} grid", cfg.lattice.grid_dim),
                actual: format!("{0} x {0} grid", stack.d),
            });
        }
        let order = basis.n;
        let side = cfg.lattice.node_side();
        let b0 = sar_at(cfg.lattice.stencil, order, side, 0.0);
        let mut slopes = Vec::with_capacity(stack.r);
        let mut offsets = Vec::with_capacity(stack.r);
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        for k in 0..stack.r {
            let z = basis.solve(&stack.replicate(k));
            let off = b0.matvec(&z);
            for (&a, &b) in z.iter().zip(&off) {
                // κ² a + b > 0
                if a > 0.0 {
                    lo = lo.max(-b / a);
                } else if a < 0.0 {
                    hi = hi.min(-b / a);
                } else if b <= 0.0 {
                    hi = lo;
                }
            }
            slopes.push(z);
            offsets.push(off);
        }
        Ok(Self {
            stencil: cfg.lattice.stencil,
            side,
            order,
            log_det_phi: basis.log_abs_det,
            slopes,
            offsets,
            feasible: (lo, hi),
        })
    }

    /// κ² values outside this open interval put some innovation at or
    /// below zero; it is empty when `lo >= hi`.
    pub fn feasible_kappa2(&self) -> (f64, f64) {
        self.feasible
    }

    /// Negative log-likelihood; `+∞` outside the GEV support.
    pub fn nll(&self, xi: f64, kappa2: f64) -> Result<f64> {
        self.nll_terms(xi, kappa2, true)
    }

    /// Same as [`Self::nll`] without the constant `ln|det Φ|` terms.
    pub fn nll_without_basis_term(&self, xi: f64, kappa2: f64) -> Result<f64> {
        self.nll_terms(xi, kappa2, false)
    }

    fn nll_terms(&self, xi: f64, kappa2: f64, with_basis: bool) -> Result<f64> {
        if !(kappa2 > 0.0 && kappa2.is_finite()) {
            return Err(Error::Domain(format!("kappa2 must be positive, got {kappa2}")));
        }
        let gev = GevParams::innovation(xi)?;
        let log_det_b = sar_at(self.stencil, self.order, self.side, kappa2).factorize()?.log_abs_det();
        let constant = -log_det_b + if with_basis { self.log_det_phi } else { 0.0 };
        let mut parts = Vec::with_capacity(self.slopes.len());
        for (z, off) in self.slopes.iter().zip(&self.offsets) {
            let mut s = 0.0;
            for (&a, &b) in z.iter().zip(off) {
                let e = kappa2 * a + b;
                if e <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                s -= gev_logpdf(e, &gev);
            }
            parts.push(s + constant);
        }
        // sorted summation makes the total independent of replicate order
        parts.sort_by(f64::total_cmp);
        Ok(parts.iter().sum())
    }
}

/// One-shot likelihood evaluation (factorizes Φ on every call).
pub fn nll_no_nugget(stack: &FieldStack, xi: f64, kappa2: f64, cfg: &MleConfig) -> Result<f64> {
    let basis = BasisFactor::new(cfg)?;
    NoNuggetLikelihood::new(stack, cfg, &basis)?.nll(xi, kappa2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Initial simplex edge per coordinate.
    pub step: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        Self { max_iter: 1000, tol: 1e-8, step: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub status: NmStatus,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Nelder–Mead with coefficients (reflect 1, expand 2, contract 0.5,
/// shrink 0.5). Converged means every vertex is within `tol` of the best
/// one (max norm) and all vertex values are finite.
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], steps: &[f64], opts: &NmOptions) -> NmResult {
    let n = x0.len();
    assert!(n >= 1 && steps.len() == n);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += steps[i];
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    let affine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };

    let mut iterations = 0;
    let mut status = NmStatus::MaxIterations;
    order(&mut simplex);
    while iterations < opts.max_iter {
        let best = &simplex[0];
        let size = simplex[1..]
            .iter()
            .flat_map(|(v, _)| v.iter().zip(&best.0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if size < opts.tol && simplex.iter().all(|s| s.1.is_finite()) {
            status = NmStatus::Converged;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let xr = affine(&centroid, &worst.0, -REFLECT);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = affine(&centroid, &worst.0, -EXPAND);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = affine(&centroid, &xr, CONTRACT);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = affine(&centroid, &worst.0, CONTRACT);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < fr.min(worst.1) {
                simplex[n] = (xc, fc);
            } else {
                let anchor = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.0 = affine(&anchor, &s.0, SHRINK);
                    s.1 = f(&s.0);
                }
            }
        }
        order(&mut simplex);
    }
    let (x, value) = simplex.swap_remove(0);
    NmResult { x, value, iterations, status }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub xi: f64,
    pub kappa2: f64,
    pub nll: f64,
    pub iterations: usize,
    pub status: NmStatus,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Fits `(ξ, κ²)` by multi-start Nelder–Mead over `(logit ξ, ln κ²)`.
///
/// Start points are the centre of the search box and `starts - 1` uniform
/// draws in the transformed box. Each κ² start is moved inside the open
/// interval of κ² values with positive innovations, since the objective is
/// `+∞` everywhere else.
pub fn fit_mle(stack: &FieldStack, cfg: &MleConfig, basis: &BasisFactor) -> Result<MleFit> {
    let lik = NoNuggetLikelihood::new(stack, cfg, basis)?;
    let (xa, xb) = cfg.xi_range;
    let to_xi = |u: f64| xa + (xb - xa) * expit(u);
    let objective = |u: &[f64]| -> f64 {
        let (xi, kappa2) = (to_xi(u[0]), u[1].exp());
        if !(xi > 0.0) || !(kappa2 > 0.0 && kappa2.is_finite()) {
            return f64::INFINITY;
        }
        lik.nll(xi, kappa2).unwrap_or(f64::INFINITY)
    };

    let (ka, kb) = (cfg.kappa2_range.0.ln(), cfg.kappa2_range.1.ln());
    let (flo, fhi) = lik.feasible_kappa2();
    let (llo, lhi) = (if flo > 0.0 { flo.ln() } else { f64::NEG_INFINITY }, fhi.ln());
    let feasible_width = lhi - llo;
    let place = |lk: f64| -> f64 {
        if !(feasible_width > 0.0) {
            return lk;
        }
        if feasible_width.is_finite() {
            lk.clamp(llo + 0.1 * feasible_width, lhi - 0.1 * feasible_width)
        } else if llo.is_finite() {
            lk.max(llo + 0.1)
        } else {
            lk.min(lhi - 0.1)
        }
    };
    let k_step = if feasible_width.is_finite() && feasible_width > 0.0 {
        (0.25 * feasible_width).min(0.5)
    } else {
        0.5
    };

    let mut rng = substream(cfg.seed, &[7]);
    let mut starts = vec![[0.0, place(0.5 * (ka + kb))]];
    for _ in 1..cfg.starts {
        let p: f64 = rng.random_range(0.0..1.0);
        let u = logit(p.clamp(0.025, 0.975));
        starts.push([u, place(rng.random_range(ka..kb))]);
    }
    let opts = NmOptions { max_iter: cfg.max_iter, tol: cfg.tol, step: 0.5 };
    let mut best: Option<NmResult> = None;
    let mut iterations = 0;
    for s in &starts {
        let res = nelder_mead(objective, s, &[opts.step, k_step], &opts);
        iterations += res.iterations;
        if res.value.is_finite() && best.as_ref().is_none_or(|b| res.value < b.value) {
            best = Some(res);
        }
    }
    let best = best.ok_or_else(|| {
        Error::FitFailure(format!(
            "all {} starts have infinite NLL (feasible kappa2 interval {:?})",
            starts.len(),
            lik.feasible_kappa2()
        ))
    })?;
    Ok(MleFit {
        xi: to_xi(best.x[0]),
        kappa2: best.x[1].exp(),
        nll: best.value,
        iterations,
        status: best.status,
    })
}
