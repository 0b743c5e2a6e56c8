//! Cubic smoothing splines in a clamped B-spline basis.
//!
//! Minimizes `Σ (yᵢ - f(xᵢ))² + λ ∫ f''²` over cubic splines with equally
//! spaced knots. The roughness penalty is integrated exactly (Simpson's rule
//! on piecewise-linear second derivatives) and λ is picked by generalized
//! cross-validation subject to a floor on the effective degrees of freedom.
//! Outside the data range the fit continues linearly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEGREE: usize = 3;
pub const MIN_DF: f64 = 4.0;

/// Values of every degree-`deg` basis function at `x`.
fn basis_values(knots: &[f64], deg: usize, x: f64) -> Vec<f64> {
    let m = knots.len();
    let last = *knots.last().unwrap();
    let mut b: Vec<f64> = (0..m - 1)
        .map(|i| {
            let (a, c) = (knots[i], knots[i + 1]);
            if a < c && ((a <= x && x < c) || (x == last && c == last)) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for k in 1..=deg {
        let next: Vec<f64> = (0..m - k - 1)
            .map(|i| {
                let mut v = 0.0;
                let d1 = knots[i + k] - knots[i];
                if d1 > 0.0 {
                    v += (x - knots[i]) / d1 * b[i];
                }
                let d2 = knots[i + k + 1] - knots[i + 1];
                if d2 > 0.0 {
                    v += (knots[i + k + 1] - x) / d2 * b[i + 1];
                }
                v
            })
            .collect();
        b = next;
    }
    b
}

/// `order`-th derivatives of every degree-`deg` basis function at `x`.
fn basis_derivs(knots: &[f64], deg: usize, x: f64, order: usize) -> Vec<f64> {
    if order == 0 {
        return basis_values(knots, deg, x);
    }
    let lower = basis_derivs(knots, deg - 1, x, order - 1);
    let n = knots.len() - deg - 1;
    (0..n)
        .map(|i| {
            let mut v = 0.0;
            let d1 = knots[i + deg] - knots[i];
            if d1 > 0.0 {
                v += deg as f64 / d1 * lower[i];
            }
            let d2 = knots[i + deg + 1] - knots[i + 1];
            if d2 > 0.0 {
                v -= deg as f64 / d2 * lower[i + 1];
            }
            v
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpline {
    pub knots: Vec<f64>,
    pub coef: Vec<f64>,
    pub lambda: f64,
    pub df: f64,
    pub lo: f64,
    pub hi: f64,
}

impl SmoothingSpline {
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() || x.len() < 5 {
            return Err(Error::Domain(format!(
                "smoothing spline needs matched samples of at least 5, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Domain("smoothing spline inputs must be finite".into()));
        }
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi - lo > 1e-12 * lo.abs().max(hi.abs()).max(1.0)) {
            return Err(Error::DegenerateDesign(format!("estimates span [{lo}, {hi}], no spread to fit")));
        }
        let mut distinct = x.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let intervals = (distinct.len() / 10).clamp(4, 20);
        let mut knots = vec![lo; DEGREE];
        for k in 0..=intervals {
            knots.push(lo + (hi - lo) * k as f64 / intervals as f64);
        }
        *knots.last_mut().unwrap() = hi;
        knots.extend(std::iter::repeat_n(hi, DEGREE));
        let p = knots.len() - DEGREE - 1;
        let n = x.len();

        let mut btb = DMatrix::<f64>::zeros(p, p);
        let mut bty = DVector::<f64>::zeros(p);
        for (&xi, &yi) in x.iter().zip(y) {
            let b = basis_values(&knots, DEGREE, xi);
            for r in 0..p {
                if b[r] == 0.0 {
                    continue;
                }
                bty[r] += b[r] * yi;
                for c in 0..p {
                    btb[(r, c)] += b[r] * b[c];
                }
            }
        }
        let mut omega = DMatrix::<f64>::zeros(p, p);
        for w in knots.windows(2) {
            let (a, c) = (w[0], w[1]);
            if c <= a {
                continue;
            }
            let mid = 0.5 * (a + c);
            let pts = [
                (basis_derivs(&knots, DEGREE, a, 2), 1.0),
                (basis_derivs(&knots, DEGREE, mid, 2), 4.0),
                // left limit at the interval's right end
                (basis_derivs(&knots, DEGREE, c - 1e-12 * (c - a), 2), 1.0),
            ];
            let h = (c - a) / 6.0;
            for (d2, wt) in &pts {
                for r in 0..p {
                    for s in 0..p {
                        omega[(r, s)] += h * wt * d2[r] * d2[s];
                    }
                }
            }
        }

        let yty: f64 = y.iter().map(|v| v * v).sum();
        let scale = btb.trace() / omega.trace().max(1e-300);
        let ridge = 1e-10 * btb.trace() / p as f64;
        let solve = |lambda: f64| -> Option<(Vec<f64>, f64, f64)> {
            let mut a = &btb + &omega * lambda;
            for d in 0..p {
                a[(d, d)] += ridge;
            }
            let chol = a.cholesky()?;
            let c = chol.solve(&bty);
            let df = chol.solve(&btb).trace();
            // RSS = yᵀy - 2 cᵀBᵀy + cᵀBᵀBc
            let rss = (yty - 2.0 * c.dot(&bty) + c.dot(&(&btb * &c))).max(0.0);
            Some((c.as_slice().to_vec(), df, rss))
        };
        let mut best: Option<(f64, f64, Vec<f64>, f64)> = None;
        let mut fallback: Option<(f64, f64, Vec<f64>, f64)> = None;
        for step in 0..=64 {
            let lambda = scale * 10f64.powf(-10.0 + 0.25 * step as f64);
            let Some((c, df, rss)) = solve(lambda) else { continue };
            let denom = (n as f64 - df).max(1e-9);
            let gcv = n as f64 * rss / (denom * denom);
            if df >= MIN_DF.min(p as f64) - 1e-9 {
                if best.as_ref().is_none_or(|b| gcv < b.0) {
                    best = Some((gcv, lambda, c, df));
                }
            } else if fallback.is_none() {
                fallback = Some((gcv, lambda, c, df));
            }
        }
        let (_, lambda, coef, df) = best
            .or(fallback)
            .ok_or_else(|| Error::FitFailure("smoothing spline system is singular for every lambda".into()))?;
        Ok(Self { knots, coef, lambda, df, lo, hi })
    }

    fn eval_inside(&self, x: f64, order: usize) -> f64 {
        let b = basis_derivs(&self.knots, DEGREE, x.clamp(self.lo, self.hi), order);
        b.iter().zip(&self.coef).map(|(a, c)| a * c).sum()
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x < self.lo {
            self.eval_inside(self.lo, 0) + (x - self.lo) * self.eval_inside(self.lo, 1)
        } else if x > self.hi {
            self.eval_inside(self.hi, 0) + (x - self.hi) * self.eval_inside(self.hi, 1)
        } else {
            self.eval_inside(x, 0)
        }
    }
}
