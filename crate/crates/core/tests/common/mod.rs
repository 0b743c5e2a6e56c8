#![allow(dead_code)]

use gevsar::lattice::{FieldStack, LatticeConfig, Stencil};

/// Two-sided one-sample KS statistic against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS p-value with Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// GEV(1, xi, xi) cdf written out from the definition.
pub fn frechet_cdf(t: f64, xi: f64) -> f64 {
    gev_cdf_oracle(t, 1.0, xi, xi)
}

/// General GEV cdf from the definition, Gumbel limit at xi = 0.
pub fn gev_cdf_oracle(t: f64, mu: f64, sigma: f64, xi: f64) -> f64 {
    let s = (t - mu) / sigma;
    if xi == 0.0 {
        return (-(-s).exp()).exp();
    }
    let z = 1.0 + xi * s;
    if z <= 0.0 {
        return if xi > 0.0 { 0.0 } else { 1.0 };
    }
    (-z.powf(-1.0 / xi)).exp()
}

/// Log-density of GEV(1, xi, xi) from the definition.
pub fn frechet_logpdf(t: f64, xi: f64) -> f64 {
    if t <= 0.0 {
        return f64::NEG_INFINITY;
    }
    // z = t, so f = (1/xi) t^(-1/xi - 1) exp(-t^(-1/xi))
    -xi.ln() + (-1.0 / xi - 1.0) * t.ln() - t.powf(-1.0 / xi)
}

/// Gaussian elimination with partial pivoting on a dense row-major matrix.
/// Returns the solution and log|det|.
pub fn dense_solve(a: &[f64], b: &[f64]) -> (Vec<f64>, f64) {
    let m = b.len();
    let mut a = a.to_vec();
    let mut x = b.to_vec();
    let mut logdet = 0.0;
    for c in 0..m {
        let p = (c..m).max_by(|&i, &j| a[i * m + c].abs().total_cmp(&a[j * m + c].abs())).unwrap();
        if p != c {
            for k in 0..m {
                a.swap(c * m + k, p * m + k);
            }
            x.swap(c, p);
        }
        let piv = a[c * m + c];
        logdet += piv.abs().ln();
        for i in c + 1..m {
            let f = a[i * m + c] / piv;
            if f != 0.0 {
                for k in c..m {
                    a[i * m + k] -= f * a[c * m + k];
                }
                x[i] -= f * x[c];
            }
        }
    }
    for c in (0..m).rev() {
        let mut s = x[c];
        for k in c + 1..m {
            s -= a[c * m + k] * x[k];
        }
        x[c] = s / a[c * m + c];
    }
    (x, logdet)
}

/// Dense SAR matrix built from the stencil definition.
pub fn dense_sar(side: usize, kappa2: f64, stencil: Stencil) -> Vec<f64> {
    let m = side * side;
    let mut b = vec![0.0; m * m];
    for i in 0..m {
        match stencil {
            Stencil::Tridiagonal1d => {
                b[i * m + i] = kappa2;
                if i > 0 {
                    b[i * m + i - 1] = -1.0;
                }
                if i + 1 < m {
                    b[i * m + i + 1] = -1.0;
                }
            }
            Stencil::Lattice2d => {
                b[i * m + i] = 4.0 + kappa2;
                let (r, c) = (i / side, i % side);
                if r > 0 {
                    b[i * m + i - side] = -1.0;
                }
                if r + 1 < side {
                    b[i * m + i + side] = -1.0;
                }
                if c > 0 {
                    b[i * m + i - 1] = -1.0;
                }
                if c + 1 < side {
                    b[i * m + i + 1] = -1.0;
                }
            }
        }
    }
    b
}

/// Dense Wendland basis for a square lattice with nodes at the pixels.
pub fn dense_basis(cfg: &LatticeConfig) -> Vec<f64> {
    let d = cfg.grid_dim;
    let n = d * d;
    let mut phi = vec![0.0; n * n];
    for p in 0..n {
        for q in 0..n {
            let dy = (p / d) as f64 - (q / d) as f64;
            let dx = (p % d) as f64 - (q % d) as f64;
            let u = (dx * dx + dy * dy).sqrt() / cfg.support_radius;
            if u < 1.0 {
                phi[p * n + q] = (1.0 - u).powi(6) * (35.0 * u * u + 18.0 * u + 3.0) / 3.0;
            }
        }
    }
    phi
}

/// No-nugget NLL by the change of variables y = Φ B⁻¹ e, all dense.
pub fn dense_nll(stack: &FieldStack, xi: f64, kappa2: f64, cfg: &LatticeConfig) -> f64 {
    let n = stack.d * stack.d;
    let b = dense_sar(stack.d, kappa2, cfg.stencil);
    let phi = dense_basis(cfg);
    let mut total = 0.0;
    for k in 0..stack.r {
        let y = stack.replicate(k);
        let (z, logdet_phi) = dense_solve(&phi, &y);
        let (_, logdet_b) = dense_solve(&b, &vec![0.0; n]);
        let e: Vec<f64> = (0..n).map(|i| (0..n).map(|j| b[i * n + j] * z[j]).sum()).collect();
        if e.iter().any(|v| *v <= 0.0) {
            return f64::INFINITY;
        }
        let ll: f64 = e.iter().map(|&v| frechet_logpdf(v, xi)).sum();
        total += -ll - logdet_b + logdet_phi;
    }
    total
}
