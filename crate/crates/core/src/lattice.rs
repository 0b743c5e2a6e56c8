//! GEV-SAR field synthesis.
//!
//! A field on a `d x d` pixel grid is `y = g * eps` with `g = Phi c`,
//! `B c = e`, `e ~ GEV(1, xi, xi)` iid and `eps` the lognormal nugget.
//! `Phi` holds compactly supported Wendland functions centred on a node
//! lattice that extends `buffer` nodes past every grid edge, and `B` is the
//! sparse SAR matrix parameterised by `kappa2`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{gev_fill, nugget_fill, GevParams, NuggetSpec};
use crate::error::{Error, Result};
use crate::stats;

/// Relative pivot size below which a SAR factorization is declared singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stencil {
    /// `kappa2` on the diagonal, `-1` on the first off-diagonals, nodes in
    /// row-major order.
    #[serde(rename = "tridiagonal-1d")]
    Tridiagonal1d,
    /// `4 + kappa2` on the diagonal, `-1` for each 4-neighbour node pair.
    #[serde(rename = "lattice-2d")]
    Lattice2d,
}

impl std::str::FromStr for Stencil {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tridiagonal-1d" => Ok(Stencil::Tridiagonal1d),
            "lattice-2d" => Ok(Stencil::Lattice2d),
            other => Err(Error::Config(format!("unknown stencil '{other}'"))),
        }
    }
}

impl std::fmt::Display for Stencil {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stencil::Tridiagonal1d => "tridiagonal-1d",
            Stencil::Lattice2d => "lattice-2d",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub grid_dim: usize,
    pub buffer: usize,
    pub support_radius: f64,
    pub stencil: Stencil,
}

impl LatticeConfig {
    pub const DEFAULT_BUFFER: usize = 4;
    pub const DEFAULT_SUPPORT_RADIUS: f64 = 2.5;

    pub fn new(grid_dim: usize, buffer: usize, support_radius: f64, stencil: Stencil) -> Result<Self> {
        if grid_dim < 4 {
            return Err(Error::Config(format!("grid dimension must be >= 4, got {grid_dim}")));
        }
        Self::checked(grid_dim, buffer, support_radius, stencil)
    }

    /// Square-lattice layout used by the likelihood: no buffer, one node per
    /// pixel. Small grids are allowed here so the likelihood can be checked
    /// against dense oracles.
    pub fn square(grid_dim: usize, support_radius: f64, stencil: Stencil) -> Result<Self> {
        if grid_dim < 1 {
            return Err(Error::Config("grid dimension must be >= 1".into()));
        }
        Self::checked(grid_dim, 0, support_radius, stencil)
    }

    fn checked(grid_dim: usize, buffer: usize, support_radius: f64, stencil: Stencil) -> Result<Self> {
        if !(support_radius > 0.0 && support_radius.is_finite()) {
            return Err(Error::Config(format!(
                "support radius must be positive, got {support_radius}"
            )));
        }
        Ok(Self {
            grid_dim,
            buffer,
            support_radius,
            stencil,
        })
    }

    /// 16 x 16 grid, 4 buffer nodes per side, radius 2.5, tridiagonal stencil.
    pub fn standard(grid_dim: usize) -> Result<Self> {
        Self::new(
            grid_dim,
            Self::DEFAULT_BUFFER,
            Self::DEFAULT_SUPPORT_RADIUS,
            Stencil::Tridiagonal1d,
        )
    }

    pub fn node_side(&self) -> usize {
        self.grid_dim + 2 * self.buffer
    }

    pub fn node_count(&self) -> usize {
        self.node_side() * self.node_side()
    }

    pub fn location_count(&self) -> usize {
        self.grid_dim * self.grid_dim
    }
}

/// The inference target `(xi, kappa2, tau2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub xi: f64,
    pub kappa2: f64,
    pub tau2: f64,
}

impl ModelParams {
    pub fn new(xi: f64, kappa2: f64, tau2: f64) -> Result<Self> {
        if !(xi > 0.0 && xi < 1.0) {
            return Err(Error::Domain(format!("xi must lie in (0,1), got {xi}")));
        }
        if !(kappa2 > 0.0 && kappa2.is_finite()) {
            return Err(Error::Domain(format!("kappa2 must be positive, got {kappa2}")));
        }
        if !(tau2 >= 0.0 && tau2.is_finite()) {
            return Err(Error::Domain(format!("tau2 must be >= 0, got {tau2}")));
        }
        Ok(Self { xi, kappa2, tau2 })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.xi, self.kappa2, self.tau2]
    }
}

/// C2 Wendland function of the distance ratio `u = dist / radius`.
pub fn wendland(u: f64) -> Result<f64> {
    if !(u >= 0.0) {
        return Err(Error::Domain(format!("Wendland argument must be >= 0, got {u}")));
    }
    Ok(wendland_unchecked(u))
}

#[inline]
fn wendland_unchecked(u: f64) -> f64 {
    if u >= 1.0 {
        return 0.0;
    }
    let a = 1.0 - u;
    let a2 = a * a;
    let a6 = a2 * a2 * a2;
    a6 * (35.0 * u * u + 18.0 * u + 3.0) / 3.0
}

/// Sparse basis evaluation matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl BasisMatrix {
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn nnz_in_row(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn matvec(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(c, &mut out);
        out
    }

    pub fn matvec_into(&self, c: &[f64], out: &mut [f64]) {
        assert_eq!(c.len(), self.cols);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(j, v)| v * c[j]).sum();
        }
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out[i * self.cols + j] = v;
            }
        }
        out
    }
}

pub fn build_basis(cfg: &LatticeConfig) -> BasisMatrix {
    let d = cfg.grid_dim;
    let side = cfg.node_side();
    let buf = cfg.buffer as isize;
    let reach = cfg.support_radius.ceil() as isize;
    let mut row_ptr = Vec::with_capacity(d * d + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for i in 0..d as isize {
        for j in 0..d as isize {
            // node (a, b) sits at pixel coordinates (a - buf, b - buf)
            for a in (i + buf - reach).max(0)..=(i + buf + reach).min(side as isize - 1) {
                for b in (j + buf - reach).max(0)..=(j + buf + reach).min(side as isize - 1) {
                    let dy = (a - buf - i) as f64;
                    let dx = (b - buf - j) as f64;
                    let u = (dy * dy + dx * dx).sqrt() / cfg.support_radius;
                    let w = wendland_unchecked(u);
                    if w > 0.0 {
                        col_idx.push(a as usize * side + b as usize);
                        values.push(w);
                    }
                }
            }
            row_ptr.push(col_idx.len());
        }
    }
    BasisMatrix {
        rows: d * d,
        cols: side * side,
        row_ptr,
        col_idx,
        values,
    }
}

/// One stored diagonal: `values[k]` is `B[k, k + offset]` for `offset >= 0`
/// and `B[k - offset, k]` for `offset < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub offset: isize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SarMatrix {
    pub order: usize,
    pub kappa2: f64,
    pub stencil: Stencil,
    /// Node-lattice side for the 2-D stencil; equals `order` for the 1-D one.
    pub side: usize,
    pub bands: Vec<Band>,
}

impl SarMatrix {
    pub fn tridiagonal(order: usize, kappa2: f64) -> Self {
        let off = vec![-1.0; order.saturating_sub(1)];
        Self {
            order,
            kappa2,
            stencil: Stencil::Tridiagonal1d,
            side: order,
            bands: vec![
                Band { offset: -1, values: off.clone() },
                Band { offset: 0, values: vec![kappa2; order] },
                Band { offset: 1, values: off },
            ],
        }
    }

    pub fn lattice(side: usize, kappa2: f64) -> Self {
        let order = side * side;
        let horiz: Vec<f64> = (0..order.saturating_sub(1))
            .map(|k| if (k + 1) % side == 0 { 0.0 } else { -1.0 })
            .collect();
        let vert = vec![-1.0; order.saturating_sub(side)];
        Self {
            order,
            kappa2,
            stencil: Stencil::Lattice2d,
            side,
            bands: vec![
                Band { offset: -(side as isize), values: vert.clone() },
                Band { offset: -1, values: horiz.clone() },
                Band { offset: 0, values: vec![4.0 + kappa2; order] },
                Band { offset: 1, values: horiz },
                Band { offset: side as isize, values: vert },
            ],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let off = j as isize - i as isize;
        self.bands
            .iter()
            .find(|b| b.offset == off)
            .map(|b| b.values[i.min(j)])
            .unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.order];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.order);
        out.fill(0.0);
        for band in &self.bands {
            if band.offset >= 0 {
                let o = band.offset as usize;
                for (k, &v) in band.values.iter().enumerate() {
                    out[k] += v * x[k + o];
                }
            } else {
                let o = (-band.offset) as usize;
                for (k, &v) in band.values.iter().enumerate() {
                    out[k + o] += v * x[k];
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.order;
        let mut out = vec![0.0; n * n];
        for band in &self.bands {
            for (k, &v) in band.values.iter().enumerate() {
                let (i, j) = if band.offset >= 0 {
                    (k, k + band.offset as usize)
                } else {
                    (k + (-band.offset) as usize, k)
                };
                out[i * n + j] = v;
            }
        }
        out
    }

    fn row_scale(&self, i: usize) -> f64 {
        let mut s: f64 = 0.0;
        for band in &self.bands {
            let k = if band.offset >= 0 {
                Some(i)
            } else {
                i.checked_sub((-band.offset) as usize)
            };
            if let Some(k) = k {
                if let Some(v) = band.values.get(k) {
                    s = s.max(v.abs());
                }
            }
        }
        s
    }

    pub fn factorize(&self) -> Result<SarFactor> {
        match self.stencil {
            Stencil::Tridiagonal1d => TridiagonalLu::new(self).map(SarFactor::Tridiagonal),
            Stencil::Lattice2d => BandCholesky::new(self).map(SarFactor::Band),
        }
    }
}

pub fn build_sar(kappa2: f64, cfg: &LatticeConfig) -> Result<SarMatrix> {
    if !(kappa2 > 0.0 && kappa2.is_finite()) {
        return Err(Error::Domain(format!("kappa2 must be positive, got {kappa2}")));
    }
    Ok(match cfg.stencil {
        Stencil::Tridiagonal1d => SarMatrix::tridiagonal(cfg.node_count(), kappa2),
        Stencil::Lattice2d => SarMatrix::lattice(cfg.node_side(), kappa2),
    })
}

/// Tridiagonal LU with partial pivoting (the LAPACK `gttrf` scheme). The
/// 1-D matrix is indefinite for `kappa2 < 2`, so pivoting is required.
#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagonalLu {
    fn new(b: &SarMatrix) -> Result<Self> {
        let n = b.order;
        let band = |off: isize| -> Vec<f64> {
            b.bands
                .iter()
                .find(|x| x.offset == off)
                .map(|x| x.values.clone())
                .unwrap_or_else(|| vec![0.0; n.saturating_sub(off.unsigned_abs())])
        };
        let mut dl = band(-1);
        let mut d = band(0);
        let mut du = band(1);
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        let scales: Vec<f64> = (0..n).map(|i| b.row_scale(i)).collect();
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] != 0.0 {
                    let fact = dl[i] / d[i];
                    dl[i] = fact;
                    d[i + 1] -= fact * du[i];
                }
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
                swapped[i] = true;
            }
        }
        for i in 0..n {
            if !(d[i].abs() >= PIVOT_TOLERANCE * scales[i].max(f64::MIN_POSITIVE)) {
                return Err(Error::SingularMatrix {
                    kappa2: b.kappa2,
                    pivot: d[i],
                    row: i,
                });
            }
        }
        Ok(Self { dl, d, du, du2, swapped })
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                let temp = x[i];
                x[i] = x[i + 1];
                x[i + 1] = temp - self.dl[i] * x[i];
            } else {
                x[i + 1] -= self.dl[i] * x[i];
            }
        }
        if n == 0 {
            return;
        }
        x[n - 1] /= self.d[n - 1];
        if n > 1 {
            x[n - 2] = (x[n - 2] - self.du[n - 2] * x[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            x[i] = (x[i] - self.du[i] * x[i + 1] - self.du2[i] * x[i + 2]) / self.d[i];
        }
    }

    fn log_abs_det(&self) -> f64 {
        self.d.iter().map(|v| v.abs().ln()).sum()
    }
}

/// Banded Cholesky for the symmetric positive definite 2-D stencil.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    width: usize,
    /// `l[i * (width + 1) + k]` = `L[i, i - k]`.
    l: Vec<f64>,
}

impl BandCholesky {
    fn new(b: &SarMatrix) -> Result<Self> {
        let n = b.order;
        let w = b.bands.iter().map(|x| x.offset.unsigned_abs()).max().unwrap_or(0);
        let stride = w + 1;
        let mut l = vec![0.0; n * stride];
        // lower band of A
        for band in b.bands.iter().filter(|x| x.offset <= 0) {
            let k = band.offset.unsigned_abs();
            for (c, &v) in band.values.iter().enumerate() {
                l[(c + k) * stride + k] = v;
            }
        }
        for j in 0..n {
            let lo = j.saturating_sub(w);
            let mut s = l[j * stride];
            for k in lo..j {
                let v = l[j * stride + (j - k)];
                s -= v * v;
            }
            let scale = b.row_scale(j);
            if !(s > PIVOT_TOLERANCE * scale * scale) {
                return Err(Error::SingularMatrix {
                    kappa2: b.kappa2,
                    pivot: s,
                    row: j,
                });
            }
            let ljj = s.sqrt();
            l[j * stride] = ljj;
            for i in j + 1..(j + w + 1).min(n) {
                let mut s = l[i * stride + (i - j)];
                for k in i.saturating_sub(w)..j {
                    s -= l[i * stride + (i - k)] * l[j * stride + (j - k)];
                }
                l[i * stride + (i - j)] = s / ljj;
            }
        }
        Ok(Self { n, width: w, l })
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let (n, w, stride) = (self.n, self.width, self.width + 1);
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(w)..i {
                s -= self.l[i * stride + (i - k)] * x[k];
            }
            x[i] = s / self.l[i * stride];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..(i + w + 1).min(n) {
                s -= self.l[k * stride + (k - i)] * x[k];
            }
            x[i] = s / self.l[i * stride];
        }
    }

    fn log_abs_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * (self.width + 1)].ln()).sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub enum SarFactor {
    Tridiagonal(TridiagonalLu),
    Band(BandCholesky),
}

impl SarFactor {
    pub fn solve_in_place(&self, x: &mut [f64]) {
        match self {
            SarFactor::Tridiagonal(f) => f.solve_in_place(x),
            SarFactor::Band(f) => f.solve_in_place(x),
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// `ln |det B|`.
    pub fn log_abs_det(&self) -> f64 {
        match self {
            SarFactor::Tridiagonal(f) => f.log_abs_det(),
            SarFactor::Band(f) => f.log_abs_det(),
        }
    }
}

pub fn solve_coefficients(b: &SarMatrix, e: &[f64]) -> Result<Vec<f64>> {
    if e.len() != b.order {
        return Err(Error::InputShape {
            expected: format!("innovation vector of length {}", b.order),
            actual: format!("length {}", e.len()),
        });
    }
    Ok(b.factorize()?.solve(e))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub params: Option<ModelParams>,
}

/// `d x d x r` replicate stack, row-major with the replicate index fastest:
/// value `(i, j, k)` lives at `(i * d + j) * r + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack {
    pub d: usize,
    pub r: usize,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl FieldStack {
    pub fn new(d: usize, r: usize, values: Vec<f64>) -> Result<Self> {
        if r == 0 || d == 0 {
            return Err(Error::Config("field stacks need d >= 1 and r >= 1".into()));
        }
        if values.len() != d * d * r {
            return Err(Error::InputShape {
                expected: format!("{} values ({d}x{d}x{r})", d * d * r),
                actual: format!("{} values", values.len()),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite field value at index {bad}")));
        }
        Ok(Self {
            d,
            r,
            values,
            provenance: Provenance::default(),
        })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.d + j) * self.r + k]
    }

    /// One replicate as a row-major `d x d` field.
    pub fn replicate(&self, k: usize) -> Vec<f64> {
        (0..self.d * self.d).map(|p| self.values[p * self.r + k]).collect()
    }

    pub fn from_replicates(d: usize, reps: &[Vec<f64>]) -> Result<Self> {
        let r = reps.len();
        let mut values = vec![0.0; d * d * r];
        for (k, rep) in reps.iter().enumerate() {
            if rep.len() != d * d {
                return Err(Error::InputShape {
                    expected: format!("{} values per replicate", d * d),
                    actual: format!("{}", rep.len()),
                });
            }
            for (p, &v) in rep.iter().enumerate() {
                values[p * r + k] = v;
            }
        }
        Self::new(d, r, values)
    }
}

/// Output of one simulated replicate with its latent pieces.
#[derive(Debug, Clone)]
pub struct ReplicateDraw {
    pub innovations: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub process: Vec<f64>,
    pub field: Vec<f64>,
}

/// Reusable simulator: the basis depends only on the lattice layout.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: LatticeConfig,
    basis: BasisMatrix,
}

impl Simulator {
    pub fn new(cfg: LatticeConfig) -> Self {
        let basis = build_basis(&cfg);
        Self { cfg, basis }
    }

    pub fn config(&self) -> &LatticeConfig {
        &self.cfg
    }

    pub fn basis(&self) -> &BasisMatrix {
        &self.basis
    }

    /// Draws `r` replicates with their innovations, coefficients and process.
    pub fn simulate_detailed<R: Rng + ?Sized>(
        &self,
        params: &ModelParams,
        r: usize,
        rng: &mut R,
    ) -> Result<Vec<ReplicateDraw>> {
        let gev = GevParams::innovation(params.xi)?;
        let nugget = NuggetSpec::new(params.tau2)?;
        let factor = build_sar(params.kappa2, &self.cfg)?.factorize()?;
        let m = self.cfg.node_count();
        let n = self.cfg.location_count();
        let mut out = Vec::with_capacity(r);
        for _ in 0..r {
            let mut e = vec![0.0; m];
            gev_fill(&gev, &mut e, rng);
            let c = factor.solve(&e);
            let g = self.basis.matvec(&c);
            let mut eps = vec![0.0; n];
            nugget_fill(&nugget, &mut eps, rng);
            let y = g.iter().zip(&eps).map(|(a, b)| a * b).collect();
            out.push(ReplicateDraw {
                innovations: e,
                coefficients: c,
                process: g,
                field: y,
            });
        }
        Ok(out)
    }

    pub fn simulate<R: Rng + ?Sized>(
        &self,
        params: &ModelParams,
        r: usize,
        rng: &mut R,
    ) -> Result<FieldStack> {
        if r == 0 {
            return Err(Error::Config("replicate count must be >= 1".into()));
        }
        let gev = GevParams::innovation(params.xi)?;
        let nugget = NuggetSpec::new(params.tau2)?;
        let factor = build_sar(params.kappa2, &self.cfg)?.factorize()?;
        let m = self.cfg.node_count();
        let n = self.cfg.location_count();
        let mut values = vec![0.0; n * r];
        let mut c = vec![0.0; m];
        let mut g = vec![0.0; n];
        let mut eps = vec![0.0; n];
        for k in 0..r {
            gev_fill(&gev, &mut c, rng);
            factor.solve_in_place(&mut c);
            self.basis.matvec_into(&c, &mut g);
            nugget_fill(&nugget, &mut eps, rng);
            for p in 0..n {
                values[p * r + k] = g[p] * eps[p];
            }
        }
        let mut stack = FieldStack::new(self.cfg.grid_dim, r, values)?;
        stack.provenance.params = Some(*params);
        Ok(stack)
    }
}

pub fn synthesize_field<R: Rng + ?Sized>(
    params: &ModelParams,
    cfg: &LatticeConfig,
    r: usize,
    rng: &mut R,
) -> Result<FieldStack> {
    Simulator::new(*cfg).simulate(params, r, rng)
}

/// Subtracts the stack-wide median and divides by the stack-wide standard
/// deviation.
pub fn standardize_stack(stack: &FieldStack) -> Result<FieldStack> {
    let (values, _, _) = standardize_values(&stack.values)?;
    Ok(FieldStack {
        d: stack.d,
        r: stack.r,
        values,
        provenance: stack.provenance.clone(),
    })
}

pub(crate) fn standardize_values(values: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    let med = stats::median(values);
    let sd = stats::sample_sd(values);
    if !(sd >= 1e-12 * (med.abs() + 1.0)) {
        return Err(Error::DegenerateField {
            spread: sd,
            location: med,
        });
    }
    Ok((values.iter().map(|v| (v - med) / sd).collect(), med, sd))
}
