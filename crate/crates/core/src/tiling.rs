//! Gridded annual-maxima stacks, tiling, per-tile estimation and smoothed
//! parameter surfaces.
//!
//! Grid directory layout:
//!
//! | file            | content                                              |
//! |-----------------|------------------------------------------------------|
//! | `manifest.json` | `format_version`, `n_y`, `n_x`, `years`, `mask_present`, optional `origin`/`spacing` |
//! | `values.bin`    | little-endian f32, row-major `y -> x -> year`         |
//! | `mask.bin`      | optional, one byte per cell, 1 = valid                |

use std::fs;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::dataset::{NormStats, ParamRanges};
use crate::diagnostics::{
    are, madogram_fields, median_iqr_standardize_values, median_log_are, qq_data, quantile_map_sorted, BiasCorrector,
    MadogramBin,
};
use crate::error::{Error, Result};
use crate::io::{f32_to_le, le_to_f32, write_atomic};
use crate::lattice::{FieldStack, ModelParams, Simulator};
use crate::network::{estimate_batch, NetworkWeights};
use crate::quantile::{predict_interval, Interval, QuantileModel};
use crate::rng::substream;
use crate::stats::{median, quantile_sorted, sorted_copy};

pub const GRID_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TILE_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub format_version: u32,
    pub n_y: usize,
    pub n_x: usize,
    pub years: usize,
    pub mask_present: bool,
    #[serde(default)]
    pub origin: [f64; 2],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 2],
}

fn unit_spacing() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    pub n_y: usize,
    pub n_x: usize,
    pub years: usize,
    /// Row-major `y -> x -> year`.
    pub values: Vec<f64>,
    /// One flag per cell, `true` = valid.
    pub mask: Vec<bool>,
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
}

impl GridStack {
    /// Builds a grid; cells holding any NaN become masked, other non-finite
    /// values in valid cells are an error.
    pub fn new(n_y: usize, n_x: usize, years: usize, values: Vec<f64>, mask: Option<Vec<bool>>) -> Result<Self> {
        if n_y == 0 || n_x == 0 || years == 0 {
            return Err(Error::Config(format!("grid needs positive dimensions, got {n_y}x{n_x}x{years}")));
        }
        let cells = n_y * n_x;
        if values.len() != cells * years {
            return Err(Error::InputShape {
                expected: format!("{} values ({n_y}x{n_x}x{years})", cells * years),
                actual: format!("{}", values.len()),
            });
        }
        let mut mask = match mask {
            Some(m) if m.len() != cells => {
                return Err(Error::InputShape { expected: format!("{cells} mask cells"), actual: format!("{}", m.len()) })
            }
            Some(m) => m,
            None => vec![true; cells],
        };
        for c in 0..cells {
            let v = &values[c * years..(c + 1) * years];
            if v.iter().any(|x| x.is_nan()) {
                mask[c] = false;
            } else if mask[c] && v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain(format!("non-finite value in valid cell ({}, {})", c / n_x, c % n_x)));
            }
        }
        Ok(Self { n_y, n_x, years, values, mask, origin: [0.0, 0.0], spacing: unit_spacing() })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, year: usize) -> f64 {
        self.values[(y * self.n_x + x) * self.years + year]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.n_x + x]
    }

    pub fn masked_cells(&self) -> usize {
        self.mask.iter().filter(|v| !**v).count()
    }
}

pub fn write_grid(grid: &GridStack, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let has_mask = grid.mask.iter().any(|v| !v);
    let manifest = GridManifest {
        format_version: GRID_FORMAT_VERSION,
        n_y: grid.n_y,
        n_x: grid.n_x,
        years: grid.years,
        mask_present: has_mask,
        origin: grid.origin,
        spacing: grid.spacing,
    };
    write_atomic(&dir.join("values.bin"), &f32_to_le(grid.values.iter().map(|&v| v as f32)))?;
    let mask_path = dir.join("mask.bin");
    if has_mask {
        write_atomic(&mask_path, &grid.mask.iter().map(|&v| u8::from(v)).collect::<Vec<_>>())?;
    } else if mask_path.exists() {
        fs::remove_file(&mask_path)?;
    }
    let mut s = serde_json::to_string_pretty(&manifest)?;
    s.push('\n');
    write_atomic(&dir.join("manifest.json"), s.as_bytes())
}

pub fn ingest_grid(dir: &Path) -> Result<GridStack> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: GridManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("grid manifest: {e}")))?;
    if m.format_version != GRID_FORMAT_VERSION {
        return Err(Error::Version { found: m.format_version, supported: GRID_FORMAT_VERSION });
    }
    let bytes = fs::read(dir.join("values.bin"))?;
    let want = 4 * (m.n_y * m.n_x * m.years) as u64;
    if bytes.len() as u64 != want {
        return Err(Error::Truncated { what: "grid values".into(), expected: want, found: bytes.len() as u64 });
    }
    let values = le_to_f32(&bytes).into_iter().map(f64::from).collect();
    let mask = if m.mask_present {
        let raw = fs::read(dir.join("mask.bin"))?;
        if raw.len() != m.n_y * m.n_x {
            return Err(Error::Truncated {
                what: "grid mask".into(),
                expected: (m.n_y * m.n_x) as u64,
                found: raw.len() as u64,
            });
        }
        if let Some(bad) = raw.iter().find(|b| **b > 1) {
            return Err(Error::Format(format!("mask byte {bad} is neither 0 nor 1")));
        }
        Some(raw.into_iter().map(|b| b == 1).collect())
    } else {
        None
    };
    let mut grid = GridStack::new(m.n_y, m.n_x, m.years, values, mask)?;
    grid.origin = m.origin;
    grid.spacing = m.spacing;
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub valid_fraction: f64,
}

impl Tile {
    /// Center in cell units.
    pub fn center(&self) -> (f64, f64) {
        let h = self.size as f64 / 2.0;
        (self.row as f64 + h, self.col as f64 + h)
    }
}

/// Non-overlapping windows anchored at multiples of `tile_size`; remainder
/// strips are skipped and tiles below `min_valid_fraction` are dropped.
/// Ids count every anchored window in row-major order, so dropping a tile
/// never renumbers the others.
pub fn make_tiles(grid: &GridStack, tile_size: usize, min_valid_fraction: f64) -> Result<Vec<Tile>> {
    if tile_size == 0 || tile_size > grid.n_y.min(grid.n_x) {
        return Err(Error::Config(format!(
            "tile size {tile_size} must lie in 1..={} for a {}x{} grid",
            grid.n_y.min(grid.n_x),
            grid.n_y,
            grid.n_x
        )));
    }
    let (ty, tx) = (grid.n_y / tile_size, grid.n_x / tile_size);
    let mut out = Vec::new();
    for a in 0..ty {
        for b in 0..tx {
            let (row, col) = (a * tile_size, b * tile_size);
            let valid = (row..row + tile_size)
                .flat_map(|y| (col..col + tile_size).map(move |x| (y, x)))
                .filter(|&(y, x)| grid.is_valid(y, x))
                .count();
            let frac = valid as f64 / (tile_size * tile_size) as f64;
            if valid > 0 && frac >= min_valid_fraction {
                out.push(Tile { id: a * tx + b, row, col, size: tile_size, valid_fraction: frac });
            }
        }
    }
    Ok(out)
}

/// The tile as a `size x size x years` stack. Masked cells take the median
/// of the tile's valid cells in the same year.
pub fn extract_tile(grid: &GridStack, tile: &Tile) -> Result<FieldStack> {
    let (s, r) = (tile.size, grid.years);
    let mut values = vec![0.0; s * s * r];
    for k in 0..r {
        let valid: Vec<f64> = (0..s * s)
            .filter(|p| grid.is_valid(tile.row + p / s, tile.col + p % s))
            .map(|p| grid.get(tile.row + p / s, tile.col + p % s, k))
            .collect();
        if valid.is_empty() {
            return Err(Error::Domain(format!("tile {} has no valid cells", tile.id)));
        }
        let fill = median(&valid);
        for p in 0..s * s {
            let (y, x) = (tile.row + p / s, tile.col + p % s);
            values[p * r + k] = if grid.is_valid(y, x) { grid.get(y, x, k) } else { fill };
        }
    }
    FieldStack::new(s, r, values)
}

/// Training box widened by 10% of its width on the transformed scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl PlausibilityBox {
    pub fn from_ranges(ranges: &ParamRanges) -> Self {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for (c, r) in [ranges.xi, ranges.kappa2, ranges.tau2].iter().enumerate() {
            let (a, b) = if c == 0 { (r.lo, r.hi) } else { (r.lo.ln(), r.hi.ln()) };
            let pad = 0.1 * (b - a);
            lo[c] = a - pad;
            hi[c] = b + pad;
        }
        Self { lo, hi }
    }

    pub fn contains(&self, p: &ModelParams) -> bool {
        if !(p.kappa2 > 0.0 && p.tau2 > 0.0) {
            return false;
        }
        let t = [p.xi, p.kappa2.ln(), p.tau2.ln()];
        (0..3).all(|c| t[c] >= self.lo[c] && t[c] <= self.hi[c])
    }
}

pub const FLAG_OUTSIDE_BOX: &str = "outside_box";
pub const FLAG_FAILED: &str = "failed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileResult {
    pub tile_id: usize,
    pub row: usize,
    pub col: usize,
    pub center_y: f64,
    pub center_x: f64,
    pub raw_xi: Option<f64>,
    pub raw_kappa2: Option<f64>,
    pub raw_tau2: Option<f64>,
    pub xi: Option<f64>,
    pub kappa2: Option<f64>,
    pub tau2: Option<f64>,
    pub xi_lo: Option<f64>,
    pub xi_hi: Option<f64>,
    pub kappa2_lo: Option<f64>,
    pub kappa2_hi: Option<f64>,
    pub tau2_lo: Option<f64>,
    pub tau2_hi: Option<f64>,
    /// Median log-ARE of QQ quantiles against simulations.
    pub quantile_are: Option<f64>,
    /// Median log-ARE of the madogram against the simulated median curve.
    pub madogram_are: Option<f64>,
    /// `;`-separated flags, empty when the tile is clean.
    pub flags: String,
    pub error: Option<String>,
}

impl TileResult {
    fn empty(tile: &Tile) -> Self {
        let (cy, cx) = tile.center();
        Self {
            tile_id: tile.id,
            row: tile.row,
            col: tile.col,
            center_y: cy,
            center_x: cx,
            raw_xi: None,
            raw_kappa2: None,
            raw_tau2: None,
            xi: None,
            kappa2: None,
            tau2: None,
            xi_lo: None,
            xi_hi: None,
            kappa2_lo: None,
            kappa2_hi: None,
            tau2_lo: None,
            tau2_hi: None,
            quantile_are: None,
            madogram_are: None,
            flags: String::new(),
            error: None,
        }
    }

    fn add_flag(&mut self, f: &str) {
        if !self.flags.is_empty() {
            self.flags.push(';');
        }
        self.flags.push_str(f);
    }

    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }

    pub fn raw(&self) -> Option<ModelParams> {
        Some(ModelParams { xi: self.raw_xi?, kappa2: self.raw_kappa2?, tau2: self.raw_tau2? })
    }

    pub fn corrected(&self) -> Option<ModelParams> {
        Some(ModelParams { xi: self.xi?, kappa2: self.kappa2?, tau2: self.tau2? })
    }

    pub fn intervals(&self) -> Option<[Interval; 3]> {
        Some([
            Interval { lo: self.xi_lo?, hi: self.xi_hi? },
            Interval { lo: self.kappa2_lo?, hi: self.kappa2_hi? },
            Interval { lo: self.tau2_lo?, hi: self.tau2_hi? },
        ])
    }
}

pub fn tile_results_csv(results: &[TileResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r).map_err(|e| Error::Format(format!("tile csv: {e}")))?;
    }
    if results.is_empty() {
        // header only
        let mut hdr = csv::Writer::from_writer(Vec::new());
        hdr.serialize(TileResult::empty(&Tile { id: 0, row: 0, col: 0, size: 0, valid_fraction: 0.0 }))
            .map_err(|e| Error::Format(format!("tile csv: {e}")))?;
        let bytes = hdr.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        let end = bytes.iter().position(|b| *b == b'\n').map_or(bytes.len(), |p| p + 1);
        return Ok(bytes[..end].to_vec());
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_tile_results(bytes: &[u8]) -> Result<Vec<TileResult>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<Vec<TileResult>, _>>()
        .map_err(|e| Error::Format(format!("tile csv: {e}")))
}

/// Everything `estimate_tiles` needs besides the grid.
pub struct TileEstimator<'a> {
    pub weights: &'a NetworkWeights<f32>,
    pub norm: &'a NormStats,
    pub corrector: Option<&'a BiasCorrector>,
    pub qmodel: Option<&'a QuantileModel>,
    pub plausible: PlausibilityBox,
    /// Simulated stacks per tile for the diagnostics summary; 0 skips it.
    pub diagnostic_reps: usize,
    pub simulator: Option<&'a Simulator>,
    pub seed: u64,
    pub workers: usize,
}

/// Per-tile estimation, correction and intervals. Per-tile failures are
/// recorded in the result; only a channel mismatch aborts.
pub fn estimate_tiles(grid: &GridStack, tiles: &[Tile], est: &TileEstimator) -> Result<Vec<TileResult>> {
    let spec = &est.weights.spec;
    if grid.years != spec.channels {
        return Err(Error::InputShape {
            expected: format!(
                "{} years (network trained with r = {}); retrain with r = {} or select {} years",
                spec.channels, spec.channels, grid.years, spec.channels
            ),
            actual: format!("{} years", grid.years),
        });
    }
    if let Some(t) = tiles.iter().find(|t| t.size != spec.d) {
        return Err(Error::InputShape {
            expected: format!("{0}x{0} tiles", spec.d),
            actual: format!("{0}x{0} tile {1}", t.size, t.id),
        });
    }
    if est.diagnostic_reps > 0 && est.simulator.is_none() {
        return Err(Error::Config("tile diagnostics need a simulator".into()));
    }
    let workers = est.workers.max(1).min(tiles.len().max(1));
    let chunk = tiles.len().div_ceil(workers).max(1);
    let parts: Vec<Vec<TileResult>> = thread::scope(|s| {
        let handles: Vec<_> = tiles
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|t| estimate_one(grid, t, est)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("tile worker panicked")).collect()
    });
    Ok(parts.into_iter().flatten().collect())
}

fn estimate_one(grid: &GridStack, tile: &Tile, est: &TileEstimator) -> TileResult {
    let mut res = TileResult::empty(tile);
    if let Err(e) = fill_result(grid, tile, est, &mut res) {
        res.add_flag(FLAG_FAILED);
        res.error = Some(e.to_string());
    }
    res
}

fn fill_result(grid: &GridStack, tile: &Tile, est: &TileEstimator, res: &mut TileResult) -> Result<()> {
    let stack = extract_tile(grid, tile)?;
    let raw = estimate_batch(est.weights, std::slice::from_ref(&stack), est.norm)?.remove(0);
    (res.raw_xi, res.raw_kappa2, res.raw_tau2) = (Some(raw.xi), Some(raw.kappa2), Some(raw.tau2));
    let corrected = match est.corrector {
        Some(c) => c.correct(&raw)?,
        None => raw,
    };
    (res.xi, res.kappa2, res.tau2) = (Some(corrected.xi), Some(corrected.kappa2), Some(corrected.tau2));
    if let Some(q) = est.qmodel {
        let iv = predict_interval(q, &raw)?;
        (res.xi_lo, res.xi_hi) = (Some(iv[0].lo), Some(iv[0].hi));
        (res.kappa2_lo, res.kappa2_hi) = (Some(iv[1].lo), Some(iv[1].hi));
        (res.tau2_lo, res.tau2_hi) = (Some(iv[2].lo), Some(iv[2].hi));
    }
    if !est.plausible.contains(&corrected) {
        res.add_flag(FLAG_OUTSIDE_BOX);
        return Ok(());
    }
    if est.diagnostic_reps > 0 {
        let sim = est.simulator.expect("checked by caller");
        let diag = diagnose_tile(&stack, tile, &corrected, sim, est.diagnostic_reps, est.seed)?;
        res.quantile_are = diag.median_qq_log_are;
        res.madogram_are = diag.median_madogram_log_are;
    }
    Ok(())
}

/// Simulates `reps` stacks at `params` on the tile's own sub-stream and
/// compares them with the observed tile stack.
pub fn diagnose_tile(
    stack: &FieldStack,
    tile: &Tile,
    params: &ModelParams,
    sim: &Simulator,
    reps: usize,
    seed: u64,
) -> Result<TileDiagnostics> {
    let mut rng = substream(seed, &[tile.id as u64]);
    let sims = simulate_at_tile(params, sim, reps, stack.r, &mut rng)?;
    tile_diagnostics(stack, &sims, &default_probs())
}

/// `reps` independent `d x d x years` stacks at `params`.
pub fn simulate_at_tile<R: rand::Rng + ?Sized>(
    params: &ModelParams,
    sim: &Simulator,
    reps: usize,
    years: usize,
    rng: &mut R,
) -> Result<Vec<FieldStack>> {
    if reps == 0 || years == 0 {
        return Err(Error::Config("simulation needs reps >= 1 and years >= 1".into()));
    }
    (0..reps).map(|_| sim.simulate(params, years, rng)).collect()
}

/// Probability levels 0.05, 0.10, ..., 0.95 without the median, where
/// standardized quantiles sit at zero.
pub fn default_probs() -> Vec<f64> {
    (1..20).filter(|&k| k != 10).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeBin {
    pub h: f64,
    pub observed: f64,
    pub lo: f64,
    pub median: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileDiagnostics {
    pub qq: Vec<crate::diagnostics::QqRow>,
    pub qq_log_are: Vec<f64>,
    pub envelope: Vec<EnvelopeBin>,
    pub median_qq_log_are: Option<f64>,
    pub median_madogram_log_are: Option<f64>,
    /// Share of distance bins whose observed value lies in the envelope.
    pub envelope_fraction: f64,
    /// Share of probability levels with negative log-ARE.
    pub negative_are_fraction: f64,
}

fn pooled(stack: &FieldStack) -> Vec<Vec<f64>> {
    (0..stack.r).map(|k| stack.replicate(k)).collect()
}

fn curve(reps: &[Vec<f64>], d: usize) -> Result<Vec<MadogramBin>> {
    let refs: Vec<&[f64]> = reps.iter().map(|v| v.as_slice()).collect();
    let (max_h, bins) = crate::diagnostics::default_madogram_bins(d);
    madogram_fields(&refs, d, max_h, bins)
}

/// Compares an observed stack with simulations at its estimate. Every
/// stack is median-IQR standardized. QQ quantiles compare the standardized
/// values directly. For the madogram, the observed stack and each
/// simulation are quantile-mapped onto one common reference, the pooled
/// standardized simulations, so the envelope tests dependence alone.
pub fn tile_diagnostics(obs: &FieldStack, sims: &[FieldStack], probs: &[f64]) -> Result<TileDiagnostics> {
    if sims.is_empty() {
        return Err(Error::Config("tile diagnostics need at least one simulation".into()));
    }
    let d = obs.d;
    if let Some(s) = sims.iter().find(|s| s.d != d) {
        return Err(Error::InputShape { expected: format!("{d}x{d} simulations"), actual: format!("{0}x{0}", s.d) });
    }
    let obs_std = median_iqr_standardize_values(&obs.values)?;
    let sims_std: Vec<Vec<f64>> =
        sims.iter().map(|s| median_iqr_standardize_values(&s.values)).collect::<Result<_>>()?;

    let qq = qq_data(&obs_std, &sims_std, probs)?;
    let obs_q: Vec<f64> = qq.iter().map(|r| r.obs).collect();
    let sim_q: Vec<f64> = qq.iter().map(|r| r.sim).collect();
    let qq_are = are(&obs_q, &sim_q)?;
    let qq_log_are: Vec<f64> = qq_are.iter().map(|e| e.log_are).collect();
    let negative = qq_are.iter().filter(|e| e.are < 1.0).count();

    let reference = sorted_copy(&sims_std.concat());
    let obs_stack = FieldStack::new(d, obs.r, quantile_map_sorted(&obs_std, &reference))?;
    let obs_curve = curve(&pooled(&obs_stack), d)?;
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::with_capacity(sims.len()); obs_curve.len()];
    for (s, v) in sims.iter().zip(&sims_std) {
        let mapped = FieldStack::new(d, s.r, quantile_map_sorted(v, &reference))?;
        let c = curve(&pooled(&mapped), d)?;
        if c.len() != obs_curve.len() {
            return Err(Error::InputShape {
                expected: format!("{} madogram bins", obs_curve.len()),
                actual: format!("{}", c.len()),
            });
        }
        for (b, bin) in c.iter().enumerate() {
            per_bin[b].push(bin.value);
        }
    }
    let envelope: Vec<EnvelopeBin> = obs_curve
        .iter()
        .zip(&per_bin)
        .map(|(o, vals)| {
            let s = sorted_copy(vals);
            EnvelopeBin {
                h: o.h,
                observed: o.value,
                lo: quantile_sorted(&s, 0.025),
                median: quantile_sorted(&s, 0.5),
                hi: quantile_sorted(&s, 0.975),
            }
        })
        .collect();
    let inside = envelope.iter().filter(|b| b.lo <= b.observed && b.observed <= b.hi).count();
    let mad_are = are(
        &envelope.iter().map(|b| b.observed).collect::<Vec<_>>(),
        &envelope.iter().map(|b| b.median).collect::<Vec<_>>(),
    )?;
    Ok(TileDiagnostics {
        median_qq_log_are: median_log_are(&qq_are),
        median_madogram_log_are: median_log_are(&mad_are),
        envelope_fraction: inside as f64 / envelope.len().max(1) as f64,
        negative_are_fraction: negative as f64 / qq_are.len().max(1) as f64,
        qq,
        qq_log_are,
        envelope,
    })
}

pub fn envelope_csv(bins: &[EnvelopeBin]) -> String {
    let mut out = String::from("h,observed,lo,median,hi\n");
    for b in bins {
        out.push_str(&format!("{},{},{},{},{}\n", b.h, b.observed, b.lo, b.median, b.hi));
    }
    out
}

/// Parameter surfaces on the tile-center lattice: `(xi, kappa2, tau2)`
/// stored as the three "years" of a grid.
pub fn surface_grid(
    results: &[TileResult],
    n_y: usize,
    n_x: usize,
    tile_size: usize,
    bandwidth: f64,
) -> Result<GridStack> {
    if tile_size == 0 || n_y < tile_size || n_x < tile_size {
        return Err(Error::Config(format!("tile size {tile_size} does not fit a {n_y}x{n_x} grid")));
    }
    let (ty, tx) = (n_y / tile_size, n_x / tile_size);
    let h = tile_size as f64 / 2.0;
    let targets: Vec<(f64, f64)> = (0..ty * tx)
        .map(|k| ((k / tx * tile_size) as f64 + h, (k % tx * tile_size) as f64 + h))
        .collect();
    let vals = smooth_surface(results, &targets, bandwidth)?;
    let values = vals.iter().flat_map(|p| [p.xi, p.kappa2, p.tau2]).collect();
    GridStack::new(ty, tx, 3, values, None)
}

/// Gaussian-kernel (Nadaraya-Watson) smoother of the corrected estimates of
/// unflagged tiles, on the transformed scales. As the bandwidth shrinks the
/// weights concentrate on the nearest tile centers.
pub fn smooth_surface(results: &[TileResult], targets: &[(f64, f64)], bandwidth: f64) -> Result<Vec<ModelParams>> {
    if !(bandwidth >= 0.0 && bandwidth.is_finite()) {
        return Err(Error::Domain(format!("bandwidth must be finite and >= 0, got {bandwidth}")));
    }
    let pts: Vec<((f64, f64), [f64; 3])> = results
        .iter()
        .filter(|r| !r.is_flagged())
        .filter_map(|r| {
            let p = r.corrected()?;
            (p.kappa2 > 0.0 && p.tau2 > 0.0).then(|| ((r.center_y, r.center_x), [p.xi, p.kappa2.ln(), p.tau2.ln()]))
        })
        .collect();
    if pts.is_empty() {
        return Err(Error::Domain("surface smoothing needs at least one unflagged tile".into()));
    }
    Ok(targets
        .iter()
        .map(|&(y, x)| {
            let d2: Vec<f64> = pts.iter().map(|((py, px), _)| (py - y).powi(2) + (px - x).powi(2)).collect();
            let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = d2
                .iter()
                .map(|&d| {
                    if bandwidth == 0.0 {
                        f64::from(u8::from(d == dmin))
                    } else {
                        (-(d - dmin) / (2.0 * bandwidth * bandwidth)).exp()
                    }
                })
                .collect();
            let total: f64 = w.iter().sum();
            let mut t = [0.0; 3];
            for (wi, (_, v)) in w.iter().zip(&pts) {
                for c in 0..3 {
                    t[c] += wi * v[c] / total;
                }
            }
            ModelParams { xi: t[0], kappa2: t[1].exp(), tau2: t[2].exp() }
        })
        .collect())
}
