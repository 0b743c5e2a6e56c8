//! Training corpora: parameter sampling, field generation, normalization
//! statistics and the on-disk dataset directory.
//!
//! Directory layout:
//!
//! * `manifest.json`: format version, shapes, lattice, ranges, seed,
//!   normalization statistics and SHA-256 checksums of the payloads.
//! * `fields.bin`: little-endian f32, row-major `n x d x d x r`, no header.
//! * `params.bin`: little-endian f64, `n x 3`, columns `(xi, kappa2, tau2)`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{f32_to_le, f64_to_le, le_to_f32, le_to_f64, sha256_hex, write_atomic};
use crate::lattice::{standardize_stack, FieldStack, LatticeConfig, ModelParams, Simulator, Stencil};
use crate::rng::substream;
use crate::stats;

pub const DATASET_MAGIC: &str = "gevsar-dataset";
pub const DATASET_VERSION: u32 = 1;
const MAX_RETRIES: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
    pub scale: Scale,
}

impl ParamRange {
    pub fn new(lo: f64, hi: f64, scale: Scale) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid range ({lo}, {hi})")));
        }
        if scale == Scale::Log && lo <= 0.0 {
            return Err(Error::Config(format!(
                "log-scaled range needs a positive lower bound, got {lo}"
            )));
        }
        Ok(Self { lo, hi, scale })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        match self.scale {
            Scale::Linear => self.lo + u * (self.hi - self.lo),
            Scale::Log => (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp(),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Point at fraction `t` of the range on its sampling scale.
    pub fn at_fraction(&self, t: f64) -> f64 {
        match self.scale {
            Scale::Linear => self.lo + t * (self.hi - self.lo),
            Scale::Log => (self.lo.ln() + t * (self.hi.ln() - self.lo.ln())).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub xi: ParamRange,
    pub kappa2: ParamRange,
    pub tau2: ParamRange,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            xi: ParamRange { lo: 0.01, hi: 0.9, scale: Scale::Linear },
            kappa2: ParamRange { lo: 0.001, hi: 2.0, scale: Scale::Log },
            tau2: ParamRange { lo: 0.0001, hi: 0.1, scale: Scale::Log },
        }
    }
}

impl ParamRanges {
    /// Same bounds, every parameter sampled uniformly on the linear scale.
    pub fn linear() -> Self {
        let mut r = Self::default();
        r.kappa2.scale = Scale::Linear;
        r.tau2.scale = Scale::Linear;
        r
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.xi, self.kappa2, self.tau2] {
            ParamRange::new(p.lo, p.hi, p.scale)?;
        }
        Ok(())
    }

    pub fn contains(&self, p: &ModelParams) -> bool {
        self.xi.contains(p.xi) && self.kappa2.contains(p.kappa2) && self.tau2.contains(p.tau2)
    }
}

pub fn sample_params<R: Rng + ?Sized>(n: usize, ranges: &ParamRanges, rng: &mut R) -> Vec<ModelParams> {
    (0..n)
        .map(|_| {
            let xi = ranges.xi.sample(rng);
            let kappa2 = ranges.kappa2.sample(rng);
            let tau2 = ranges.tau2.sample(rng);
            ModelParams { xi, kappa2, tau2 }
        })
        .collect()
}

/// Means and standard deviations of `(xi, ln kappa2, ln tau2)` over a
/// training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub xi_mean: f64,
    pub xi_sd: f64,
    pub log_kappa2_mean: f64,
    pub log_kappa2_sd: f64,
    pub log_tau2_mean: f64,
    pub log_tau2_sd: f64,
}

impl NormStats {
    pub fn from_params(params: &[ModelParams]) -> Result<Self> {
        let col = |f: &dyn Fn(&ModelParams) -> f64| params.iter().map(f).collect::<Vec<f64>>();
        let xi = col(&|p| p.xi);
        let lk = col(&|p| p.kappa2.ln());
        let lt = col(&|p| p.tau2.ln());
        let s = Self {
            xi_mean: stats::mean(&xi),
            xi_sd: stats::sample_sd(&xi),
            log_kappa2_mean: stats::mean(&lk),
            log_kappa2_sd: stats::sample_sd(&lk),
            log_tau2_mean: stats::mean(&lt),
            log_tau2_sd: stats::sample_sd(&lt),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let sds = [self.xi_sd, self.log_kappa2_sd, self.log_tau2_sd];
        if sds.iter().all(|s| *s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "normalization standard deviations must be positive, got {sds:?}"
            )))
        }
    }

    fn means(&self) -> [f64; 3] {
        [self.xi_mean, self.log_kappa2_mean, self.log_tau2_mean]
    }

    fn sds(&self) -> [f64; 3] {
        [self.xi_sd, self.log_kappa2_sd, self.log_tau2_sd]
    }

    /// Normalizes an already-transformed triple `(xi, ln kappa2, ln tau2)`.
    pub fn normalize_transformed(&self, t: [f64; 3]) -> [f64; 3] {
        let (m, s) = (self.means(), self.sds());
        [(t[0] - m[0]) / s[0], (t[1] - m[1]) / s[1], (t[2] - m[2]) / s[2]]
    }

    /// Back to `(xi, ln kappa2, ln tau2)`.
    pub fn denormalize_transformed(&self, z: [f64; 3]) -> [f64; 3] {
        let (m, s) = (self.means(), self.sds());
        [m[0] + s[0] * z[0], m[1] + s[1] * z[1], m[2] + s[2] * z[2]]
    }
}

pub fn transform(p: &ModelParams) -> Result<[f64; 3]> {
    if !(p.kappa2 > 0.0) || !(p.tau2 > 0.0) {
        return Err(Error::Domain(format!(
            "log transform needs kappa2 > 0 and tau2 > 0, got ({}, {})",
            p.kappa2, p.tau2
        )));
    }
    Ok([p.xi, p.kappa2.ln(), p.tau2.ln()])
}

pub fn untransform(t: [f64; 3]) -> ModelParams {
    ModelParams {
        xi: t[0],
        kappa2: t[1].exp(),
        tau2: t[2].exp(),
    }
}

pub fn normalize_params(p: &ModelParams, norm: &NormStats) -> Result<[f64; 3]> {
    Ok(norm.normalize_transformed(transform(p)?))
}

/// Natural-unit parameters from a normalized triple. The result is not
/// range-checked: estimates may leave the training box.
pub fn denormalize_params(z: [f64; 3], norm: &NormStats) -> ModelParams {
    untransform(norm.denormalize_transformed(z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub ranges: ParamRanges,
    pub lattice: LatticeConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    pub r: usize,
    /// Standardized fields, `n x d x d x r`.
    pub fields: Vec<f32>,
    pub params: Vec<ModelParams>,
    pub norm: NormStats,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn stack_len(&self) -> usize {
        self.d * self.d * self.r
    }

    pub fn field(&self, i: usize) -> &[f32] {
        let len = self.stack_len();
        &self.fields[i * len..(i + 1) * len]
    }

    pub fn stack(&self, i: usize) -> FieldStack {
        let mut s = FieldStack::new(
            self.d,
            self.r,
            self.field(i).iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("dataset fields are finite with a consistent shape");
        s.provenance.params = Some(self.params[i]);
        s.provenance.seed = Some(self.meta.seed);
        s
    }

    /// Deterministic 90/10 split by configuration index.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        split_indices(self.n)
    }
}

pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let n_train = if n < 2 { n } else { ((n as f64) * 0.9).round().clamp(1.0, (n - 1) as f64) as usize };
    ((0..n_train).collect(), (n_train..n).collect())
}

/// One standardized stack for configuration `index`, retrying degenerate
/// draws on fresh sub-streams.
pub fn generate_config(sim: &Simulator, params: &ModelParams, r: usize, seed: u64, index: usize) -> Result<FieldStack> {
    let mut last = None;
    for attempt in 0..=MAX_RETRIES {
        let mut rng = substream(seed, &[1, index as u64, attempt]);
        let raw = sim.simulate(params, r, &mut rng)?;
        match standardize_stack(&raw) {
            Ok(s) => return Ok(s),
            Err(e @ Error::DegenerateField { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap())
}

pub fn make_dataset(n: usize, r: usize, cfg: &LatticeConfig, ranges: &ParamRanges, seed: u64) -> Result<Dataset> {
    make_dataset_with_workers(n, r, cfg, ranges, seed, 1)
}

/// Generates configurations on `workers` threads. Each configuration owns a
/// sub-stream, so the output does not depend on the worker count.
pub fn make_dataset_with_workers(
    n: usize,
    r: usize,
    cfg: &LatticeConfig,
    ranges: &ParamRanges,
    seed: u64,
    workers: usize,
) -> Result<Dataset> {
    if n == 0 || r == 0 {
        return Err(Error::Config("dataset needs n >= 1 and r >= 1".into()));
    }
    ranges.validate()?;
    let params = sample_params(n, ranges, &mut substream(seed, &[0]));
    let sim = Simulator::new(*cfg);
    let d = cfg.grid_dim;
    let len = d * d * r;
    let mut fields = vec![0f32; n * len];
    let workers = workers.clamp(1, n);
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = fields
            .chunks_mut(chunk * len)
            .enumerate()
            .map(|(w, out)| {
                let sim = &sim;
                let params = &params;
                scope.spawn(move || -> Result<()> {
                    for (k, slot) in out.chunks_mut(len).enumerate() {
                        let i = w * chunk + k;
                        let s = generate_config(sim, &params[i], r, seed, i)?;
                        for (o, v) in slot.iter_mut().zip(&s.values) {
                            *o = *v as f32;
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("dataset worker panicked")?;
        }
        Ok(())
    })?;
    let norm = NormStats::from_params(&params)?;
    Ok(Dataset {
        n,
        d,
        r,
        fields,
        params,
        norm,
        meta: DatasetMeta {
            seed,
            ranges: *ranges,
            lattice: *cfg,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checksums {
    fields_sha256: String,
    params_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    format_version: u32,
    n: usize,
    d: usize,
    r: usize,
    buffer: usize,
    stencil: Stencil,
    support_radius: f64,
    ranges: ParamRanges,
    seed: u64,
    norm_stats: NormStats,
    checksums: Checksums,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let fields = f32_to_le(ds.fields.iter().copied());
    let params = f64_to_le(ds.params.iter().flat_map(|p| p.as_array()));
    let manifest = Manifest {
        magic: DATASET_MAGIC.into(),
        format_version: DATASET_VERSION,
        n: ds.n,
        d: ds.d,
        r: ds.r,
        buffer: ds.meta.lattice.buffer,
        stencil: ds.meta.lattice.stencil,
        support_radius: ds.meta.lattice.support_radius,
        ranges: ds.meta.ranges,
        seed: ds.meta.seed,
        norm_stats: ds.norm,
        checksums: Checksums {
            fields_sha256: sha256_hex(&fields),
            params_sha256: sha256_hex(&params),
        },
    };
    write_atomic(&dir.join("fields.bin"), &fields)?;
    write_atomic(&dir.join("params.bin"), &params)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

fn read_payload(path: &Path, what: &str, expected_len: u64, checksum: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() as u64 != expected_len {
        return Err(Error::Truncated {
            what: what.into(),
            expected: expected_len,
            found: bytes.len() as u64,
        });
    }
    let computed = sha256_hex(&bytes);
    if computed != checksum {
        return Err(Error::Checksum {
            what: what.into(),
            expected: checksum.into(),
            computed,
        });
    }
    Ok(bytes)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("magic").and_then(|m| m.as_str()) != Some(DATASET_MAGIC) {
        return Err(Error::Format("manifest.json is not a dataset manifest (bad magic)".into()));
    }
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("manifest.json lacks format_version".into()))?;
    if version != DATASET_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            supported: DATASET_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(value)?;
    let lattice = LatticeConfig::new(m.d, m.buffer, m.support_radius, m.stencil)?;
    let len = (m.n * m.d * m.d * m.r) as u64;
    let fields = read_payload(&dir.join("fields.bin"), "fields.bin", 4 * len, &m.checksums.fields_sha256)?;
    let params = read_payload(
        &dir.join("params.bin"),
        "params.bin",
        8 * 3 * m.n as u64,
        &m.checksums.params_sha256,
    )?;
    let params = le_to_f64(&params)
        .chunks_exact(3)
        .map(|c| ModelParams { xi: c[0], kappa2: c[1], tau2: c[2] })
        .collect();
    Ok(Dataset {
        n: m.n,
        d: m.d,
        r: m.r,
        fields: le_to_f32(&fields),
        params,
        norm: m.norm_stats,
        meta: DatasetMeta {
            seed: m.seed,
            ranges: m.ranges,
            lattice,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn sampled_params_stay_in_range() {
        let ranges = ParamRanges::default();
        let ps = sample_params(10_000, &ranges, &mut stream(1));
        assert!(ps.iter().all(|p| ranges.contains(p)));
        let again = sample_params(10_000, &ranges, &mut stream(1));
        assert_eq!(ps, again);
    }

    #[test]
    fn linear_flag_changes_the_spread() {
        let ps = sample_params(20_000, &ParamRanges::linear(), &mut stream(2));
        // linear scale: about 0.45% of draws (90 expected) fall below 0.01
        let small = ps.iter().filter(|p| p.kappa2 < 0.01).count();
        assert!(small < 150, "{small}");
        let ps = sample_params(20_000, &ParamRanges::default(), &mut stream(2));
        let small = ps.iter().filter(|p| p.kappa2 < 0.01).count();
        assert!(small > 4000, "{small}");
    }

    #[test]
    fn normalize_examples() {
        let norm = NormStats {
            xi_mean: 0.5,
            xi_sd: 0.25,
            log_kappa2_mean: -2.0,
            log_kappa2_sd: 1.5,
            log_tau2_mean: -6.0,
            log_tau2_sd: 2.0,
        };
        let p = ModelParams { xi: 0.75, kappa2: (-2f64).exp(), tau2: (-6f64).exp() };
        let z = normalize_params(&p, &norm).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-15 && z[1].abs() < 1e-15 && z[2].abs() < 1e-15);
        let back = denormalize_params(z, &norm);
        assert!((back.xi - p.xi).abs() < 1e-12);
        assert!((back.kappa2 - p.kappa2).abs() < 1e-12 * p.kappa2);
        assert!((back.tau2 - p.tau2).abs() < 1e-12 * p.tau2);
        let at_mean = ModelParams { xi: 0.5, kappa2: (-2f64).exp(), tau2: (-6f64).exp() };
        assert_eq!(normalize_params(&at_mean, &norm).unwrap(), [0.0, 0.0, 0.0]);
        let zero_tau = ModelParams { xi: 0.5, kappa2: 1.0, tau2: 0.0 };
        assert!(matches!(normalize_params(&zero_tau, &norm), Err(Error::Domain(_))));
    }

    #[test]
    fn norm_stats_standardize_training_params() {
        let ps = sample_params(3000, &ParamRanges::default(), &mut stream(4));
        let norm = NormStats::from_params(&ps).unwrap();
        let zs: Vec<[f64; 3]> = ps.iter().map(|p| normalize_params(p, &norm).unwrap()).collect();
        for c in 0..3 {
            let col: Vec<f64> = zs.iter().map(|z| z[c]).collect();
            assert!(stats::mean(&col).abs() < 1e-9);
            assert!((stats::sample_sd(&col) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let cfg = LatticeConfig::standard(16).unwrap();
        let ds = make_dataset(10, 1, &cfg, &ParamRanges::default(), 3).unwrap();
        assert_eq!(ds.fields.len(), 10 * 16 * 16);
        assert!(ds.fields.iter().all(|v| v.is_finite()));
        assert!(ds.params.iter().all(|p| ds.meta.ranges.contains(p)));
        let again = make_dataset(10, 1, &cfg, &ParamRanges::default(), 3).unwrap();
        assert_eq!(ds, again);
        // each stack is standardized: median 0
        for i in 0..ds.n {
            let s = ds.stack(i);
            assert!(stats::median(&s.values).abs() < 1e-6);
        }
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let cfg = LatticeConfig::standard(8).unwrap();
        let one = make_dataset_with_workers(13, 2, &cfg, &ParamRanges::default(), 5, 1).unwrap();
        let four = make_dataset_with_workers(13, 2, &cfg, &ParamRanges::default(), 5, 4).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn split_is_ninety_ten() {
        let (t, v) = split_indices(100);
        assert_eq!((t.len(), v.len()), (90, 10));
        assert_eq!(v[0], 90);
    }
}
