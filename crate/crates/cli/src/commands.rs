use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use gevsar::dataset::{self, denormalize_params, Dataset, NormStats, ParamRanges};
use gevsar::diagnostics::{are, are_csv, default_madogram_bins, madogram_csv, stack_madogram, BiasCorrector};
use gevsar::io::{load_stack, save_stack, write_atomic};
use gevsar::lattice::{LatticeConfig, ModelParams, Simulator};
use gevsar::mle::{fit_mle, BasisFactor, MleConfig};
use gevsar::network::{self, history_csv, load_weights, predict_flat, save_weights, NetworkWeights, TrainConfig};
use gevsar::quantile::{self, coverage_csv, coverage_eval, fit_interval_models, interior_grid, predict_interval};
use gevsar::rng::substream;
use gevsar::tiling::{self, PlausibilityBox, TileEstimator};
use gevsar::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::{CliResult, Command, EstimatorArgs, LatticeArgs, ParamArgs};

/// Everything besides the weights that inference needs: the normalization
/// of the training targets, the training box and the simulation lattice.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EstimatorCard {
    norm: NormStats,
    ranges: ParamRanges,
    lattice: LatticeConfig,
}

struct Estimator {
    weights: NetworkWeights<f32>,
    card: EstimatorCard,
    corrector: Option<BiasCorrector>,
    intervals: Option<quantile::QuantileModel>,
}

fn lattice(a: &LatticeArgs) -> Result<LatticeConfig> {
    LatticeConfig::new(a.d, a.buffer, a.radius, a.stencil)
}

fn params(a: &ParamArgs) -> Result<ModelParams> {
    ModelParams::new(a.xi, a.kappa2, a.tau2)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{what} {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn load_card(dir: &Path) -> Result<(NetworkWeights<f32>, EstimatorCard)> {
    let weights = load_weights(&dir.join("weights.bin"))?;
    let card: EstimatorCard = read_json(&dir.join("estimator.json"), "estimator card")?;
    card.norm.validate()?;
    Ok((weights, card))
}

fn load_estimator(a: &EstimatorArgs) -> Result<Estimator> {
    let (weights, card) = load_card(&a.model)?;
    let corrector = a.corrector.as_deref().map(|p| read_json(p, "bias corrector")).transpose()?;
    let intervals = a.intervals.as_deref().map(quantile::load_model).transpose()?;
    Ok(Estimator { weights, card, corrector, intervals })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Network estimates for every configuration of a dataset, in natural units.
fn dataset_estimates(weights: &NetworkWeights<f32>, norm: &NormStats, ds: &Dataset) -> Result<Vec<ModelParams>> {
    if ds.r != weights.spec.channels || ds.d != weights.spec.d {
        return Err(Error::InputShape {
            expected: format!("{0}x{0}x{1} stacks", weights.spec.d, weights.spec.channels),
            actual: format!("{0}x{0}x{1}", ds.d, ds.r),
        });
    }
    let z = predict_flat(weights, &ds.fields, ds.n)?;
    Ok(z.into_iter().map(|t| denormalize_params(t, norm)).collect())
}

pub fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Simulate { params: p, r, lattice: l, seed, out } => {
            let cfg = lattice(&l)?;
            let mut stack = Simulator::new(cfg).simulate(&params(&p)?, r, &mut substream(seed, &[0]))?;
            stack.provenance.seed = Some(seed);
            save_stack(&out, &stack)
        }
        Command::Dataset { n, r, lattice: l, linear, workers, seed, out } => {
            let ranges = if linear { ParamRanges::linear() } else { ParamRanges::default() };
            let ds = dataset::make_dataset_with_workers(n, r, &lattice(&l)?, &ranges, seed, workers.max(1))?;
            dataset::save_dataset(&ds, &out)
        }
        Command::Train { data, epochs, batch_size, lr, patience, seed, out } => {
            let ds = dataset::load_dataset(&data)?;
            let cfg = TrainConfig {
                epochs,
                batch_size,
                learning_rate: lr,
                plateau_patience: patience,
                seed,
                ..TrainConfig::default()
            };
            let (weights, history) = network::train(&ds, &cfg)?;
            fs::create_dir_all(&out)?;
            save_weights(&weights, &out.join("weights.bin"))?;
            let card = EstimatorCard { norm: ds.norm, ranges: ds.meta.ranges, lattice: ds.meta.lattice };
            write_json(&out.join("estimator.json"), &card)?;
            write_atomic(&out.join("history.csv"), history_csv(&history).as_bytes())
        }
        Command::Estimate { estimator, stacks, seed: _, out } => {
            let est = load_estimator(&estimator)?;
            let loaded = stacks.iter().map(|p| load_stack(p)).collect::<Result<Vec<_>>>()?;
            let raw = network::estimate_batch(&est.weights, &loaded, &est.card.norm)?;
            let mut csv = String::from(
                "stack,raw_xi,raw_kappa2,raw_tau2,xi,kappa2,tau2,xi_lo,xi_hi,kappa2_lo,kappa2_hi,tau2_lo,tau2_hi\n",
            );
            for (path, r) in stacks.iter().zip(&raw) {
                let c = match &est.corrector {
                    Some(bc) => bc.correct(r)?,
                    None => *r,
                };
                let iv = est.intervals.as_ref().map(|m| predict_interval(m, r)).transpose()?;
                let b = |i: usize, hi: bool| opt(iv.map(|v| if hi { v[i].hi } else { v[i].lo }));
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    path.display(),
                    r.xi,
                    r.kappa2,
                    r.tau2,
                    c.xi,
                    c.kappa2,
                    c.tau2,
                    b(0, false),
                    b(0, true),
                    b(1, false),
                    b(1, true),
                    b(2, false),
                    b(2, true)
                )
                .expect("writing to a string");
            }
            emit(out.as_deref(), &csv)
        }
        Command::Mle { stack, stencil, radius, starts, max_iter, timing, seed, out } => {
            let s = load_stack(&stack)?;
            let mut cfg = MleConfig::square(s.d)?;
            cfg.lattice = LatticeConfig::square(s.d, radius, stencil)?;
            (cfg.starts, cfg.max_iter, cfg.seed) = (starts, max_iter, seed);
            let t0 = Instant::now();
            let basis = BasisFactor::new(&cfg)?;
            let fit = fit_mle(&s, &cfg, &basis)?;
            let mut v = serde_json::json!({
                "xi": fit.xi,
                "kappa2": fit.kappa2,
                "nll": fit.nll,
                "iterations": fit.iterations,
                "status": format!("{:?}", fit.status),
            });
            if timing {
                v["seconds"] = serde_json::json!(t0.elapsed().as_secs_f64());
            }
            emit(out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&v)?))
        }
        Command::UqFit { model, data, seed: _, out_intervals, out_corrector } => {
            let (weights, card) = load_card(&model)?;
            let ds = dataset::load_dataset(&data)?;
            let est = dataset_estimates(&weights, &card.norm, &ds)?;
            let qm = fit_interval_models(&est, &ds.params)?;
            let bc = BiasCorrector::fit(&ds.params, &est)?;
            quantile::save_model(&qm, &out_intervals)?;
            write_json(&out_corrector, &bc)
        }
        Command::UqCoverage { model, intervals, grid, reps, seed, out } => {
            let (weights, card) = load_card(&model)?;
            let qm = quantile::load_model(&intervals)?;
            if grid == 0 {
                return Err(Error::Config("coverage grid needs at least one point per axis".into()));
            }
            let cells = interior_grid(&card.ranges, grid);
            let sim = Simulator::new(card.lattice);
            let rows = coverage_eval(&cells, reps, &weights, &card.norm, &qm, &sim, seed);
            write_atomic(&out, coverage_csv(&rows).as_bytes())
        }
        Command::Madogram { stack, max_h, bins, seed: _, out } => {
            let s = load_stack(&stack)?;
            let (default_h, _) = default_madogram_bins(s.d);
            let h = max_h.unwrap_or(default_h);
            let n = bins.unwrap_or((h.ceil() as usize).max(1));
            let curve = stack_madogram(&s, h, n)?;
            write_atomic(&out, madogram_csv(&curve).as_bytes())
        }
        Command::Qq { stack, params: p, reps, stencil, seed, out, are_out, envelope_out } => {
            let obs = load_stack(&stack)?;
            let cfg = LatticeConfig::new(obs.d, LatticeConfig::DEFAULT_BUFFER, LatticeConfig::DEFAULT_SUPPORT_RADIUS, stencil)?;
            let sims = tiling::simulate_at_tile(&params(&p)?, &Simulator::new(cfg), reps, obs.r, &mut substream(seed, &[0]))?;
            let diag = tiling::tile_diagnostics(&obs, &sims, &tiling::default_probs())?;
            write_atomic(&out, gevsar::diagnostics::qq_csv(&diag.qq).as_bytes())?;
            if let Some(path) = are_out {
                let o: Vec<f64> = diag.qq.iter().map(|r| r.obs).collect();
                let s: Vec<f64> = diag.qq.iter().map(|r| r.sim).collect();
                write_atomic(&path, are_csv(&are(&o, &s)?).as_bytes())?;
            }
            if let Some(path) = envelope_out {
                write_atomic(&path, tiling::envelope_csv(&diag.envelope).as_bytes())?;
            }
            Ok(())
        }
        Command::Tiles { grid, estimator, tile_size, min_valid, diag_reps, workers, seed, out } => {
            let est = load_estimator(&estimator)?;
            let g = tiling::ingest_grid(&grid)?;
            let tiles = tiling::make_tiles(&g, tile_size, min_valid)?;
            let sim = Simulator::new(est.card.lattice);
            let te = TileEstimator {
                weights: &est.weights,
                norm: &est.card.norm,
                corrector: est.corrector.as_ref(),
                qmodel: est.intervals.as_ref(),
                plausible: PlausibilityBox::from_ranges(&est.card.ranges),
                diagnostic_reps: diag_reps,
                simulator: Some(&sim),
                seed,
                workers,
            };
            let results = tiling::estimate_tiles(&g, &tiles, &te)?;
            write_atomic(&out, &tiling::tile_results_csv(&results)?)
        }
        Command::Surface { tiles, grid, tile_size, bandwidth, seed: _, out } => {
            let results = tiling::parse_tile_results(&fs::read(&tiles)?)?;
            let manifest: tiling::GridManifest = read_json(&grid.join("manifest.json"), "grid manifest")?;
            let surface = tiling::surface_grid(&results, manifest.n_y, manifest.n_x, tile_size, bandwidth)?;
            tiling::write_grid(&surface, &out)
        }
    }
}
