use gevsar::dataset::{load_dataset, make_dataset, save_dataset, ParamRanges};
use gevsar::diagnostics::BiasCorrector;
use gevsar::io::{load_stack, save_stack};
use gevsar::lattice::{LatticeConfig, ModelParams, Simulator};
use gevsar::network::{estimate_batch, forward, train, TrainConfig};
use gevsar::quantile::{fit_interval_models, predict_interval};
use gevsar::rng::substream;
use gevsar::tiling::{estimate_tiles, make_tiles, GridStack, PlausibilityBox, TileEstimator};
use gevsar::Error;

#[test]
fn stack_and_dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LatticeConfig::standard(8).unwrap();
    let ds = make_dataset(12, 3, &cfg, &ParamRanges::default(), 4).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);

    let p = dir.path().join("fields.bin");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[10] ^= 0x40;
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum { .. })));

    let stack = Simulator::new(cfg).simulate(&ds.params[0], 5, &mut substream(1, &[])).unwrap();
    let path = dir.path().join("s.bin");
    save_stack(&path, &stack).unwrap();
    let s = load_stack(&path).unwrap();
    assert_eq!((s.d, s.r), (8, 5));
    for (a, b) in s.values.iter().zip(&stack.values) {
        assert_eq!(*a, f64::from(*b as f32));
    }
}

#[test]
fn tiny_training_run_feeds_estimation_and_intervals() {
    let cfg = LatticeConfig::standard(8).unwrap();
    let ds = make_dataset(200, 4, &cfg, &ParamRanges::default(), 7).unwrap();
    let tc = TrainConfig { epochs: 3, batch_size: 20, seed: 1, ..TrainConfig::default() };
    let (w, history) = train(&ds, &tc).unwrap();
    assert_eq!(history.len(), 3);
    assert!(history.iter().all(|h| h.train_mae.is_finite() && h.val_mae.is_finite()));
    let (w2, h2) = train(&ds, &tc).unwrap();
    assert_eq!(w, w2);
    assert_eq!(history, h2);

    let calib = make_dataset(60, 4, &cfg, &ParamRanges::default(), 8).unwrap();
    let stacks: Vec<_> = (0..calib.n).map(|i| calib.stack(i)).collect();
    let est = estimate_batch(&w, &stacks, &ds.norm).unwrap();
    assert!(est.iter().all(|p| p.kappa2 > 0.0 && p.tau2 > 0.0 && p.xi.is_finite()));
    let qm = fit_interval_models(&est, &calib.params).unwrap();
    for e in &est {
        for iv in predict_interval(&qm, e).unwrap() {
            assert!(iv.lo <= iv.hi);
        }
    }
    assert!(forward(&w, &stacks[0]).is_ok());
}

/// Four quadrants of a 64 x 64 x 30 grid simulated tile by tile at known xi.
#[test]
fn quadrant_grid_recovers_the_xi_ordering() {
    let cfg = LatticeConfig::standard(16).unwrap();
    let ranges = ParamRanges::default();
    let ds = make_dataset(1500, 30, &cfg, &ranges, 21).unwrap();
    let tc = TrainConfig { epochs: 10, batch_size: 32, seed: 2, ..TrainConfig::default() };
    let (w, _) = train(&ds, &tc).unwrap();
    let calib = make_dataset(300, 30, &cfg, &ranges, 22).unwrap();
    let stacks: Vec<_> = (0..calib.n).map(|i| calib.stack(i)).collect();
    let est = estimate_batch(&w, &stacks, &ds.norm).unwrap();
    let bc = BiasCorrector::fit(&calib.params, &est).unwrap();
    let qm = fit_interval_models(&est, &calib.params).unwrap();

    let quadrant_xi = [0.15, 0.4, 0.6, 0.85];
    let sim = Simulator::new(cfg);
    let (n, years) = (64, 30);
    let mut values = vec![0.0; n * n * years];
    for ty in 0..4 {
        for tx in 0..4 {
            let q = (ty / 2) * 2 + tx / 2;
            let p = ModelParams::new(quadrant_xi[q], 0.2, 0.005).unwrap();
            let s = sim.simulate(&p, years, &mut substream(30, &[(ty * 4 + tx) as u64])).unwrap();
            for i in 0..16 {
                for j in 0..16 {
                    for k in 0..years {
                        values[((ty * 16 + i) * n + tx * 16 + j) * years + k] = s.get(i, j, k);
                    }
                }
            }
        }
    }
    let grid = GridStack::new(n, n, years, values, None).unwrap();
    let tiles = make_tiles(&grid, 16, 0.9).unwrap();
    let te = TileEstimator {
        weights: &w,
        norm: &ds.norm,
        corrector: Some(&bc),
        qmodel: Some(&qm),
        plausible: PlausibilityBox::from_ranges(&ranges),
        diagnostic_reps: 0,
        simulator: None,
        seed: 3,
        workers: 2,
    };
    let results = estimate_tiles(&grid, &tiles, &te).unwrap();
    assert_eq!(results.len(), 16);
    assert_eq!(results, estimate_tiles(&grid, &tiles, &TileEstimator { workers: 1, ..te }).unwrap());
    let mut quadrant_mean = [0.0; 4];
    for r in &results {
        assert!(r.error.is_none() && !r.is_flagged(), "{r:?}");
        let c = r.corrected().unwrap();
        assert!(PlausibilityBox::from_ranges(&ranges).contains(&c));
        for iv in r.intervals().unwrap() {
            assert!(iv.lo <= iv.hi);
        }
        let q = (r.row / 32) * 2 + r.col / 32;
        quadrant_mean[q] += c.xi / 4.0;
    }
    assert!(quadrant_mean.windows(2).all(|w| w[0] < w[1]), "{quadrant_mean:?}");

    let mut masked = grid.clone();
    masked.mask = vec![false; n * n];
    assert!(make_tiles(&masked, 16, 0.9).unwrap().is_empty());
    assert!(estimate_tiles(&masked, &[], &te).unwrap().is_empty());

    let short = GridStack::new(16, 16, 10, vec![1.0; 2560], None).unwrap();
    let t = make_tiles(&short, 16, 0.0).unwrap();
    assert!(matches!(estimate_tiles(&short, &t, &te), Err(Error::InputShape { .. })));
}
