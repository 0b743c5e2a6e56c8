use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::{init_weights, loss_and_gradient, mae_loss, predict_flat, NetworkSpec, NetworkWeights, Workspace};
use crate::dataset::{normalize_params, Dataset};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            learning_rate: 1e-3,
            epochs: 100,
            plateau_factor: 0.1,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau factor must lie in (0,1), got {}", self.plateau_factor)));
        }
        if !(self.plateau_min_delta >= 0.0) {
            return Err(Error::Config("plateau min-delta must be >= 0".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid ADAM settings {a:?}")));
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule: the wait counter resets on every reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    wait: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
            reductions: 0,
        }
    }

    /// Feeds one epoch's metric and returns the learning rate for the next.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best - self.min_delta {
            self.best = metric;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr *= self.factor;
                self.reductions += 1;
                self.wait = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_mae,val_mae,lr\n");
    for h in history {
        out.push_str(&format!("{},{},{},{}\n", h.epoch, h.train_mae, h.val_mae, h.lr));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: NetworkWeights<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Trains the reference architecture sized for `ds`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(NetworkWeights<f32>, Vec<EpochRecord>)> {
    let mut spec = NetworkSpec::standard(ds.r);
    spec.d = ds.d;
    let out = train_with(ds, &spec, cfg, |_| {})?;
    Ok((out.weights, out.history))
}

fn gather(ds: &Dataset, idx: &[usize], targets: &[[f64; 3]], x: &mut Vec<f32>, t: &mut Vec<f32>) {
    x.clear();
    t.clear();
    for &i in idx {
        x.extend_from_slice(ds.field(i));
        t.extend(targets[i].iter().map(|&v| v as f32));
    }
}

/// Full training loop. `on_epoch` sees every history record as it is made.
pub fn train_with(
    ds: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if spec.d != ds.d || spec.channels != ds.r {
        return Err(Error::InputShape {
            expected: format!("{} x {} x {}", spec.d, spec.d, spec.channels),
            actual: format!("{} x {} x {}", ds.d, ds.d, ds.r),
        });
    }
    let mut weights = init_weights(spec, &mut substream(cfg.seed, &[0]))?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { weights, history: Vec::new(), best_epoch: None });
    }

    let targets: Vec<[f64; 3]> = ds.params.iter().map(|p| normalize_params(p, &ds.norm)).collect::<Result<_>>()?;
    let (mut train_idx, val_idx) = ds.split();
    // a single configuration leaves no hold-out; monitor the training set instead
    let monitor_idx: Vec<usize> = if val_idx.is_empty() { train_idx.clone() } else { val_idx };
    let mut monitor_x = Vec::new();
    let mut monitor_t = Vec::new();
    gather(ds, &monitor_idx, &targets, &mut monitor_x, &mut Vec::new());
    monitor_t.extend(monitor_idx.iter().map(|&i| targets[i]));

    let mut adam = AdamState::<f32>::new(weights.params.len(), cfg.adam);
    let mut sched = PlateauScheduler::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta);
    let mut ws = Workspace::default();
    let mut grad = Vec::new();
    let (mut xb, mut tb) = (Vec::new(), Vec::new());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, weights.clone(), None);

    for epoch in 0..cfg.epochs {
        let lr = sched.lr;
        train_idx.shuffle(&mut substream(cfg.seed, &[1, epoch as u64]));
        let mut total = 0.0;
        for (b, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            gather(ds, chunk, &targets, &mut xb, &mut tb);
            let loss = loss_and_gradient(&weights, &xb, &tb, chunk.len(), &mut ws, &mut grad)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b, lr });
            }
            adam.step(&mut weights.params, &grad, lr);
            total += f64::from(loss) * chunk.len() as f64;
        }
        let train_mae = total / train_idx.len() as f64;
        let preds = predict_flat(&weights, &monitor_x, monitor_idx.len())?;
        let val_mae = mae_loss(&preds, &monitor_t)?;
        if !val_mae.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX, lr });
        }
        if val_mae < best.0 {
            best = (val_mae, weights.clone(), Some(epoch));
        }
        let rec = EpochRecord { epoch, train_mae, val_mae, lr };
        on_epoch(&rec);
        history.push(rec);
        sched.observe(val_mae);
    }
    Ok(TrainOutcome { weights: best.1, history, best_epoch: best.2 })
}
