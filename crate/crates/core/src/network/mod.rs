//! Convolutional estimator mapping a standardized `d x d x r` stack to the
//! normalized parameter triple `(xi, ln kappa2, ln tau2)`.
//!
//! Layer sequence (replicates enter as channels):
//!
//! | layer                | output (d=16)  | activation |
//! |----------------------|----------------|------------|
//! | conv 3x3, valid      | 14 x 14 x 64   | LeakyReLU  |
//! | conv 3x3, valid      | 12 x 12 x 32   | LeakyReLU  |
//! | global average pool  | 32             |            |
//! | dense                | 512            | ReLU       |
//! | dense                | 10             | ReLU       |
//! | dense                | 3              | linear     |
//!
//! All trainable parameters live in one flat vector so the optimizer and
//! the weights file treat them uniformly.

pub mod adam;
pub mod io;
pub mod ops;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{denormalize_params, NormStats};
use crate::error::{Error, Result};
use crate::lattice::{standardize_stack, FieldStack, ModelParams};
use ops::{col2im, gemm, im2col, Scalar, Trans};

pub use adam::AdamState;
pub use io::{load_weights, save_weights};
pub use train::{history_csv, train, train_with, EpochRecord, PlateauScheduler, TrainConfig, TrainOutcome};

pub const OUTPUTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub d: usize,
    pub channels: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub dense1: usize,
    pub dense2: usize,
    pub leaky_slope: f64,
}

const fn layer_counts(channels: usize, conv1: usize, conv2: usize, dense1: usize, dense2: usize) -> [usize; 5] {
    [
        9 * channels * conv1 + conv1,
        9 * conv1 * conv2 + conv2,
        conv2 * dense1 + dense1,
        dense1 * dense2 + dense2,
        dense2 * OUTPUTS + OUTPUTS,
    ]
}

const TABLE1_R30: [usize; 5] = layer_counts(30, 64, 32, 512, 10);
const _: () = assert!(
    TABLE1_R30[0] == 17_344
        && TABLE1_R30[1] == 18_464
        && TABLE1_R30[2] == 16_896
        && TABLE1_R30[3] == 5_130
        && TABLE1_R30[4] == 33
);
const _: () = assert!(
    TABLE1_R30[0] + TABLE1_R30[1] + TABLE1_R30[2] + TABLE1_R30[3] + TABLE1_R30[4] == 57_867
);

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    w4: usize,
    b4: usize,
    w5: usize,
    b5: usize,
    total: usize,
}

impl NetworkSpec {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

    /// The reference architecture for `channels` replicates on a 16 x 16 grid.
    pub fn standard(channels: usize) -> Self {
        Self {
            d: 16,
            channels,
            conv1: 64,
            conv2: 32,
            dense1: 512,
            dense2: 10,
            leaky_slope: Self::DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.channels, self.conv1, self.conv2, self.dense1, self.dense2];
        if self.d < 5 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid network spec {self:?}")));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope must lie in [0,1), got {}", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn layer_param_counts(&self) -> [usize; 5] {
        layer_counts(self.channels, self.conv1, self.conv2, self.dense1, self.dense2)
    }

    pub fn total_params(&self) -> usize {
        self.layer_param_counts().iter().sum()
    }

    /// Shapes of the ten tensors `(W1, b1, ..., W5, b5)`.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![3, 3, self.channels, self.conv1],
            vec![self.conv1],
            vec![3, 3, self.conv1, self.conv2],
            vec![self.conv2],
            vec![self.conv2, self.dense1],
            vec![self.dense1],
            vec![self.dense1, self.dense2],
            vec![self.dense2],
            vec![self.dense2, OUTPUTS],
            vec![OUTPUTS],
        ]
    }

    fn layout(&self) -> Layout {
        let mut off = 0;
        let mut next = |len: usize| {
            let o = off;
            off += len;
            o
        };
        let w1 = next(9 * self.channels * self.conv1);
        let b1 = next(self.conv1);
        let w2 = next(9 * self.conv1 * self.conv2);
        let b2 = next(self.conv2);
        let w3 = next(self.conv2 * self.dense1);
        let b3 = next(self.dense1);
        let w4 = next(self.dense1 * self.dense2);
        let b4 = next(self.dense2);
        let w5 = next(self.dense2 * OUTPUTS);
        let b5 = next(OUTPUTS);
        Layout { w1, b1, w2, b2, w3, b3, w4, b4, w5, b5, total: off }
    }

    pub fn input_len(&self) -> usize {
        self.d * self.d * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights<T: Scalar> {
    pub spec: NetworkSpec,
    pub params: Vec<T>,
}

impl<T: Scalar> NetworkWeights<T> {
    pub fn zeros(spec: NetworkSpec) -> Self {
        Self {
            spec,
            params: vec![T::zero(); spec.total_params()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            spec: self.spec,
            params: self.params.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Views of the ten tensors in `(W1, b1, ..., W5, b5)` order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let l = self.spec.layout();
        let cuts = [l.w1, l.b1, l.w2, l.b2, l.w3, l.b3, l.w4, l.b4, l.w5, l.b5, l.total];
        cuts.windows(2).map(|w| &self.params[w[0]..w[1]]).collect()
    }
}

/// Glorot-uniform kernels, limit `sqrt(6 / (fan_in + fan_out))`; zero biases.
pub fn init_weights<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<NetworkWeights<f32>> {
    spec.validate()?;
    let l = spec.layout();
    let mut w = NetworkWeights::<f32>::zeros(*spec);
    let kernels = [
        (l.w1, l.b1, 9 * spec.channels + 9 * spec.conv1),
        (l.w2, l.b2, 9 * spec.conv1 + 9 * spec.conv2),
        (l.w3, l.b3, spec.conv2 + spec.dense1),
        (l.w4, l.b4, spec.dense1 + spec.dense2),
        (l.w5, l.b5, spec.dense2 + OUTPUTS),
    ];
    for (start, end, fan) in kernels {
        let limit = (6.0 / fan as f64).sqrt();
        for v in &mut w.params[start..end] {
            *v = rng.random_range(-limit..limit) as f32;
        }
    }
    Ok(w)
}

/// Intermediate tensors of a batched forward pass, kept for backprop.
#[derive(Debug, Default, Clone)]
pub struct Workspace<T: Scalar> {
    batch: usize,
    col1: Vec<T>,
    z1: Vec<T>,
    a1: Vec<T>,
    col2: Vec<T>,
    z2: Vec<T>,
    pooled: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    pub out: Vec<T>,
}

fn leaky<T: Scalar>(z: T, slope: T) -> T {
    if z > T::zero() {
        z
    } else {
        z * slope
    }
}

fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
}

fn col_sums<T: Scalar>(x: &[T], width: usize, out: &mut [T]) {
    out.fill(T::zero());
    for row in x.chunks(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = *o + *v;
        }
    }
}

fn resize<T: Scalar>(v: &mut Vec<T>, len: usize) {
    v.clear();
    v.resize(len, T::zero());
}

fn check_input(spec: &NetworkSpec, len: usize, batch: usize) -> Result<()> {
    if len != batch * spec.input_len() {
        return Err(Error::InputShape {
            expected: format!("{batch} x {} x {} x {}", spec.d, spec.d, spec.channels),
            actual: format!("{len} values"),
        });
    }
    Ok(())
}

/// Batched forward pass over `x = [batch, d, d, channels]`; the outputs are
/// left in `ws.out` as `[batch, 3]`.
pub fn forward_batch<T: Scalar>(w: &NetworkWeights<T>, x: &[T], batch: usize, ws: &mut Workspace<T>) -> Result<()> {
    let s = &w.spec;
    check_input(s, x.len(), batch)?;
    let l = s.layout();
    let p = &w.params;
    let slope = T::from_f64(s.leaky_slope);
    let (s1, s2) = (s.d - 2, s.d - 4);
    let (p1, p2) = (s1 * s1, s2 * s2);
    ws.batch = batch;

    resize(&mut ws.col1, batch * p1 * 9 * s.channels);
    im2col(x, batch, s.d, s.channels, &mut ws.col1);
    resize(&mut ws.z1, batch * p1 * s.conv1);
    gemm(Trans::NN, batch * p1, 9 * s.channels, s.conv1, &ws.col1, &p[l.w1..l.b1], T::zero(), &mut ws.z1);
    add_bias(&mut ws.z1, &p[l.b1..l.w2]);
    ws.a1.clear();
    ws.a1.extend(ws.z1.iter().map(|&z| leaky(z, slope)));

    resize(&mut ws.col2, batch * p2 * 9 * s.conv1);
    im2col(&ws.a1, batch, s1, s.conv1, &mut ws.col2);
    resize(&mut ws.z2, batch * p2 * s.conv2);
    gemm(Trans::NN, batch * p2, 9 * s.conv1, s.conv2, &ws.col2, &p[l.w2..l.b2], T::zero(), &mut ws.z2);
    add_bias(&mut ws.z2, &p[l.b2..l.w3]);

    resize(&mut ws.pooled, batch * s.conv2);
    let inv = T::from_f64(1.0 / p2 as f64);
    for b in 0..batch {
        let dst = &mut ws.pooled[b * s.conv2..(b + 1) * s.conv2];
        for row in ws.z2[b * p2 * s.conv2..(b + 1) * p2 * s.conv2].chunks(s.conv2) {
            for (o, &z) in dst.iter_mut().zip(row) {
                *o = *o + leaky(z, slope);
            }
        }
        for o in dst.iter_mut() {
            *o = *o * inv;
        }
    }

    resize(&mut ws.h1, batch * s.dense1);
    gemm(Trans::NN, batch, s.conv2, s.dense1, &ws.pooled, &p[l.w3..l.b3], T::zero(), &mut ws.h1);
    add_bias(&mut ws.h1, &p[l.b3..l.w4]);
    ws.h1.iter_mut().for_each(|v| *v = v.max(T::zero()));

    resize(&mut ws.h2, batch * s.dense2);
    gemm(Trans::NN, batch, s.dense1, s.dense2, &ws.h1, &p[l.w4..l.b4], T::zero(), &mut ws.h2);
    add_bias(&mut ws.h2, &p[l.b4..l.w5]);
    ws.h2.iter_mut().for_each(|v| *v = v.max(T::zero()));

    resize(&mut ws.out, batch * OUTPUTS);
    gemm(Trans::NN, batch, s.dense2, OUTPUTS, &ws.h2, &p[l.w5..l.b5], T::zero(), &mut ws.out);
    add_bias(&mut ws.out, &p[l.b5..l.total]);
    Ok(())
}

/// Forward pass for a single standardized stack.
pub fn forward<T: Scalar>(w: &NetworkWeights<T>, stack: &FieldStack) -> Result<[f64; 3]> {
    if stack.d != w.spec.d || stack.r != w.spec.channels {
        return Err(Error::InputShape {
            expected: format!("{} x {} x {}", w.spec.d, w.spec.d, w.spec.channels),
            actual: format!("{} x {} x {}", stack.d, stack.d, stack.r),
        });
    }
    let x: Vec<T> = stack.values.iter().map(|&v| T::from_f64(v)).collect();
    let mut ws = Workspace::default();
    forward_batch(w, &x, 1, &mut ws)?;
    Ok([ws.out[0].as_f64(), ws.out[1].as_f64(), ws.out[2].as_f64()])
}

/// Mean over the batch of the l1 distance between triples.
pub fn mae_loss(preds: &[[f64; 3]], targets: &[[f64; 3]]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Domain(format!(
            "loss needs equal non-empty batches, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).abs()).sum::<f64>())
        .sum();
    Ok(total / preds.len() as f64)
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Loss and exact reverse-mode gradient of the batch MAE with respect to
/// every parameter, using `sign(0) = 0` for the l1 subgradient.
pub fn loss_and_gradient<T: Scalar>(
    w: &NetworkWeights<T>,
    x: &[T],
    targets: &[T],
    batch: usize,
    ws: &mut Workspace<T>,
    grad: &mut Vec<T>,
) -> Result<T> {
    if batch == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    if targets.len() != batch * OUTPUTS {
        return Err(Error::InputShape {
            expected: format!("{} targets", batch * OUTPUTS),
            actual: format!("{}", targets.len()),
        });
    }
    forward_batch(w, x, batch, ws)?;
    let s = &w.spec;
    let l = s.layout();
    let p = &w.params;
    let slope = T::from_f64(s.leaky_slope);
    let (s1, s2) = (s.d - 2, s.d - 4);
    let (p1, p2) = (s1 * s1, s2 * s2);
    resize(grad, l.total);
    let inv_b = T::from_f64(1.0 / batch as f64);

    let mut loss = T::zero();
    let mut dout = vec![T::zero(); batch * OUTPUTS];
    for (i, (o, t)) in ws.out.iter().zip(targets).enumerate() {
        let r = *o - *t;
        loss = loss + r.abs();
        dout[i] = sign(r) * inv_b;
    }
    loss = loss * inv_b;

    // dense 3
    gemm(Trans::TN, s.dense2, batch, OUTPUTS, &ws.h2, &dout, T::zero(), &mut grad[l.w5..l.b5]);
    col_sums(&dout, OUTPUTS, &mut grad[l.b5..l.total]);
    let mut dh2 = vec![T::zero(); batch * s.dense2];
    gemm(Trans::NT, batch, OUTPUTS, s.dense2, &dout, &p[l.w5..l.b5], T::zero(), &mut dh2);
    for (g, h) in dh2.iter_mut().zip(&ws.h2) {
        if *h <= T::zero() {
            *g = T::zero();
        }
    }

    // dense 2
    gemm(Trans::TN, s.dense1, batch, s.dense2, &ws.h1, &dh2, T::zero(), &mut grad[l.w4..l.b4]);
    col_sums(&dh2, s.dense2, &mut grad[l.b4..l.w5]);
    let mut dh1 = vec![T::zero(); batch * s.dense1];
    gemm(Trans::NT, batch, s.dense2, s.dense1, &dh2, &p[l.w4..l.b4], T::zero(), &mut dh1);
    for (g, h) in dh1.iter_mut().zip(&ws.h1) {
        if *h <= T::zero() {
            *g = T::zero();
        }
    }

    // dense 1
    gemm(Trans::TN, s.conv2, batch, s.dense1, &ws.pooled, &dh1, T::zero(), &mut grad[l.w3..l.b3]);
    col_sums(&dh1, s.dense1, &mut grad[l.b3..l.w4]);
    let mut dpool = vec![T::zero(); batch * s.conv2];
    gemm(Trans::NT, batch, s.dense1, s.conv2, &dh1, &p[l.w3..l.b3], T::zero(), &mut dpool);

    // pooling + conv 2 activation
    let inv_p2 = T::from_f64(1.0 / p2 as f64);
    let mut dz2 = vec![T::zero(); batch * p2 * s.conv2];
    for b in 0..batch {
        let dp = &dpool[b * s.conv2..(b + 1) * s.conv2];
        let span = b * p2 * s.conv2..(b + 1) * p2 * s.conv2;
        for (drow, zrow) in dz2[span.clone()].chunks_mut(s.conv2).zip(ws.z2[span].chunks(s.conv2)) {
            for ((dv, &z), &g) in drow.iter_mut().zip(zrow).zip(dp) {
                let dact = if z > T::zero() { T::one() } else { slope };
                *dv = g * inv_p2 * dact;
            }
        }
    }

    // conv 2
    gemm(Trans::TN, 9 * s.conv1, batch * p2, s.conv2, &ws.col2, &dz2, T::zero(), &mut grad[l.w2..l.b2]);
    col_sums(&dz2, s.conv2, &mut grad[l.b2..l.w3]);
    let mut dcol2 = vec![T::zero(); batch * p2 * 9 * s.conv1];
    gemm(Trans::NT, batch * p2, s.conv2, 9 * s.conv1, &dz2, &p[l.w2..l.b2], T::zero(), &mut dcol2);
    let mut dz1 = vec![T::zero(); batch * p1 * s.conv1];
    col2im(&dcol2, batch, s1, s.conv1, &mut dz1);
    for (g, &z) in dz1.iter_mut().zip(&ws.z1) {
        if z <= T::zero() {
            *g = *g * slope;
        }
    }

    // conv 1
    gemm(Trans::TN, 9 * s.channels, batch * p1, s.conv1, &ws.col1, &dz1, T::zero(), &mut grad[l.w1..l.b1]);
    col_sums(&dz1, s.conv1, &mut grad[l.b1..l.w2]);
    Ok(loss)
}

/// Raw stack in, natural-unit parameters out.
pub fn estimate<T: Scalar>(w: &NetworkWeights<T>, stack: &FieldStack, norm: &NormStats) -> Result<ModelParams> {
    Ok(estimate_batch(w, std::slice::from_ref(stack), norm)?.remove(0))
}

/// Batched [`estimate`]; stacks are standardized, pushed through the network
/// in chunks and denormalized.
pub fn estimate_batch<T: Scalar>(w: &NetworkWeights<T>, stacks: &[FieldStack], norm: &NormStats) -> Result<Vec<ModelParams>> {
    let z = predict_normalized(w, stacks, true)?;
    Ok(z.into_iter().map(|t| denormalize_params(t, norm)).collect())
}

/// Normalized network outputs; `standardize` applies the stack-wide
/// median/SD scaling first (skip it for already-standardized inputs).
pub fn predict_normalized<T: Scalar>(w: &NetworkWeights<T>, stacks: &[FieldStack], standardize: bool) -> Result<Vec<[f64; 3]>> {
    const CHUNK: usize = 128;
    let spec = &w.spec;
    let mut out = Vec::with_capacity(stacks.len());
    let mut ws = Workspace::default();
    let mut x: Vec<T> = Vec::with_capacity(CHUNK * spec.input_len());
    for chunk in stacks.chunks(CHUNK) {
        x.clear();
        for s in chunk {
            if s.d != spec.d || s.r != spec.channels {
                return Err(Error::InputShape {
                    expected: format!("{} x {} x {}", spec.d, spec.d, spec.channels),
                    actual: format!("{} x {} x {}", s.d, s.d, s.r),
                });
            }
            if standardize {
                let z = standardize_stack(s)?;
                x.extend(z.values.iter().map(|&v| T::from_f64(v)));
            } else {
                x.extend(s.values.iter().map(|&v| T::from_f64(v)));
            }
        }
        forward_batch(w, &x, chunk.len(), &mut ws)?;
        out.extend(ws.out.chunks(OUTPUTS).map(|o| [o[0].as_f64(), o[1].as_f64(), o[2].as_f64()]));
    }
    Ok(out)
}

/// Forward pass over raw `f32` inputs already laid out as `[n, d, d, r]`.
pub fn predict_flat(w: &NetworkWeights<f32>, x: &[f32], n: usize) -> Result<Vec<[f64; 3]>> {
    const CHUNK: usize = 256;
    let len = w.spec.input_len();
    check_input(&w.spec, x.len(), n)?;
    let mut ws = Workspace::default();
    let mut out = Vec::with_capacity(n);
    for chunk in x.chunks(CHUNK * len) {
        let b = chunk.len() / len;
        forward_batch(w, chunk, b, &mut ws)?;
        out.extend(ws.out.chunks(OUTPUTS).map(|o| [f64::from(o[0]), f64::from(o[1]), f64::from(o[2])]));
    }
    Ok(out)
}
