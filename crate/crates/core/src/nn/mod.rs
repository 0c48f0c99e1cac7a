//! Standard layers as differentiable functions over a [`Tape`].

pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub use params::{Param, ParamId, ParamRole, ParamStore};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Filter bank of a convolution. Cross-correlation, zero padding.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    /// `[C_out, C_in, k, k]`
    pub weight: Var,
    /// `[C_out]`
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

pub fn conv2d(tape: &mut Tape, x: Var, p: &ConvParams) -> Result<Var> {
    tape.conv2d(x, p.weight, p.bias, p.stride, p.padding)
}

/// Channel `c` of the output only sees channel `c` of the input.
pub fn depthwise_conv2d(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    tape.depthwise_conv2d(x, weight, stride, padding)
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Batch norm over `[N, C, ...]`. In training mode the batch statistics are
/// used and folded into the running averages (unbiased variance); in eval mode
/// the running averages are used.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut BnStats,
    mode: Mode,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let (out, batch) = tape.batch_norm_train(x, gamma, beta, stats.epsilon)?;
            let m = stats.momentum;
            let unbias = batch.count as f64 / (batch.count as f64 - 1.0);
            for c in 0..stats.channels() {
                stats.running_mean[c] = (1.0 - m) * stats.running_mean[c] + m * batch.mean[c];
                stats.running_var[c] =
                    (1.0 - m) * stats.running_var[c] + m * batch.var[c] * unbias;
            }
            Ok(out)
        }
        Mode::Eval => tape.batch_norm_eval(
            x,
            gamma,
            beta,
            &stats.running_mean,
            &stats.running_var,
            stats.epsilon,
        ),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pooling without padding; `k = 0` requests a global pool.
pub fn pool(tape: &mut Tape, x: Var, kind: PoolKind, k: usize, stride: usize) -> Result<Var> {
    match (kind, k) {
        (PoolKind::Avg, 0) => tape.global_avg_pool(x),
        (PoolKind::Max, 0) => {
            let shape = tape.value(x).shape().to_vec();
            if shape.len() != 4 || shape[2] != shape[3] {
                return Err(Error::dim(format!(
                    "global max pool needs square [N,C,H,W], got {shape:?}"
                )));
            }
            tape.max_pool(x, shape[2], 1)
        }
        (PoolKind::Max, k) => tape.max_pool(x, k, stride),
        (PoolKind::Avg, k) => tape.avg_pool(x, k, stride),
    }
}

/// Affine map `x · Wᵀ + b`.
pub fn dense(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    tape.dense(x, weight, bias)
}

pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}
