//! Inter-layer collision (IC) units.
//!
//! An IC unit adds a gated branch to an affine map:
//! `y = f(Wx + σ(Wx − w'·Σx))`. The branch is silent whenever the
//! hyperplane term `Wx − w'·Σx` is negative, so the unit contains the plain
//! neuron as a special case. For convolutions, `Σx` becomes the "rough
//! feature": per-channel window sums from an all-one depthwise kernel.

mod blocks;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, BnStats, ConvParams, Mode};
use crate::tensor::{Tape, Tensor, Var};

pub use blocks::{
    basic_block, bottleneck_block, ic_basic_block, ic_bottleneck_block, residual_block,
    BlockKind, BlockParams, BnRef, ConvUnit,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// How `w'` contracts the rough feature in an IC convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcMode {
    /// One weight per (filter, input channel): `w'` is `[C_out, C_in]`.
    #[default]
    Grouped,
    /// One weight per filter against the channel-summed window: `w'` is `[C_out]`.
    Scalar,
}

/// Tape handles of an IC dense layer.
#[derive(Clone, Copy, Debug)]
pub struct IcDenseParams {
    /// `[M, N]`
    pub weight: Var,
    /// `[M]`
    pub w_prime: Var,
    /// added to the main branch, `[M]`
    pub bias_main: Option<Var>,
    /// added inside the gated branch, `[M]`
    pub bias_inner: Option<Var>,
}

/// Plain-value counterpart of [`IcDenseParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct IcDenseWeights {
    pub weight: Tensor,
    pub w_prime: Tensor,
    pub bias_main: Option<Tensor>,
    pub bias_inner: Option<Tensor>,
}

impl IcDenseWeights {
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> IcDenseParams {
        IcDenseParams {
            weight: tape.leaf(self.weight.clone(), requires_grad),
            w_prime: tape.leaf(self.w_prime.clone(), requires_grad),
            bias_main: self
                .bias_main
                .as_ref()
                .map(|b| tape.leaf(b.clone(), requires_grad)),
            bias_inner: self
                .bias_inner
                .as_ref()
                .map(|b| tape.leaf(b.clone(), requires_grad)),
        }
    }

    fn check(&self, input_dim: usize) -> Result<(usize, usize)> {
        let (m, n) = match *self.weight.shape() {
            [m, n] => (m, n),
            _ => return Err(Error::dim("IC dense weight must be [M, N]")),
        };
        if n != input_dim {
            return Err(Error::dim(format!(
                "IC dense weight expects {n} inputs, got {input_dim}"
            )));
        }
        let vec_ok = |t: &Tensor| t.shape() == [m];
        if !vec_ok(&self.w_prime)
            || !self.bias_main.as_ref().is_none_or(vec_ok)
            || !self.bias_inner.as_ref().is_none_or(vec_ok)
        {
            return Err(Error::dim(format!(
                "w' and biases must have length {m}"
            )));
        }
        Ok((m, n))
    }
}

/// `y = f(Wx + b₁ + σ(Wx − w'·Σx + b₂))` for `x [B, N]`, giving `[B, M]`.
pub fn ic_dense_forward(
    tape: &mut Tape,
    x: Var,
    p: &IcDenseParams,
    f: Activation,
) -> Result<Var> {
    let n = match *tape.value(x).shape() {
        [_, n] => n,
        ref s => return Err(Error::dim(format!("IC dense input must be [B, N], got {s:?}"))),
    };
    let m = tape.value(p.weight).shape()[0];
    if tape.value(p.w_prime).shape() != [m] {
        return Err(Error::dim(format!(
            "w' has shape {:?}, expected [{m}]",
            tape.value(p.w_prime).shape()
        )));
    }
    let wx = tape.dense(x, p.weight, None)?;
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    let x_sum = tape.matmul(x, ones)?;
    let pulled = tape.broadcast_outer(x_sum, p.w_prime)?;
    let mut inner = tape.sub(wx, pulled)?;
    if let Some(b2) = p.bias_inner {
        inner = tape.add_channel(inner, b2)?;
    }
    let mut main = wx;
    if let Some(b1) = p.bias_main {
        main = tape.add_channel(main, b1)?;
    }
    let gate = tape.relu(inner)?;
    let pre = tape.add(main, gate)?;
    f.record(tape, pre)
}

/// Branch form of the IC neuron: on the side `H ≥ 0` of the hyperplane the
/// unit is the affine map `2Wx − w'·Σx (+ b₁ + b₂)`, on the other side it is
/// the plain neuron. Evaluated directly, without the tape.
pub fn ic_dense_piecewise(x: &Tensor, w: &IcDenseWeights, f: Activation) -> Result<Tensor> {
    let (batch, n) = match *x.shape() {
        [b, n] => (b, n),
        _ => return Err(Error::dim(format!("input must be [B, N], got {:?}", x.shape()))),
    };
    let (m, _) = w.check(n)?;
    let mut out = Vec::with_capacity(batch * m);
    for row in x.data().chunks(n) {
        let x_sum: f64 = row.iter().sum();
        for j in 0..m {
            let weights = &w.weight.data()[j * n..(j + 1) * n];
            let wx: f64 = weights.iter().zip(row).map(|(a, b)| a * b).sum();
            let b1 = w.bias_main.as_ref().map_or(0.0, |b| b.data()[j]);
            let b2 = w.bias_inner.as_ref().map_or(0.0, |b| b.data()[j]);
            let wp = w.w_prime.data()[j];
            let h = wx - wp * x_sum + b2;
            let pre = if h >= 0.0 {
                2.0 * wx - wp * x_sum + b1 + b2
            } else {
                wx + b1
            };
            out.push(f.apply(pre));
        }
    }
    Tensor::new(&[batch, m], out)
}

/// Per-channel sliding-window sums, i.e. a depthwise convolution with
/// all-one `k×k` kernels. Gradient flows to `x`.
pub fn rough_feature(
    tape: &mut Tape,
    x: Var,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let c = match *tape.value(x).shape() {
        [_, c, _, _] => c,
        ref s => return Err(Error::dim(format!("rough feature input must be [N,C,H,W], got {s:?}"))),
    };
    let ones = tape.constant(Tensor::ones(&[c, k, k]));
    tape.depthwise_conv2d(x, ones, stride, padding)
}

/// A convolution with an IC kernel `[w, w']`.
#[derive(Clone, Copy, Debug)]
pub struct IcConvParams {
    pub conv: ConvParams,
    /// `[C_out, C_in]` in grouped mode, `[C_out]` in scalar mode
    pub w_prime: Var,
    pub mode: IcMode,
}

/// `u = w*X + σ(w*X − contraction(rough(X), w'))`, same shape as `w*X`.
pub fn ic_conv_forward(tape: &mut Tape, x: Var, p: &IcConvParams) -> Result<Var> {
    let (c_out, c_in, k) = match *tape.value(p.conv.weight).shape() {
        [o, i, k, _] => (o, i, k),
        ref s => return Err(Error::dim(format!("conv weight must be [C_out,C_in,k,k], got {s:?}"))),
    };
    if k < 2 {
        return Err(Error::contract(
            "IC structure is not applied to 1x1 convolutions: the rough feature of a 1x1 window is the pixel itself",
        ));
    }
    let expected: &[usize] = match p.mode {
        IcMode::Grouped => &[c_out, c_in],
        IcMode::Scalar => &[c_out],
    };
    if tape.value(p.w_prime).shape() != expected {
        return Err(Error::dim(format!(
            "w' has shape {:?}, expected {expected:?} for {:?} mode",
            tape.value(p.w_prime).shape(),
            p.mode
        )));
    }
    let main = nn::conv2d(tape, x, &p.conv)?;
    let rough = rough_feature(tape, x, k, p.conv.stride, p.conv.padding)?;
    let pulled = match p.mode {
        IcMode::Grouped => {
            let w = tape.reshape(p.w_prime, &[c_out, c_in, 1, 1])?;
            tape.conv2d(rough, w, None, 1, 0)?
        }
        IcMode::Scalar => {
            let ones = tape.constant(Tensor::ones(&[1, c_in, 1, 1]));
            let total = tape.conv2d(rough, ones, None, 1, 0)?;
            tape.broadcast_outer(total, p.w_prime)?
        }
    };
    let inner = tape.sub(main, pulled)?;
    let gate = tape.relu(inner)?;
    tape.add(main, gate)
}

/// `F(a, b) = a + σ(BN(a + b))`, or `a + σ(a + b)` without BN.
pub fn ic_combine(
    tape: &mut Tape,
    a: Var,
    b: Var,
    bn: Option<BnRef<'_>>,
    mode: Mode,
) -> Result<Var> {
    let mut s = tape.add(a, b)?;
    if let Some(bn) = bn {
        s = nn::batch_norm(tape, s, bn.gamma, bn.beta, bn.stats, mode)?;
    }
    let gate = tape.relu(s)?;
    tape.add(a, gate)
}

/// Convenience for binding an ad-hoc BN on a tape.
pub fn bn_identity(tape: &mut Tape, channels: usize, requires_grad: bool) -> (Var, Var, BnStats) {
    let g = tape.leaf(Tensor::ones(&[channels]), requires_grad);
    let b = tape.leaf(Tensor::zeros(&[channels]), requires_grad);
    (g, b, BnStats::new(channels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_weights(w: &[f64], wp: f64) -> IcDenseWeights {
        IcDenseWeights {
            weight: Tensor::new(&[1, w.len()], w.to_vec()).unwrap(),
            w_prime: Tensor::vector(&[wp]),
            bias_main: None,
            bias_inner: None,
        }
    }

    fn run_dense(x: &[f64], w: &IcDenseWeights, f: Activation) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[1, x.len()], x.to_vec()).unwrap());
        let p = w.bind(&mut tape, false);
        let y = ic_dense_forward(&mut tape, xv, &p, f).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn ic_dense_active_branch() {
        let w = dense_weights(&[0.5, 0.5], 0.25);
        let y = run_dense(&[1.0, 2.0], &w, Activation::Identity);
        assert!((y[0] - 2.25).abs() < 1e-12);
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let pw = ic_dense_piecewise(&x, &w, Activation::Identity).unwrap();
        assert!((pw.data()[0] - 2.25).abs() < 1e-12);
    }

    #[test]
    fn ic_dense_inactive_branch_is_plain_neuron() {
        let w = dense_weights(&[0.5, 0.5], 10.0);
        let y = run_dense(&[1.0, 2.0], &w, Activation::Identity);
        assert_eq!(y[0], 1.5);
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let pw = ic_dense_piecewise(&x, &w, Activation::Identity).unwrap();
        assert_eq!(pw.data()[0], 1.5);
    }

    #[test]
    fn xor_solution_from_figure_weights() {
        let w = IcDenseWeights {
            weight: Tensor::new(&[1, 2], vec![0.2805, 0.2805]).unwrap(),
            w_prime: Tensor::vector(&[1.0]),
            bias_main: Some(Tensor::vector(&[-0.3506])),
            bias_inner: Some(Tensor::vector(&[0.6463])),
        };
        let expect = [
            ([0.0, 0.0], 0.2957),
            ([1.0, 1.0], 0.2104),
            ([1.0, 0.0], 0.0),
            ([0.0, 1.0], 0.0),
        ];
        for (x, y) in expect {
            let got = run_dense(&x, &w, Activation::Relu)[0];
            assert!((got - y).abs() < 1e-12, "{x:?}: {got} vs {y}");
        }
    }

    #[test]
    fn ic_dense_dimension_errors() {
        let w = dense_weights(&[0.5, 0.5], 0.25);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let p = w.bind(&mut tape, false);
        assert!(matches!(
            ic_dense_forward(&mut tape, x, &p, Activation::Identity),
            Err(Error::Dimension(_))
        ));
        assert!(ic_dense_piecewise(&Tensor::zeros(&[1, 3]), &w, Activation::Identity).is_err());
    }

    #[test]
    fn rough_feature_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let r = rough_feature(&mut tape, x, 3, 1, 0).unwrap();
        assert_eq!(tape.value(r).data(), &[9.0]);

        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0));
        let r = rough_feature(&mut tape, x, 3, 1, 0).unwrap();
        assert_eq!(tape.value(r).data(), &[45.0]);

        let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let r = rough_feature(&mut tape, x, 3, 1, 0).unwrap();
        assert_eq!(tape.value(r).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(r).data(), &[9.0; 4]);
    }

    fn ic_conv_single(wp: f64) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 0.1));
        let w_prime = tape.constant(Tensor::new(&[1, 1], vec![wp]).unwrap());
        let p = IcConvParams {
            conv: ConvParams {
                weight: w,
                bias: None,
                stride: 1,
                padding: 0,
            },
            w_prime,
            mode: IcMode::Grouped,
        };
        let y = ic_conv_forward(&mut tape, x, &p).unwrap();
        tape.value(y).data()[0]
    }

    #[test]
    fn ic_conv_examples() {
        assert!((ic_conv_single(0.05) - 1.35).abs() < 1e-12);
        assert!((ic_conv_single(10.0) - 0.9).abs() < 1e-12);
        assert!((ic_conv_single(0.0) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn ic_conv_rejects_pointwise_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
        let w = tape.constant(Tensor::ones(&[4, 2, 1, 1]));
        let w_prime = tape.constant(Tensor::ones(&[4, 2]));
        let p = IcConvParams {
            conv: ConvParams {
                weight: w,
                bias: None,
                stride: 1,
                padding: 0,
            },
            w_prime,
            mode: IcMode::Grouped,
        };
        assert!(matches!(ic_conv_forward(&mut tape, x, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn ic_conv_scalar_mode_shape_check() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::full(&[3, 2, 3, 3], 0.01));
        let conv = ConvParams {
            weight: w,
            bias: None,
            stride: 1,
            padding: 1,
        };
        let grouped_wp = tape.constant(Tensor::ones(&[3, 2]));
        let bad = IcConvParams {
            conv,
            w_prime: grouped_wp,
            mode: IcMode::Scalar,
        };
        assert!(matches!(ic_conv_forward(&mut tape, x, &bad), Err(Error::Dimension(_))));
        let wp = tape.constant(Tensor::vector(&[0.0, 0.01, 1.0]));
        let p = IcConvParams {
            conv,
            w_prime: wp,
            mode: IcMode::Scalar,
        };
        let y = ic_conv_forward(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 4, 4]);
        // centre pixel: main = 18·0.01, window total = 18
        let centre = |c: usize| tape.value(y).data()[c * 16 + 5];
        assert!((centre(0) - 0.36).abs() < 1e-12);
        assert!((centre(1) - 0.36 + 0.18).abs() < 1e-12);
        assert!((centre(2) - 0.18).abs() < 1e-12);
    }

    #[test]
    fn combine_examples() {
        let mut tape = Tape::new();
        let cases = [(1.0, -2.0, 1.0), (1.0, 0.5, 2.5), (0.0, 0.0, 0.0)];
        for (a, b, expect) in cases {
            let av = tape.constant(Tensor::scalar(a));
            let bv = tape.constant(Tensor::scalar(b));
            let y = ic_combine(&mut tape, av, bv, None, Mode::Eval).unwrap();
            assert_eq!(tape.value(y).data(), &[expect]);
        }
        let av = tape.constant(Tensor::zeros(&[2]));
        let bv = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            ic_combine(&mut tape, av, bv, None, Mode::Eval),
            Err(Error::Dimension(_))
        ));
    }
}
