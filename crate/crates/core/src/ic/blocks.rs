use super::{ic_combine, ic_conv_forward, rough_feature, IcConvParams};
use crate::error::{Error, Result};
use crate::nn::{self, BnStats, ConvParams, Mode};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// two 3×3 convolutions
    Basic,
    /// 1×1, 3×3, 1×1 convolutions
    Bottleneck,
}

impl BlockKind {
    pub fn kernels(self) -> &'static [usize] {
        match self {
            BlockKind::Basic => &[3, 3],
            BlockKind::Bottleneck => &[1, 3, 1],
        }
    }
}

/// Batch-norm parameters bound on a tape plus its persistent statistics.
#[derive(Debug)]
pub struct BnRef<'a> {
    pub gamma: Var,
    pub beta: Var,
    pub stats: &'a mut BnStats,
}

impl BnRef<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        nn::batch_norm(tape, x, self.gamma, self.beta, self.stats, mode)
    }
}

/// A convolution inside a block, plain or with an IC kernel.
#[derive(Clone, Copy, Debug)]
pub enum ConvUnit {
    Plain(ConvParams),
    Ic(IcConvParams),
}

impl ConvUnit {
    pub fn conv(&self) -> &ConvParams {
        match self {
            ConvUnit::Plain(p) => p,
            ConvUnit::Ic(p) => &p.conv,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Plain(p) => nn::conv2d(tape, x, p),
            ConvUnit::Ic(p) => ic_conv_forward(tape, x, p),
        }
    }
}

/// Everything a residual block needs for one forward pass.
#[derive(Debug)]
pub struct BlockParams<'a> {
    pub kind: BlockKind,
    /// main path, one entry per convolution
    pub convs: Vec<ConvUnit>,
    /// BN after each main-path convolution
    pub bns: Vec<BnRef<'a>>,
    /// projection shortcut; identity when absent
    pub shortcut: Option<(ConvParams, BnRef<'a>)>,
    /// BN of the rough-feature combine; its presence makes this an IC block
    pub combine: Option<BnRef<'a>>,
}

impl BlockParams<'_> {
    fn validate(&self, tape: &Tape) -> Result<()> {
        let kernels = self.kind.kernels();
        if self.convs.len() != kernels.len() || self.bns.len() != kernels.len() {
            return Err(Error::dim(format!(
                "{:?} block needs {} convolutions with batch norms, got {} and {}",
                self.kind,
                kernels.len(),
                self.convs.len(),
                self.bns.len()
            )));
        }
        for (unit, &k) in self.convs.iter().zip(kernels) {
            let shape = tape.value(unit.conv().weight).shape();
            if shape.len() != 4 || shape[2] != k || shape[3] != k {
                return Err(Error::dim(format!(
                    "{:?} block expects kernel sizes {kernels:?}, found weight {shape:?}",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Overall spatial stride of the main path.
    pub fn stride(&self) -> usize {
        self.convs.iter().map(|c| c.conv().stride).product()
    }
}

/// Rough feature of the block input, matched to `channels` output channels.
/// When the channel counts differ the channel mean is broadcast.
fn block_rough_feature(tape: &mut Tape, x: Var, stride: usize, channels: usize) -> Result<Var> {
    let rough = rough_feature(tape, x, 3, stride, 1)?;
    let c_in = tape.value(x).shape()[1];
    if c_in == channels {
        return Ok(rough);
    }
    let mean_w = tape.constant(Tensor::full(&[1, c_in, 1, 1], 1.0 / c_in as f64));
    let mean = tape.conv2d(rough, mean_w, None, 1, 0)?;
    let ones = tape.constant(Tensor::ones(&[channels]));
    tape.broadcast_outer(mean, ones)
}

/// `out = ReLU(shortcut(x) + F(a, b))` for IC blocks, `ReLU(shortcut(x) + a)`
/// otherwise, where `a` is the main path output and `b` the rough feature.
pub fn residual_block(tape: &mut Tape, x: Var, mut p: BlockParams<'_>, mode: Mode) -> Result<Var> {
    p.validate(tape)?;
    let last = p.convs.len() - 1;
    let mut h = x;
    for (i, (unit, bn)) in p.convs.iter().zip(p.bns.iter_mut()).enumerate() {
        h = unit.forward(tape, h)?;
        h = bn.apply(tape, h, mode)?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    let a = h;
    let skip = match p.shortcut.as_mut() {
        Some((conv, bn)) => {
            let s = nn::conv2d(tape, x, conv)?;
            bn.apply(tape, s, mode)?
        }
        None => x,
    };
    if tape.value(skip).shape() != tape.value(a).shape() {
        return Err(Error::dim(format!(
            "shortcut shape {:?} does not match block output {:?}",
            tape.value(skip).shape(),
            tape.value(a).shape()
        )));
    }
    let branch = match p.combine.take() {
        Some(bn) => {
            let channels = tape.value(a).shape()[1];
            let b = block_rough_feature(tape, x, p.stride(), channels)?;
            if tape.value(b).shape() != tape.value(a).shape() {
                return Err(Error::dim(format!(
                    "rough feature {:?} does not align with block output {:?}",
                    tape.value(b).shape(),
                    tape.value(a).shape()
                )));
            }
            ic_combine(tape, a, b, Some(bn), mode)?
        }
        None => a,
    };
    let sum = tape.add(skip, branch)?;
    tape.relu(sum)
}

fn checked(p: &BlockParams<'_>, kind: BlockKind, ic: bool) -> Result<()> {
    if p.kind != kind {
        return Err(Error::contract(format!(
            "expected a {kind:?} block, got {:?}",
            p.kind
        )));
    }
    if p.combine.is_some() != ic {
        return Err(Error::contract(if ic {
            "IC block requires a combine batch norm"
        } else {
            "plain block must not carry a combine batch norm"
        }));
    }
    Ok(())
}

pub fn basic_block(tape: &mut Tape, x: Var, p: BlockParams<'_>, mode: Mode) -> Result<Var> {
    checked(&p, BlockKind::Basic, false)?;
    residual_block(tape, x, p, mode)
}

pub fn ic_basic_block(tape: &mut Tape, x: Var, p: BlockParams<'_>, mode: Mode) -> Result<Var> {
    checked(&p, BlockKind::Basic, true)?;
    residual_block(tape, x, p, mode)
}

pub fn bottleneck_block(tape: &mut Tape, x: Var, p: BlockParams<'_>, mode: Mode) -> Result<Var> {
    checked(&p, BlockKind::Bottleneck, false)?;
    residual_block(tape, x, p, mode)
}

/// Bottleneck with the block-input rough feature computed once and combined
/// with the last 1×1 convolution's output.
pub fn ic_bottleneck_block(
    tape: &mut Tape,
    x: Var,
    p: BlockParams<'_>,
    mode: Mode,
) -> Result<Var> {
    checked(&p, BlockKind::Bottleneck, true)?;
    residual_block(tape, x, p, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixture {
        weights: Vec<Tensor>,
        strides: Vec<usize>,
        stats: Vec<BnStats>,
        shortcut: Option<(Tensor, usize)>,
        combine_beta: f64,
    }

    impl Fixture {
        fn bind<'a>(&'a mut self, tape: &mut Tape, kind: BlockKind, ic: bool) -> BlockParams<'a> {
            let n_convs = self.weights.len();
            let (main_stats, rest) = self.stats.split_at_mut(n_convs);
            let mut rest = rest.iter_mut();
            let mut convs = Vec::new();
            let mut bns = Vec::new();
            for ((w, &stride), stats) in self.weights.iter().zip(&self.strides).zip(main_stats) {
                let k = w.shape()[2];
                let c = w.shape()[0];
                convs.push(ConvUnit::Plain(ConvParams {
                    weight: tape.constant(w.clone()),
                    bias: None,
                    stride,
                    padding: k / 2,
                }));
                bns.push(BnRef {
                    gamma: tape.constant(Tensor::ones(&[c])),
                    beta: tape.constant(Tensor::zeros(&[c])),
                    stats,
                });
            }
            let shortcut = self.shortcut.as_ref().map(|(w, stride)| {
                let c = w.shape()[0];
                (
                    ConvParams {
                        weight: tape.constant(w.clone()),
                        bias: None,
                        stride: *stride,
                        padding: 0,
                    },
                    BnRef {
                        gamma: tape.constant(Tensor::ones(&[c])),
                        beta: tape.constant(Tensor::zeros(&[c])),
                        stats: rest.next().unwrap(),
                    },
                )
            });
            let combine = if ic {
                let c = self.weights.last().unwrap().shape()[0];
                Some(BnRef {
                    gamma: tape.constant(Tensor::ones(&[c])),
                    beta: tape.constant(Tensor::full(&[c], self.combine_beta)),
                    stats: rest.next().unwrap(),
                })
            } else {
                None
            };
            BlockParams {
                kind,
                convs,
                bns,
                shortcut,
                combine,
            }
        }
    }

    fn identity_stats(c: usize) -> BnStats {
        let mut s = BnStats::new(c);
        s.epsilon = 0.0;
        s
    }

    fn delta_kernel(c: usize) -> Tensor {
        let mut w = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            w.data_mut()[(i * c + i) * 9 + 4] = 1.0;
        }
        w
    }

    #[test]
    fn zeroed_convs_degenerate_to_plain_residual() {
        let c = 2;
        let mut fx = Fixture {
            weights: vec![Tensor::zeros(&[c, c, 3, 3]), Tensor::zeros(&[c, c, 3, 3])],
            strides: vec![1, 1],
            stats: (0..3).map(|_| identity_stats(c)).collect(),
            shortcut: None,
            combine_beta: -1e3,
        };
        let input = Tensor::from_fn(&[1, c, 4, 4], |i| (i as f64 * 0.7).sin());
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let p = fx.bind(&mut tape, BlockKind::Basic, true);
        let y = ic_basic_block(&mut tape, x, p, Mode::Eval).unwrap();
        let expect: Vec<f64> = input.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn identity_convs_with_suppressed_rough_feature_double_input() {
        let c = 2;
        let mut fx = Fixture {
            weights: vec![delta_kernel(c), delta_kernel(c)],
            strides: vec![1, 1],
            stats: (0..3).map(|_| identity_stats(c)).collect(),
            shortcut: None,
            combine_beta: -1e3,
        };
        let input = Tensor::from_fn(&[1, c, 4, 4], |i| (i % 5) as f64 * 0.3);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let p = fx.bind(&mut tape, BlockKind::Basic, true);
        let y = ic_basic_block(&mut tape, x, p, Mode::Eval).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(input.data()) {
            assert!((o - 2.0 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn downsampling_block_shape() {
        let c = 2;
        let w1 = Tensor::full(&[2 * c, c, 3, 3], 0.1);
        let w2 = Tensor::full(&[2 * c, 2 * c, 3, 3], 0.05);
        let proj = Tensor::full(&[2 * c, c, 1, 1], 0.5);
        let mut fx = Fixture {
            weights: vec![w1, w2],
            strides: vec![2, 1],
            stats: (0..4).map(|_| BnStats::new(2 * c)).collect(),
            shortcut: Some((proj, 2)),
            combine_beta: 0.0,
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, c, 8, 8], |i| (i as f64).cos()));
        let p = fx.bind(&mut tape, BlockKind::Basic, true);
        let y = ic_basic_block(&mut tape, x, p, Mode::Train).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 2 * c, 4, 4]);
    }

    #[test]
    fn bottleneck_shapes_and_checks() {
        let c = 2;
        let mut fx = Fixture {
            weights: vec![
                Tensor::full(&[c, 4 * c, 1, 1], 0.1),
                Tensor::full(&[c, c, 3, 3], 0.1),
                Tensor::full(&[4 * c, c, 1, 1], 0.1),
            ],
            strides: vec![1, 1, 1],
            stats: vec![BnStats::new(c), BnStats::new(c), BnStats::new(4 * c), BnStats::new(4 * c)],
            shortcut: None,
            combine_beta: 0.0,
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4 * c, 5, 5], |i| (i as f64 * 0.1).sin()));
        let p = fx.bind(&mut tape, BlockKind::Bottleneck, true);
        let y = ic_bottleneck_block(&mut tape, x, p, Mode::Train).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4 * c, 5, 5]);

        let p = fx.bind(&mut tape, BlockKind::Bottleneck, true);
        assert!(matches!(
            ic_basic_block(&mut tape, x, p, Mode::Train),
            Err(Error::Contract(_))
        ));
        let p = fx.bind(&mut tape, BlockKind::Bottleneck, true);
        assert!(matches!(
            bottleneck_block(&mut tape, x, p, Mode::Train),
            Err(Error::Contract(_))
        ));
        let p = fx.bind(&mut tape, BlockKind::Basic, false);
        assert!(matches!(
            basic_block(&mut tape, x, p, Mode::Train),
            Err(Error::Dimension(_))
        ));
    }
}
