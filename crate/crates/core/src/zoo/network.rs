use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{block_plan, LayerKind, ModelSpec};
use crate::error::{Error, Result};
use crate::ic::{self, BlockParams, BnRef, ConvUnit, IcConvParams, IcDenseParams, IcMode};
use crate::nn::{self, BnStats, ConvParams, Mode, ParamId, ParamRole, ParamStore, PoolKind};
use crate::tensor::{Tape, Tensor, Var};

/// Initial value of every `w'` entry: the unit starts as the plain
/// collision form `σ(Wx − Σx)`.
pub const W_PRIME_INIT: f64 = 1.0;

/// Initial inner bias of IC dense units.
pub const IC_INNER_BIAS_INIT: f64 = 2.0;

/// 64-bit FNV-1a, used to derive a per-parameter seed from its name.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Generator for the parameter called `name`. Parameters that share a name
/// and shape across variants start from identical values.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name.as_bytes()))
}

fn he_normal(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = param_rng(seed, name);
    Tensor::from_fn(shape, |_| normal.sample(&mut rng))
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub ic: Option<(ParamId, IcMode)>,
}

#[derive(Clone, Debug)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnStats,
}

#[derive(Clone, Debug)]
pub struct BlockLayer {
    pub kind: ic::BlockKind,
    pub convs: Vec<ConvLayer>,
    pub bns: Vec<BnLayer>,
    pub shortcut: Option<(ConvLayer, BnLayer)>,
    pub combine: Option<BnLayer>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(ConvLayer),
    Dense {
        weight: ParamId,
        bias: Option<ParamId>,
    },
    IcDense {
        weight: ParamId,
        w_prime: ParamId,
        bias_main: Option<ParamId>,
        bias_inner: Option<ParamId>,
    },
    Bn(BnLayer),
    Relu,
    Flatten,
    /// `kernel == 0` is a global pool
    Pool {
        kind: PoolKind,
        kernel: usize,
        stride: usize,
    },
    Block(BlockLayer),
}

/// A built sequential network: parameters, layer wiring and batch-norm state.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub layers: Vec<Layer>,
    /// per-sample output shape of each layer
    pub shapes: Vec<Vec<usize>>,
    /// parameters registered by each layer
    pub layer_params: Vec<Vec<ParamId>>,
}

struct Builder {
    seed: u64,
    params: ParamStore,
    owned: Vec<ParamId>,
}

impl Builder {
    fn add(&mut self, name: String, role: ParamRole, value: Tensor) -> ParamId {
        let id = self.params.register(name, role, value);
        self.owned.push(id);
        id
    }

    fn conv(
        &mut self,
        prefix: &str,
        (c_in, c_out, k, stride, padding): (usize, usize, usize, usize, usize),
        bias: bool,
        ic: Option<IcMode>,
    ) -> ConvLayer {
        let name = format!("{prefix}.weight");
        let w = he_normal(self.seed, &name, &[c_out, c_in, k, k], c_in * k * k);
        let weight = self.add(name, ParamRole::Weight, w);
        let bias = bias.then(|| {
            self.add(format!("{prefix}.bias"), ParamRole::Bias, Tensor::zeros(&[c_out]))
        });
        let ic = ic.map(|mode| {
            let shape: &[usize] = match mode {
                IcMode::Grouped => &[c_out, c_in],
                IcMode::Scalar => &[c_out],
            };
            let id = self.add(
                format!("{prefix}.w_prime"),
                ParamRole::WPrime,
                Tensor::full(shape, W_PRIME_INIT),
            );
            (id, mode)
        });
        ConvLayer {
            weight,
            bias,
            stride,
            padding,
            ic,
        }
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> BnLayer {
        BnLayer {
            gamma: self.add(
                format!("{prefix}.gamma"),
                ParamRole::BnAffine,
                Tensor::ones(&[channels]),
            ),
            beta: self.add(
                format!("{prefix}.beta"),
                ParamRole::BnAffine,
                Tensor::zeros(&[channels]),
            ),
            stats: BnStats::new(channels),
        }
    }
}

/// Instantiate `spec` with deterministic initialization from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Network> {
    let shapes = spec.infer_shapes()?;
    let mut b = Builder {
        seed,
        params: ParamStore::new(),
        owned: Vec::new(),
    };
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut layer_params = Vec::with_capacity(spec.layers.len());
    let mut in_shape = spec.input.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = i.to_string();
        let built = match layer.kind {
            LayerKind::Conv | LayerKind::IcConv => {
                let k = layer.kernel.unwrap_or(0);
                let geometry = (
                    in_shape[0],
                    shapes[i][0],
                    k,
                    layer.stride_or_default(),
                    layer.padding.unwrap_or(0),
                );
                let ic = (layer.kind == LayerKind::IcConv).then(|| layer.ic_mode_or_default());
                Layer::Conv(b.conv(&p, geometry, layer.has_bias(), ic))
            }
            LayerKind::Dense | LayerKind::IcDense => {
                let (d_in, d_out) = (in_shape[0], shapes[i][0]);
                let name = format!("{p}.weight");
                let w = he_normal(seed, &name, &[d_out, d_in], d_in);
                let weight = b.add(name, ParamRole::Weight, w);
                let bias = layer.has_bias().then(|| {
                    b.add(format!("{p}.bias"), ParamRole::Bias, Tensor::zeros(&[d_out]))
                });
                if layer.kind == LayerKind::Dense {
                    Layer::Dense { weight, bias }
                } else {
                    let w_prime = b.add(
                        format!("{p}.w_prime"),
                        ParamRole::WPrime,
                        Tensor::full(&[d_out], W_PRIME_INIT),
                    );
                    let bias_inner = layer.has_bias().then(|| {
                        b.add(
                            format!("{p}.bias_inner"),
                            ParamRole::Bias,
                            Tensor::full(&[d_out], IC_INNER_BIAS_INIT),
                        )
                    });
                    Layer::IcDense {
                        weight,
                        w_prime,
                        bias_main: bias,
                        bias_inner,
                    }
                }
            }
            LayerKind::Bn => Layer::Bn(b.bn(&p, in_shape[0])),
            LayerKind::Relu => Layer::Relu,
            LayerKind::Flatten => Layer::Flatten,
            LayerKind::Pool => {
                let kernel = layer.kernel.unwrap_or(0);
                Layer::Pool {
                    kind: layer.pool.unwrap_or(PoolKind::Max),
                    kernel,
                    stride: layer.stride.unwrap_or(kernel),
                }
            }
            LayerKind::BasicBlock
            | LayerKind::IcBasicBlock
            | LayerKind::BottleneckBlock
            | LayerKind::IcBottleneckBlock => {
                let plan = block_plan(layer, in_shape[0]).map_err(|m| Error::spec(i, m))?;
                let mode = layer.ic_mode_or_default();
                let mut convs = Vec::new();
                let mut bns = Vec::new();
                for (j, &geometry) in plan.convs.iter().enumerate() {
                    let ic = (plan.ic_layers && geometry.2 >= 2).then_some(mode);
                    convs.push(b.conv(&format!("{p}.conv{j}"), geometry, false, ic));
                    bns.push(b.bn(&format!("{p}.bn{j}"), geometry.1));
                }
                let shortcut = plan.projection.then(|| {
                    let conv = b.conv(
                        &format!("{p}.shortcut"),
                        (plan.c_in, plan.c_out, 1, plan.stride, 0),
                        false,
                        None,
                    );
                    (conv, b.bn(&format!("{p}.shortcut.bn"), plan.c_out))
                });
                let combine = plan
                    .combine
                    .then(|| b.bn(&format!("{p}.combine"), plan.c_out));
                Layer::Block(BlockLayer {
                    kind: plan.kind,
                    convs,
                    bns,
                    shortcut,
                    combine,
                })
            }
        };
        layers.push(built);
        layer_params.push(std::mem::take(&mut b.owned));
        in_shape = shapes[i].clone();
    }
    Ok(Network {
        spec: spec.clone(),
        params: b.params,
        layers,
        shapes,
        layer_params,
    })
}

fn conv_unit(c: &ConvLayer, vars: &[Var]) -> ConvUnit {
    let conv = ConvParams {
        weight: vars[c.weight.0],
        bias: c.bias.map(|b| vars[b.0]),
        stride: c.stride,
        padding: c.padding,
    };
    match c.ic {
        Some((w, mode)) => ConvUnit::Ic(IcConvParams {
            conv,
            w_prime: vars[w.0],
            mode,
        }),
        None => ConvUnit::Plain(conv),
    }
}

fn bn_ref<'a>(bn: &'a mut BnLayer, vars: &[Var]) -> BnRef<'a> {
    BnRef {
        gamma: vars[bn.gamma.0],
        beta: vars[bn.beta.0],
        stats: &mut bn.stats,
    }
}

impl Network {
    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Scalar parameter count of layer `i`.
    pub fn layer_param_count(&self, i: usize) -> usize {
        self.layer_params[i]
            .iter()
            .map(|&id| self.params.get(id).value.len())
            .sum()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(&self.spec.input, |s| s)
    }

    /// Record a forward pass. `vars` are the parameters bound on `tape` in
    /// registration order, as returned by [`ParamStore::bind`].
    pub fn forward(&mut self, tape: &mut Tape, vars: &[Var], x: Var, mode: Mode) -> Result<Var> {
        self.forward_traced(tape, vars, x, mode, None)
    }

    /// As [`Network::forward`], also pushing each layer's output shape
    /// (batch dimension included) into `trace`.
    pub fn forward_traced(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mode: Mode,
        mut trace: Option<&mut Vec<Vec<usize>>>,
    ) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::dim(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let in_shape = tape.value(x).shape();
        if in_shape.len() != self.spec.input.len() + 1 || in_shape[1..] != self.spec.input[..] {
            return Err(Error::dim(format!(
                "network expects [N, {:?}] input, got {in_shape:?}",
                self.spec.input
            )));
        }
        let mut h = x;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Conv(c) => conv_unit(c, vars).forward(tape, h)?,
                Layer::Dense { weight, bias } => {
                    nn::dense(tape, h, vars[weight.0], bias.map(|b| vars[b.0]))?
                }
                Layer::IcDense {
                    weight,
                    w_prime,
                    bias_main,
                    bias_inner,
                } => {
                    let p = IcDenseParams {
                        weight: vars[weight.0],
                        w_prime: vars[w_prime.0],
                        bias_main: bias_main.map(|b| vars[b.0]),
                        bias_inner: bias_inner.map(|b| vars[b.0]),
                    };
                    ic::ic_dense_forward(tape, h, &p, ic::Activation::Identity)?
                }
                Layer::Bn(bn) => {
                    let r = bn_ref(bn, vars);
                    nn::batch_norm(tape, h, r.gamma, r.beta, r.stats, mode)?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::Flatten => tape.flatten(h)?,
                Layer::Pool {
                    kind,
                    kernel,
                    stride,
                } => nn::pool(tape, h, *kind, *kernel, *stride)?,
                Layer::Block(block) => {
                    let p = BlockParams {
                        kind: block.kind,
                        convs: block.convs.iter().map(|c| conv_unit(c, vars)).collect(),
                        bns: block.bns.iter_mut().map(|bn| bn_ref(bn, vars)).collect(),
                        shortcut: block
                            .shortcut
                            .as_mut()
                            .map(|(c, bn)| (*conv_unit(c, vars).conv(), bn_ref(bn, vars))),
                        combine: block.combine.as_mut().map(|bn| bn_ref(bn, vars)),
                    };
                    ic::residual_block(tape, h, p, mode)?
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push(tape.value(h).shape().to_vec());
            }
        }
        Ok(h)
    }

    /// Eval-mode logits for a batch, without gradient recording.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, input, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    fn bn_layers(&self) -> Vec<(String, &BnLayer)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Bn(bn) => out.push((i.to_string(), bn)),
                Layer::Block(block) => {
                    for (j, bn) in block.bns.iter().enumerate() {
                        out.push((format!("{i}.bn{j}"), bn));
                    }
                    if let Some((_, bn)) = &block.shortcut {
                        out.push((format!("{i}.shortcut.bn"), bn));
                    }
                    if let Some(bn) = &block.combine {
                        out.push((format!("{i}.combine"), bn));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Parameters followed by batch-norm running statistics, by name.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = self.params.snapshot();
        for (prefix, bn) in self.bn_layers() {
            out.push((
                format!("{prefix}.running_mean"),
                Tensor::vector(&bn.stats.running_mean),
            ));
            out.push((
                format!("{prefix}.running_var"),
                Tensor::vector(&bn.stats.running_var),
            ));
        }
        out
    }

    /// Inverse of [`Network::state`]; every tensor must be present with a
    /// matching shape.
    pub fn load_state(&mut self, state: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = state
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::dim(format!("state is missing `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::dim(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for p in self.params.iter_mut() {
            p.value = lookup(&p.name, p.value.shape())?;
        }
        let names: Vec<String> = self.bn_layers().into_iter().map(|(n, _)| n).collect();
        let mut bns: Vec<&mut BnLayer> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Bn(bn) => bns.push(bn),
                Layer::Block(block) => {
                    bns.extend(block.bns.iter_mut());
                    if let Some((_, bn)) = &mut block.shortcut {
                        bns.push(bn);
                    }
                    if let Some(bn) = &mut block.combine {
                        bns.push(bn);
                    }
                }
                _ => {}
            }
        }
        for (prefix, bn) in names.iter().zip(bns) {
            let c = bn.stats.channels();
            bn.stats.running_mean = lookup(&format!("{prefix}.running_mean"), &[c])?.into_data();
            bn.stats.running_var = lookup(&format!("{prefix}.running_var"), &[c])?.into_data();
        }
        Ok(())
    }
}
