use super::kernels::{self, Geometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MatMul(Var, Var),
    Sum(Var),
    Reshape(Var),
    Dense {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    AddChannel {
        x: Var,
        bias: Var,
    },
    BroadcastOuter {
        x: Var,
        scale: Var,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    Depthwise {
        x: Var,
        weight: Var,
        geom: Geometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// normalized input, kept for the backward pass
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// false when statistics were fixed (eval mode)
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: Geometry,
    },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Per-channel statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// biased (population) variance
    pub var: Vec<f64>,
    /// number of elements each statistic was computed over
    pub count: usize,
}

/// Dynamically recorded computation. Values are appended in evaluation
/// order, so the node list is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    spent: bool,
    track_patterns: bool,
    pattern: Vec<u64>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Zero-initialise `slot` if needed and hand the buffer to `f`.
fn acc_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Split a `[N, C, ...]` shape into `(N, C, rest)`.
fn channel_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!(
            "{what} expects at least [N, C], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!("{what} expects [N,C,H,W], got {shape:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a fingerprint of every ReLU mask and max-pool selection so
    /// that gradient checks can detect kink crossings.
    pub fn with_pattern_tracking() -> Self {
        Tape {
            track_patterns: true,
            ..Self::default()
        }
    }

    pub fn pattern(&self) -> &[u64] {
        &self.pattern
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} is not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape(), g.clone()).ok()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if self.spent {
            return Err(Error::State(
                "cannot record on a tape after backward()".into(),
            ));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = &self.node(a)?.value;
        let value = Tensor::new(t.shape(), t.data().iter().map(|x| x * s).collect())?;
        self.push(value, &[a], Op::Scale(a, s))
    }

    /// Rectified linear unit; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let value = Tensor::new(t.shape(), t.data().iter().map(|&x| x.max(0.0)).collect())?;
        if self.track_patterns {
            let bits: Vec<u64> = t.data().iter().map(|&x| u64::from(x > 0.0)).collect();
            self.pattern.extend(bits);
        }
        self.push(value, &[a], Op::Relu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(Error::dim(format!("matmul of {sa:?} by {sb:?}")));
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(m, k, n, ta.data(), tb.data(), &mut out);
        self.push(Tensor::new(&[m, n], out)?, &[a, b], Op::MatMul(a, b))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.node(a)?.value.data().iter().sum();
        self.push(Tensor::scalar(total), &[a], Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(a)?.value.clone().reshape(shape)?;
        self.push(value, &[a], Op::Reshape(a))
    }

    /// Collapse everything after the batch axis: `[N, ...] -> [N, D]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.node(a)?.value.shape().to_vec();
        let n = *shape.first().ok_or_else(|| Error::dim("flatten of a scalar"))?;
        let d = shape[1..].iter().product();
        self.reshape(a, &[n, d])
    }

    /// Affine map `x · Wᵀ + b` with `x [N, D_in]`, `W [D_out, D_in]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (&self.node(x)?.value, &self.node(weight)?.value);
        let (n, d_in, d_out) = match (tx.shape(), tw.shape()) {
            (&[n, d], &[o, d2]) if d == d2 => (n, d, o),
            (sx, sw) => {
                return Err(Error::dim(format!(
                    "dense: input {sx:?} incompatible with weight {sw:?}"
                )));
            }
        };
        let mut out = vec![0.0; n * d_out];
        if let Some(b) = bias {
            let tb = &self.node(b)?.value;
            if tb.shape() != [d_out] {
                return Err(Error::dim(format!(
                    "dense: bias {:?} for {d_out} outputs",
                    tb.shape()
                )));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(tb.data());
            }
        }
        kernels::gemm_nt_acc(n, d_in, d_out, tx.data(), tw.data(), &mut out);
        let inputs: Vec<Var> = [Some(x), Some(weight), bias].into_iter().flatten().collect();
        self.push(
            Tensor::new(&[n, d_out], out)?,
            &inputs,
            Op::Dense { x, weight, bias },
        )
    }

    /// `out[n, c, ...] = x[n, c, ...] + bias[c]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.node(x)?.value, &self.node(bias)?.value);
        let (n, c, rest) = channel_dims(tx.shape(), "add_channel")?;
        if tb.shape() != [c] {
            return Err(Error::dim(format!(
                "add_channel: bias {:?} for {c} channels",
                tb.shape()
            )));
        }
        let mut out = tx.data().to_vec();
        for ni in 0..n {
            for (ci, &b) in tb.data().iter().enumerate() {
                let off = (ni * c + ci) * rest;
                out[off..off + rest].iter_mut().for_each(|v| *v += b);
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.push(value, &[x, bias], Op::AddChannel { x, bias })
    }

    /// Outer broadcast of a single-channel map against per-channel factors:
    /// `out[n, c, ...] = x[n, 0, ...] · scale[c]`.
    pub fn broadcast_outer(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (tx, ts) = (&self.node(x)?.value, &self.node(scale)?.value);
        let (n, one, rest) = channel_dims(tx.shape(), "broadcast_outer")?;
        if one != 1 || ts.rank() != 1 {
            return Err(Error::dim(format!(
                "broadcast_outer: expects [N,1,...] and [C], got {:?} and {:?}",
                tx.shape(),
                ts.shape()
            )));
        }
        let c = ts.len();
        let mut out = Vec::with_capacity(n * c * rest);
        for ni in 0..n {
            let src = &tx.data()[ni * rest..(ni + 1) * rest];
            for &s in ts.data() {
                out.extend(src.iter().map(|v| v * s));
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[1] = c;
        let value = Tensor::new(&shape, out)?;
        self.push(value, &[x, scale], Op::BroadcastOuter { x, scale })
    }

    /// Cross-correlation with zero padding: `x [N,C_in,H,W]`,
    /// `weight [C_out,C_in,k,k]`, optional `bias [C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (&self.node(x)?.value, &self.node(weight)?.value);
        let (n, c_in, h, w) = nchw(tx.shape(), "conv2d input")?;
        let (c_out, wc_in, k, k2) = nchw(tw.shape(), "conv2d weight")?;
        if wc_in != c_in || k != k2 {
            return Err(Error::dim(format!(
                "conv2d: weight {:?} does not fit input {:?}",
                tw.shape(),
                tx.shape()
            )));
        }
        let geom = Geometry::new(c_in, h, w, k, stride, padding)?;
        let tb = match bias {
            Some(b) => {
                let tb = &self.node(b)?.value;
                if tb.shape() != [c_out] {
                    return Err(Error::dim(format!(
                        "conv2d: bias {:?} for {c_out} filters",
                        tb.shape()
                    )));
                }
                Some(tb.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, n, c_out, tx.data(), tw.data(), tb);
        let value = Tensor::new(&[n, c_out, geom.h_out, geom.w_out], out)?;
        let inputs: Vec<Var> = [Some(x), Some(weight), bias].into_iter().flatten().collect();
        self.push(
            value,
            &inputs,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Per-channel convolution: `x [N,C,H,W]`, `weight [C,k,k]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (&self.node(x)?.value, &self.node(weight)?.value);
        let (n, c, h, w) = nchw(tx.shape(), "depthwise input")?;
        let (k, wc) = match *tw.shape() {
            [wc, k, k2] if k == k2 => (k, wc),
            _ => {
                return Err(Error::dim(format!(
                    "depthwise weight must be [C,k,k], got {:?}",
                    tw.shape()
                )))
            }
        };
        if wc != c {
            return Err(Error::dim(format!(
                "depthwise: weight has {wc} channels, input has {c}"
            )));
        }
        let geom = Geometry::new(c, h, w, k, stride, padding)?;
        let out = kernels::depthwise_forward(&geom, n, tx.data(), tw.data());
        let value = Tensor::new(&[n, c, geom.h_out, geom.w_out], out)?;
        self.push(value, &[x, weight], Op::Depthwise { x, weight, geom })
    }

    /// Batch normalization with statistics taken from the batch itself.
    /// Works on `[N, C, ...]`; statistics are per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let tx = &self.node(x)?.value;
        let (n, c, rest) = channel_dims(tx.shape(), "batch_norm")?;
        let count = n * rest;
        if count < 2 {
            return Err(Error::contract(format!(
                "training-mode batch norm needs at least 2 values per channel, got {count}"
            )));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let off = (ni * c + ci) * rest;
                s += tx.data()[off..off + rest].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut sq = 0.0;
            for ni in 0..n {
                let off = (ni * c + ci) * rest;
                sq += tx.data()[off..off + rest]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ci] = m;
            var[ci] = sq / count as f64;
        }
        let out = self.normalize(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.normalize(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (tg, tb) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let (n, c, rest) = channel_dims(tx.shape(), "batch_norm")?;
        if tg.shape() != [c] || tb.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::dim(format!(
                "batch_norm: per-channel parameters must have length {c}"
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * rest;
                let (g, b, m, s) = (tg.data()[ci], tb.data()[ci], mean[ci], inv_std[ci]);
                for i in off..off + rest {
                    let h = (tx.data()[i] - m) * s;
                    xhat[i] = h;
                    out[i] = g * h + b;
                }
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.push(
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (n, c, h, w) = nchw(tx.shape(), "max_pool")?;
        let geom = Geometry::new(c, h, w, k, stride, 0)?;
        let (out, argmax) = kernels::max_pool_forward(&geom, n, tx.data());
        if self.track_patterns {
            self.pattern.extend(argmax.iter().map(|&i| i as u64));
        }
        let value = Tensor::new(&[n, c, geom.h_out, geom.w_out], out)?;
        self.push(value, &[x], Op::MaxPool { x, argmax })
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (n, c, h, w) = nchw(tx.shape(), "avg_pool")?;
        let geom = Geometry::new(c, h, w, k, stride, 0)?;
        let out = kernels::avg_pool_forward(&geom, n, tx.data());
        let value = Tensor::new(&[n, c, geom.h_out, geom.w_out], out)?;
        self.push(value, &[x], Op::AvgPool { x, geom })
    }

    /// `[N,C,H,W] -> [N,C,1,1]` channel means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (n, c, h, w) = nchw(tx.shape(), "global_avg_pool")?;
        let plane = h * w;
        let out = tx
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], out)?;
        self.push(value, &[x], Op::GlobalAvgPool(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.node(logits)?.value;
        let (n, k) = match *t.shape() {
            [n, k] => (n, k),
            _ => {
                return Err(Error::dim(format!(
                    "softmax_cross_entropy expects [N,K] logits, got {:?}",
                    t.shape()
                )))
            }
        };
        if labels.len() != n {
            return Err(Error::dim(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in t.data().chunks(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            loss += z.ln() + max - row[labels[i]];
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(
            value,
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively
    /// over every use of a value; the tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(Error::State("backward() already ran on this tape".into()));
        }
        let loss_node = self.node(loss)?;
        if !loss_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let live = loss_node.requires_grad;
        self.spent = true;
        self.grads = vec![None; self.nodes.len()];
        if !live {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[i];
            backprop_node(&self.nodes, node, g, before);
        }
        Ok(())
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Push `g` (the gradient of `node`) onto the gradient slots of its inputs.
fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let len_of = |v: Var| nodes[v.0].value.len();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if wants(nodes, v) {
                    acc_into(&mut grads[v.0], len_of(v), |d| add_assign(d, g));
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(nodes, *a) {
                acc_into(&mut grads[a.0], len_of(*a), |d| add_assign(d, g));
            }
            if wants(nodes, *b) {
                acc_into(&mut grads[b.0], len_of(*b), |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
                });
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if wants(nodes, a) {
                acc_into(&mut grads[a.0], len_of(a), |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(val(b)) {
                        *d += g * y;
                    }
                });
            }
            if wants(nodes, b) {
                acc_into(&mut grads[b.0], len_of(b), |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(val(a)) {
                        *d += g * x;
                    }
                });
            }
        }
        Op::Scale(a, s) => {
            acc_into(&mut grads[a.0], len_of(*a), |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)
            });
        }
        Op::Relu(a) => {
            acc_into(&mut grads[a.0], len_of(*a), |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            });
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants(nodes, a) {
                acc_into(&mut grads[a.0], m * k, |d| {
                    kernels::gemm_nt_acc(m, n, k, g, val(b), d)
                });
            }
            if wants(nodes, b) {
                acc_into(&mut grads[b.0], k * n, |d| {
                    kernels::gemm_tn_acc(m, k, n, val(a), g, d)
                });
            }
        }
        Op::Sum(a) => {
            let g0 = g[0];
            acc_into(&mut grads[a.0], len_of(*a), |d| {
                d.iter_mut().for_each(|d| *d += g0)
            });
        }
        Op::Reshape(a) => {
            acc_into(&mut grads[a.0], len_of(*a), |d| add_assign(d, g));
        }
        Op::Dense { x, weight, bias } => {
            let sx = nodes[x.0].value.shape();
            let (n, d_in) = (sx[0], sx[1]);
            let d_out = nodes[weight.0].value.shape()[0];
            if wants(nodes, *x) {
                acc_into(&mut grads[x.0], n * d_in, |d| {
                    kernels::gemm_acc(n, d_out, d_in, g, val(*weight), d)
                });
            }
            if wants(nodes, *weight) {
                acc_into(&mut grads[weight.0], d_out * d_in, |d| {
                    kernels::gemm_tn_acc(n, d_out, d_in, g, val(*x), d)
                });
            }
            if let Some(b) = bias.filter(|b| wants(nodes, *b)) {
                acc_into(&mut grads[b.0], d_out, |d| {
                    for row in g.chunks(d_out) {
                        add_assign(d, row);
                    }
                });
            }
        }
        Op::AddChannel { x, bias } => {
            let (n, c, rest) = channel_dims(nodes[x.0].value.shape(), "").unwrap();
            if wants(nodes, *x) {
                acc_into(&mut grads[x.0], len_of(*x), |d| add_assign(d, g));
            }
            if wants(nodes, *bias) {
                acc_into(&mut grads[bias.0], c, |d| {
                    for ni in 0..n {
                        for (ci, dc) in d.iter_mut().enumerate() {
                            let off = (ni * c + ci) * rest;
                            *dc += g[off..off + rest].iter().sum::<f64>();
                        }
                    }
                });
            }
        }
        Op::BroadcastOuter { x, scale } => {
            let (n, _, rest) = channel_dims(nodes[x.0].value.shape(), "").unwrap();
            let s = val(*scale);
            let c = s.len();
            if wants(nodes, *x) {
                acc_into(&mut grads[x.0], len_of(*x), |d| {
                    for ni in 0..n {
                        let dst = &mut d[ni * rest..(ni + 1) * rest];
                        for (ci, &sc) in s.iter().enumerate() {
                            let off = (ni * c + ci) * rest;
                            for (dv, gv) in dst.iter_mut().zip(&g[off..off + rest]) {
                                *dv += gv * sc;
                            }
                        }
                    }
                });
            }
            if wants(nodes, *scale) {
                let xv = val(*x);
                acc_into(&mut grads[scale.0], c, |d| {
                    for ni in 0..n {
                        let src = &xv[ni * rest..(ni + 1) * rest];
                        for (ci, dc) in d.iter_mut().enumerate() {
                            let off = (ni * c + ci) * rest;
                            *dc += src
                                .iter()
                                .zip(&g[off..off + rest])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                });
            }
        }
        Op::Conv2d {
            x,
            weight,
            bias,
            geom,
        } => {
            let n = nodes[x.0].value.shape()[0];
            let c_out = nodes[weight.0].value.shape()[0];
            let mut gx = wants(nodes, *x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; len_of(*x)]));
            let mut gw = wants(nodes, *weight)
                .then(|| grads[weight.0].take().unwrap_or_else(|| vec![0.0; len_of(*weight)]));
            let bias = bias.filter(|b| wants(nodes, *b));
            let mut gb = bias.map(|b| grads[b.0].take().unwrap_or_else(|| vec![0.0; c_out]));
            kernels::conv2d_backward(
                geom,
                n,
                c_out,
                val(*x),
                val(*weight),
                g,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(gx) = gx {
                grads[x.0] = Some(gx);
            }
            if let Some(gw) = gw {
                grads[weight.0] = Some(gw);
            }
            if let (Some(b), Some(gb)) = (bias, gb) {
                grads[b.0] = Some(gb);
            }
        }
        Op::Depthwise { x, weight, geom } => {
            let n = nodes[x.0].value.shape()[0];
            let mut gx = wants(nodes, *x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; len_of(*x)]));
            let mut gw = wants(nodes, *weight)
                .then(|| grads[weight.0].take().unwrap_or_else(|| vec![0.0; len_of(*weight)]));
            kernels::depthwise_backward(
                geom,
                n,
                val(*x),
                val(*weight),
                g,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
            );
            if let Some(gx) = gx {
                grads[x.0] = Some(gx);
            }
            if let Some(gw) = gw {
                grads[weight.0] = Some(gw);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (n, c, rest) = channel_dims(nodes[x.0].value.shape(), "").unwrap();
            let gam = val(*gamma);
            let count = (n * rest) as f64;
            // per-channel Σ dy and Σ dy·x̂
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * rest;
                    for i in off..off + rest {
                        sum_g[ci] += g[i];
                        sum_gx[ci] += g[i] * xhat[i];
                    }
                }
            }
            if wants(nodes, *gamma) {
                acc_into(&mut grads[gamma.0], c, |d| add_assign(d, &sum_gx));
            }
            if wants(nodes, *beta) {
                acc_into(&mut grads[beta.0], c, |d| add_assign(d, &sum_g));
            }
            if wants(nodes, *x) {
                acc_into(&mut grads[x.0], len_of(*x), |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * rest;
                            let scale = gam[ci] * inv_std[ci];
                            if *batch_stats {
                                let mg = sum_g[ci] / count;
                                let mgx = sum_gx[ci] / count;
                                for i in off..off + rest {
                                    d[i] += scale * (g[i] - mg - xhat[i] * mgx);
                                }
                            } else {
                                for i in off..off + rest {
                                    d[i] += scale * g[i];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::MaxPool { x, argmax } => {
            acc_into(&mut grads[x.0], len_of(*x), |d| {
                for (&src, gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
            });
        }
        Op::AvgPool { x, geom } => {
            let n = nodes[x.0].value.shape()[0];
            acc_into(&mut grads[x.0], len_of(*x), |d| {
                kernels::avg_pool_backward(geom, n, g, d)
            });
        }
        Op::GlobalAvgPool(x) => {
            let s = nodes[x.0].value.shape();
            let plane = s[2] * s[3];
            acc_into(&mut grads[x.0], len_of(*x), |d| {
                for (chunk, gv) in d.chunks_mut(plane).zip(g) {
                    let share = gv / plane as f64;
                    chunk.iter_mut().for_each(|v| *v += share);
                }
            });
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels,
        } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = g[0] / n as f64;
            acc_into(&mut grads[logits.0], probs.len(), |d| {
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let target = if j == label { 1.0 } else { 0.0 };
                        d[i * k + j] += scale * (probs[i * k + j] - target);
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let x = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let y = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let s = tape.add(x, y).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let z = tape.constant(Tensor::vector(&[2.0, 3.0]));
        let h = tape.scale(z, 0.5).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, 1.5]);

        let w = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(x, w), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let dot = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(dot).data(), &[11.0]);

        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_examples() {
        // loss = sum(w ⊙ x)
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(&[1.0, 2.0]));
        let x = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(x).is_none());

        // loss = relu(-5 w), w = 1
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(1.0));
        let s = tape.scale(w, -5.0).unwrap();
        let loss = tape.relu(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[0.0]);

        // loss = (w x)^2, w = 2, x = 3
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let x = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(w, x).unwrap();
        let loss = tape.mul(y, y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[36.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));

        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        assert!(matches!(tape.sum(w), Err(Error::State(_))));
    }

    #[test]
    fn reused_values_accumulate() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(&[1.5, -2.0]));
        let a = tape.add(w, w).unwrap();
        let b = tape.mul(a, w).unwrap();
        let loss = tape.sum(b).unwrap();
        tape.backward(loss).unwrap();
        // d/dw sum(2 w^2) = 4 w
        assert_eq!(tape.grad(w).unwrap().data(), &[6.0, -8.0]);
    }

    #[test]
    fn no_recording_without_grad() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0]));
        let b = tape.relu(a).unwrap();
        assert!(!tape.requires_grad(b));
        assert!(matches!(tape.nodes[b.0].op, Op::Leaf));
    }
}
