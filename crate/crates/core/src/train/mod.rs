//! SGD with classical momentum, a step learning-rate schedule, and
//! deterministic train/eval loops.

mod checkpoint;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_images, Augment, ChannelStats, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{self, Mode, ParamRole, ParamStore};
use crate::tensor::{Tape, Tensor};
use crate::zoo::Network;

pub use checkpoint::{decode_params, encode_params, read_params, write_params, PARAMS_MAGIC, PARAMS_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub seed: u64,
    /// skip weight decay on BN affine parameters and `w'`
    #[serde(default)]
    pub exempt_decay: bool,
    /// record elapsed seconds in the per-epoch metrics instead of 0
    #[serde(default)]
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 5,
            batch_size: 64,
            lr_drop_every: 30,
            lr_drop_factor: 0.1,
            seed: 0,
            exempt_decay: false,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return fail(format!(
                "lr drop factor must lie in (0, 1], got {}",
                self.lr_drop_factor
            ));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if self.lr_drop_every == 0 {
            return fail("lr drop interval must be positive".into());
        }
        Ok(())
    }
}

/// `lr0 · factor^⌊epoch / drop_every⌋`
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_drop_factor.powi((epoch / cfg.lr_drop_every) as i32)
}

/// One momentum step on a flat tensor:
/// `g = grad + wd·p; v = μ·v + g; p -= lr·v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    momentum: f64,
    weight_decay: f64,
    lr: f64,
) -> Result<()> {
    if grad.len() != param.len() || velocity.len() != param.len() {
        return Err(Error::dim(format!(
            "sgd step over {} parameters with {} gradients and {} velocities",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum state for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub exempt_decay: bool,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            exempt_decay: cfg.exempt_decay,
            velocity: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Apply the stored gradients with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::dim("optimizer state does not match the parameter store"));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let exempt = self.exempt_decay && matches!(p.role, ParamRole::BnAffine | ParamRole::WPrime);
            let wd = if exempt { 0.0 } else { self.weight_decay };
            sgd_step(p.value.data_mut(), p.grad.data(), v, self.momentum, wd, lr)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,eval_loss,eval_acc,wall_seconds";

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.eval_loss, r.eval_acc, r.wall_seconds
        );
    }
    out
}

/// A dataset with the per-batch transforms applied on the way out.
#[derive(Clone, Debug)]
pub struct Batches<'a> {
    pub data: &'a LabeledDataset,
    pub stats: Option<&'a ChannelStats>,
    pub augment: Option<Augment>,
}

impl<'a> Batches<'a> {
    pub fn plain(data: &'a LabeledDataset) -> Self {
        Batches {
            data,
            stats: None,
            augment: None,
        }
    }

    fn fetch(&self, indices: &[usize], epoch: Option<usize>) -> Result<(Tensor, Vec<usize>)> {
        let (mut x, y) = self.data.batch(indices)?;
        if let (Some(aug), Some(epoch)) = (&self.augment, epoch) {
            aug.apply(&mut x, epoch, indices)?;
        }
        if let Some(stats) = self.stats {
            normalize_images(&mut x, stats)?;
        }
        Ok((x, y))
    }
}

/// Split `order` into consecutive batches; a trailing batch of one sample
/// joins its predecessor so batch statistics stay defined.
fn partition(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count()
}

/// Mean loss and top-1 accuracy in eval mode, without gradients.
pub fn evaluate(net: &mut Network, data: &Batches<'_>, batch_size: usize) -> Result<(f64, f64)> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let order: Vec<usize> = (0..data.data.len()).collect();
    let mut loss_sum = 0.0;
    let mut hits = 0;
    for batch in order.chunks(batch_size) {
        let (x, y) = data.fetch(batch, None)?;
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape, false);
        let input = tape.constant(x);
        let logits = net.forward(&mut tape, &vars, input, Mode::Eval)?;
        let loss = nn::softmax_cross_entropy(&mut tape, logits, &y)?;
        loss_sum += tape.value(loss).item()? * batch.len() as f64;
        hits += correct(tape.value(logits), &y);
    }
    let n = order.len() as f64;
    Ok((loss_sum / n, hits as f64 / n))
}

/// Observer of training progress.
pub trait TrainHooks {
    fn on_batch(&mut self, _epoch: usize, _batch: usize, _loss: f64) {}
    fn on_epoch(&mut self, _record: &MetricsRecord) {}
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// One training step on a batch; returns the loss and number correct.
pub fn train_step(
    net: &mut Network,
    opt: &mut Sgd,
    x: Tensor,
    y: &[usize],
    lr: f64,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let vars = net.params.bind(&mut tape, true);
    let input = tape.constant(x);
    let logits = net.forward(&mut tape, &vars, input, Mode::Train)?;
    let loss = nn::softmax_cross_entropy(&mut tape, logits, y)?;
    let value = tape.value(loss).item()?;
    let hits = correct(tape.value(logits), y);
    if !value.is_finite() {
        return Ok((value, hits));
    }
    tape.backward(loss)?;
    net.params.zero_grads();
    net.params.accumulate_grads(&tape, &vars)?;
    opt.step(&mut net.params, lr)?;
    Ok((value, hits))
}

/// Train for `cfg.epochs` epochs, reshuffling each epoch from `cfg.seed`.
/// Without an `eval` split the training set is evaluated in eval mode.
pub fn train_epochs(
    net: &mut Network,
    train: &Batches<'_>,
    eval: Option<&Batches<'_>>,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let mut opt = Sgd::new(&net.params, cfg);
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    let n = train.data.len();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for (b, batch) in partition(&order, cfg.batch_size).into_iter().enumerate() {
            let (x, y) = train.fetch(batch, Some(epoch))?;
            let (loss, h) = train_step(net, &mut opt, x, &y, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            hooks.on_batch(epoch, b, loss);
            loss_sum += loss * batch.len() as f64;
            hits += h;
        }
        let (eval_loss, eval_acc) = evaluate(net, eval.unwrap_or(train), cfg.batch_size.max(256))?;
        let record = MetricsRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n as f64,
            train_acc: hits as f64 / n as f64,
            eval_loss,
            eval_acc,
            wall_seconds: if cfg.wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        hooks.on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::xor_dataset;
    use crate::zoo::{build_model, LayerKind, LayerSpec, ModelSpec};

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 3,
            batch_size: 4,
            lr_drop_every: 30,
            lr_drop_factor: 0.1,
            seed: 1,
            exempt_decay: false,
            wall_clock: false,
        }
    }

    #[test]
    fn plain_sgd() {
        let mut p = [1.0, -2.0];
        let mut v = [0.0; 2];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.0, 0.0, 0.1).unwrap();
        assert_eq!(p, [0.95, -2.1]);
        assert!(sgd_step(&mut p, &[1.0], &mut v, 0.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn momentum_deltas() {
        let mut p = [0.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.9, 0.0, 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        let before = p[0];
        sgd_step(&mut p, &[1.0], &mut v, 0.9, 0.0, 0.1).unwrap();
        assert!((p[0] - before + 0.19).abs() < 1e-15);
        assert!((v[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.0, 1e-4, 0.1).unwrap();
        assert!((p[0] - (1.0 - 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn step_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.1);
        assert!((lr_at(30, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(59, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(60, &c) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr0: 0.0, ..cfg() },
            TrainConfig { momentum: 1.0, ..cfg() },
            TrainConfig { weight_decay: -1.0, ..cfg() },
            TrainConfig { lr_drop_factor: 0.0, ..cfg() },
            TrainConfig { lr_drop_factor: 1.5, ..cfg() },
            TrainConfig { batch_size: 0, ..cfg() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Contract(_))), "{bad:?}");
        }
        let json = r#"{"lr0":0.1,"momentum":0.9,"weight_decay":0,"epochs":1,"batch_size":2,
            "lr_drop_every":1,"lr_drop_factor":1,"seed":0,"nesterov":true}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    fn xor_net(seed: u64) -> Network {
        let spec = ModelSpec {
            name: "xor".into(),
            input: vec![2],
            layers: vec![
                LayerSpec::dense(1).with_kind(LayerKind::IcDense),
                LayerSpec::new(LayerKind::Relu),
                LayerSpec::dense(2),
            ],
        };
        build_model(&spec, seed).unwrap()
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let ds = xor_dataset();
        let data = Batches::plain(&ds);
        let mut net = xor_net(0);
        let empty = train_epochs(&mut net, &data, None, &TrainConfig { epochs: 0, ..cfg() }, &mut NoHooks).unwrap();
        assert!(empty.is_empty());

        let run = || {
            let mut net = xor_net(3);
            let m = train_epochs(&mut net, &data, None, &TrainConfig { epochs: 20, ..cfg() }, &mut NoHooks).unwrap();
            (m, net.state())
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(metrics_csv(&a), metrics_csv(&b));
        assert_eq!(sa, sb);
        assert_eq!(a.len(), 20);
        assert!(a.iter().enumerate().all(|(i, r)| r.epoch == i + 1));
        assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.train_acc)));
    }

    #[test]
    fn one_hot_network_scores_perfectly() {
        let spec = ModelSpec {
            name: String::new(),
            input: vec![3],
            layers: vec![LayerSpec::dense(3)],
        };
        let mut net = build_model(&spec, 0).unwrap();
        let w = net.params.find("0.weight").unwrap();
        net.params.get_mut(w).value = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let images = Tensor::new(&[3, 3], vec![0.0, 0.0, 5.0, 5.0, 0.0, 0.0, 0.0, 5.0, 0.0]).unwrap();
        let ds = LabeledDataset::new(images, vec![2, 0, 1], 3, "t").unwrap();
        let (_, acc) = evaluate(&mut net, &Batches::plain(&ds), 2).unwrap();
        assert_eq!(acc, 1.0);

        let images = Tensor::zeros(&[10, 3]);
        let ten = ModelSpec {
            name: String::new(),
            input: vec![3],
            layers: vec![LayerSpec::dense(10)],
        };
        let mut uniform = build_model(&ten, 0).unwrap();
        uniform.params.iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
        let ds = LabeledDataset::new(images, (0..10).collect(), 10, "u").unwrap();
        let (loss, _) = evaluate(&mut uniform, &Batches::plain(&ds), 3).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_ignores_batch_partition() {
        let images = Tensor::from_fn(&[11, 4], |i| ((i * 7919) % 13) as f64 - 6.0);
        let ds = LabeledDataset::new(images, (0..11).map(|i| i % 3).collect(), 3, "p").unwrap();
        let spec = ModelSpec {
            name: String::new(),
            input: vec![4],
            layers: vec![LayerSpec::dense(3)],
        };
        let mut net = build_model(&spec, 5).unwrap();
        let (l1, a1) = evaluate(&mut net, &Batches::plain(&ds), 1).unwrap();
        for bs in [2, 3, 11, 64] {
            let (l, a) = evaluate(&mut net, &Batches::plain(&ds), bs).unwrap();
            assert_eq!(a, a1);
            assert!((l - l1).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let ds = xor_dataset();
        let mut net = xor_net(0);
        let w = net.params.find("2.weight").unwrap();
        net.params.get_mut(w).value.data_mut()[0] = f64::NAN;
        let err = train_epochs(&mut net, &Batches::plain(&ds), None, &cfg(), &mut NoHooks).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0, .. }));
    }

    #[test]
    fn w_prime_receives_gradient_when_branch_active() {
        let mut net = xor_net(0);
        // bias the inner branch on for every input
        let b = net.params.find("0.bias_inner").unwrap();
        net.params.get_mut(b).value.data_mut()[0] = 10.0;
        let mut opt = Sgd::new(&net.params, &cfg());
        let ds = xor_dataset();
        let (x, y) = ds.batch(&[0, 1, 2, 3]).unwrap();
        let before = net.params.get(net.params.find("0.w_prime").unwrap()).value.clone();
        train_step(&mut net, &mut opt, x, &y, 0.1).unwrap();
        let id = net.params.find("0.w_prime").unwrap();
        assert!(net.params.get(id).grad.data()[0] != 0.0);
        assert_ne!(net.params.get(id).value, before);
    }

    #[test]
    fn repeated_minibatch_loss_decreases() {
        let mut net = xor_net(2);
        let mut opt = Sgd::new(&net.params, &cfg());
        let ds = xor_dataset();
        let mut losses = Vec::new();
        for _ in 0..40 {
            let (x, y) = ds.batch(&[0, 1, 2, 3]).unwrap();
            losses.push(train_step(&mut net, &mut opt, x, &y, 0.01).unwrap().0);
        }
        assert!(losses[5..].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn partition_merges_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let parts = partition(&order, 4);
        assert_eq!(parts.iter().map(|p| p.len()).collect::<Vec<_>>(), [4, 5]);
        assert_eq!(partition(&order[..1], 4).len(), 1);
    }

    #[test]
    fn decay_exemption() {
        let mut net = xor_net(0);
        net.params.zero_grads();
        let before = net.state();
        let mut opt = Sgd::new(&net.params, &TrainConfig { weight_decay: 0.5, exempt_decay: true, ..cfg() });
        opt.step(&mut net.params, 0.1).unwrap();
        let id = net.params.find("0.w_prime").unwrap();
        assert_eq!(net.params.get(id).value.data()[0], 1.0);
        let w = net.params.find("0.weight").unwrap();
        assert_ne!(net.params.get(w).value, before[w.0].1);
    }
}
