//! Reusable experiment drivers shared by the CLI and the test suites.

use serde::Serialize;

use crate::data::{channel_stats, xor_dataset, Splits};
use crate::error::Result;
use crate::geometry::TwoInputNeuron;
use crate::ic::{Activation, IcDenseWeights};
use crate::train::{self, Batches, MetricsRecord, NoHooks, TrainConfig};
use crate::zoo::{build_model, LayerKind, LayerSpec, ModelSpec, Network, Variant};

/// One neuron on two inputs followed by a two-class linear readout.
///
/// The standard neuron is `σ(w·x + b)`. The IC neuron is
/// `w·x + b₁ + σ(w·x − w'·Σx + b₂)`, so each carries exactly one ReLU.
pub fn xor_spec(ic: bool) -> ModelSpec {
    let layers = if ic {
        vec![LayerSpec::dense(1).with_kind(LayerKind::IcDense), LayerSpec::dense(2)]
    } else {
        vec![LayerSpec::dense(1), LayerSpec::new(LayerKind::Relu), LayerSpec::dense(2)]
    };
    ModelSpec {
        name: if ic { "xor-ic" } else { "xor-relu" }.into(),
        input: vec![2],
        layers,
    }
}

pub fn xor_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        lr0: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        epochs: steps,
        batch_size: 4,
        lr_drop_every: steps.max(1),
        lr_drop_factor: 1.0,
        seed,
        exempt_decay: false,
        wall_clock: false,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct XorRun {
    pub seed: u64,
    pub ic_accuracy: f64,
    pub relu_accuracy: f64,
    pub ic_final_loss: f64,
    pub relu_final_loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct XorReport {
    pub steps: usize,
    pub runs: Vec<XorRun>,
    pub ic_successes: usize,
    pub relu_successes: usize,
    pub relu_max_accuracy: f64,
}

/// Full-batch training of one model on the four XOR points; returns the
/// trained network and its final eval-mode `(loss, accuracy)`.
pub fn train_xor(ic: bool, seed: u64, steps: usize) -> Result<(Network, f64, f64)> {
    let ds = xor_dataset();
    let mut net = build_model(&xor_spec(ic), seed)?;
    let cfg = xor_config(seed, steps);
    let metrics = train::train_epochs(&mut net, &Batches::plain(&ds), None, &cfg, &mut NoHooks)?;
    let (loss, acc) = match metrics.last() {
        Some(m) => (m.eval_loss, m.eval_acc),
        None => train::evaluate(&mut net, &Batches::plain(&ds), 4)?,
    };
    Ok((net, loss, acc))
}

/// Train the IC and the plain neuron on XOR for each seed in `seeds`.
pub fn xor_experiment(seeds: &[u64], steps: usize) -> Result<XorReport> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (_, ic_loss, ic_acc) = train_xor(true, seed, steps)?;
        let (_, relu_loss, relu_acc) = train_xor(false, seed, steps)?;
        runs.push(XorRun {
            seed,
            ic_accuracy: ic_acc,
            relu_accuracy: relu_acc,
            ic_final_loss: ic_loss,
            relu_final_loss: relu_loss,
        });
    }
    Ok(XorReport {
        steps,
        ic_successes: runs.iter().filter(|r| r.ic_accuracy == 1.0).count(),
        relu_successes: runs.iter().filter(|r| r.relu_accuracy == 1.0).count(),
        relu_max_accuracy: runs.iter().map(|r| r.relu_accuracy).fold(0.0, f64::max),
        runs,
    })
}

/// The trained IC neuron of an XOR network as a two-input region-map source.
pub fn xor_neuron(net: &Network) -> Result<TwoInputNeuron> {
    let get = |name: &str| net.params.find(name).map(|id| net.params.get(id).value.clone());
    let weights = IcDenseWeights {
        weight: get("0.weight").ok_or_else(|| crate::Error::contract("not an IC XOR network"))?,
        w_prime: get("0.w_prime").ok_or_else(|| crate::Error::contract("not an IC XOR network"))?,
        bias_main: get("0.bias"),
        bias_inner: get("0.bias_inner"),
    };
    TwoInputNeuron::from_ic_weights(&weights, Activation::Identity)
}

/// Per-epoch metrics of one variant trained from one seed.
#[derive(Clone, Debug, Serialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Vec<MetricsRecord>,
}

/// Train all three variants of `spec` for every seed with the same data,
/// normalization and schedule. `cfg.seed` is replaced by each seed.
pub fn variant_comparison(
    spec: &ModelSpec,
    splits: &Splits,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<VariantRun>> {
    let stats = channel_stats(&splits.train.images)?;
    let train = Batches {
        data: &splits.train,
        stats: Some(&stats),
        augment: None,
    };
    let eval = Batches {
        data: &splits.test,
        stats: Some(&stats),
        augment: None,
    };
    let mut runs = Vec::new();
    for &seed in seeds {
        for variant in Variant::ALL {
            let mut net = build_model(&spec.variant(variant)?, seed)?;
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let metrics = train::train_epochs(&mut net, &train, Some(&eval), &cfg, &mut NoHooks)?;
            runs.push(VariantRun {
                variant,
                seed,
                metrics,
            });
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor_report_counts() {
        let report = xor_experiment(&[0, 1], 300).unwrap();
        assert_eq!(report.runs.len(), 2);
        assert!(report.relu_max_accuracy <= 0.75);
        assert_eq!(report.relu_successes, 0);
    }

    #[test]
    fn trained_neuron_region_map() {
        let (net, _, _) = train_xor(true, 0, 50).unwrap();
        let n = xor_neuron(&net).unwrap();
        let id = net.params.find("0.weight").unwrap();
        assert_eq!(n.a[0], net.params.get(id).value.data()[0]);
    }
}
