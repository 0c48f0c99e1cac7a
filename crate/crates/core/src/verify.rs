//! Property checks behind `icnet verify` and the acceptance suite.
//!
//! Each check draws its random cases from a seeded generator and returns a
//! [`CheckOutcome`]; a failed property is reported, not raised, so a caller
//! can print a full table before deciding on an exit status.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::xor_experiment;
use crate::geometry::{
    collision_transmit, collision_velocities, default_sweep_grid, rotation_sweep, CollisionInput,
};
use crate::ic::{self, Activation, IcConvParams, IcDenseWeights, IcMode};
use crate::nn::{self, ConvParams, Mode, PoolKind};
use crate::tensor::gradcheck::{finite_diff_check, kink_crossing, GradCheckReport};
use crate::tensor::{Tape, Tensor};
use crate::zoo::{build_model, cost_report, paired_variants, LayerKind, LayerSpec, ModelSpec, Variant};

pub const EQUIVALENCE_TOL: f64 = 1e-12;
pub const GRADCHECK_EPS: f64 = 1e-3;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const COLLISION_TOL: f64 = 1e-10;

/// Names accepted by `icnet verify --check`.
pub const CHECK_NAMES: [&str; 8] = [
    "equivalence",
    "reduction",
    "gradcheck",
    "overhead",
    "hyperplane",
    "collision",
    "shapes",
    "xor",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(check: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            check: check.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// `Ok(())` on success, otherwise the failure as a property violation.
    pub fn into_result(self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::PropertyViolation {
                check: self.check,
                detail: self.detail,
            })
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {:<34} {}", self.check, self.detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * normal(rng))
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Tape forward of random 8-input, 4-output IC dense layers against their
/// two-branch form.
pub fn dense_equivalence(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let (m, n) = (4, 8);
    for t in 0..trials {
        let batch = rng.random_range(1..=4);
        let scale = 10f64.powf(rng.random_range(-1.0..1.0));
        let weights = IcDenseWeights {
            weight: random_tensor(&mut rng, &[m, n], 1.0),
            w_prime: random_tensor(&mut rng, &[m], 1.0),
            bias_main: rng.random_bool(0.5).then(|| random_tensor(&mut rng, &[m], 1.0)),
            bias_inner: rng.random_bool(0.5).then(|| random_tensor(&mut rng, &[m], 1.0)),
        };
        let f = if t % 2 == 0 { Activation::Relu } else { Activation::Identity };
        let x = random_tensor(&mut rng, &[batch, n], scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = weights.bind(&mut tape, false);
        let y = ic::ic_dense_forward(&mut tape, xv, &p, f)?;
        let reference = ic::ic_dense_piecewise(&x, &weights, f)?;
        worst = worst.max(tape.value(y).max_abs_diff(&reference)?);
    }
    Ok(CheckOutcome::new(
        "dense equivalence",
        worst < EQUIVALENCE_TOL,
        format!("{trials} trials, max |diff| = {worst:.3e} (limit {EQUIVALENCE_TOL:e})"),
    ))
}

struct ConvCase {
    x: Tensor,
    weight: Tensor,
    bias: Option<Tensor>,
    w_prime: Tensor,
    stride: usize,
    padding: usize,
    mode: IcMode,
}

impl ConvCase {
    fn random(rng: &mut ChaCha8Rng) -> ConvCase {
        let c_in = rng.random_range(1..=4);
        let c_out = rng.random_range(1..=4);
        let k = [2, 3, 5][rng.random_range(0..3)];
        let hw = rng.random_range(k..=k + 5);
        let batch = rng.random_range(1..=2);
        let mode = if rng.random_bool(0.5) { IcMode::Grouped } else { IcMode::Scalar };
        let wp_shape = match mode {
            IcMode::Grouped => vec![c_out, c_in],
            IcMode::Scalar => vec![c_out],
        };
        ConvCase {
            x: uniform_tensor(rng, &[batch, c_in, hw, hw], 0.0, 1.0),
            weight: random_tensor(rng, &[c_out, c_in, k, k], 1.0),
            bias: None,
            w_prime: Tensor::zeros(&wp_shape),
            stride: rng.random_range(1..=2),
            padding: rng.random_range(0..=k / 2),
            mode,
        }
    }

    /// `(plain conv, IC conv)` outputs.
    fn run(&self) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(self.x.clone());
        let conv = ConvParams {
            weight: tape.constant(self.weight.clone()),
            bias: self.bias.as_ref().map(|b| tape.constant(b.clone())),
            stride: self.stride,
            padding: self.padding,
        };
        let p = IcConvParams {
            conv,
            w_prime: tape.constant(self.w_prime.clone()),
            mode: self.mode,
        };
        let plain = nn::conv2d(&mut tape, x, &conv)?;
        let ic = ic::ic_conv_forward(&mut tape, x, &p)?;
        Ok((tape.value(plain).clone(), tape.value(ic).clone()))
    }
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// IC convolutions reduce to the plain convolution when `w'` dominates the
/// filter on non-negative input, and double it when `w' = 0` and the filter
/// and input are non-negative. Both comparisons are bitwise.
pub fn conv_reductions(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng(seed);
    let mut silent_fail = 0;
    let mut double_fail = 0;
    for _ in 0..trials {
        let mut case = ConvCase::random(&mut rng);
        let shape = case.weight.shape().to_vec();
        let (c_out, c_in, kk) = (shape[0], shape[1], shape[2] * shape[3]);
        let w = case.weight.data();
        let peak = |o: usize, i: usize| {
            w[(o * c_in + i) * kk..(o * c_in + i + 1) * kk]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let wp: Vec<f64> = match case.mode {
            IcMode::Grouped => (0..c_out * c_in).map(|j| 2.0 * peak(j / c_in, j % c_in)).collect(),
            IcMode::Scalar => (0..c_out)
                .map(|o| 2.0 * (0..c_in).map(|i| peak(o, i)).fold(0.0, f64::max))
                .collect(),
        };
        case.w_prime = Tensor::new(case.w_prime.shape(), wp)?;
        let (plain, out) = case.run()?;
        if !bitwise_eq(plain.data(), out.data()) {
            silent_fail += 1;
        }

        let mut case = ConvCase::random(&mut rng);
        case.weight = Tensor::from_fn(case.weight.shape(), |i| case.weight.data()[i].abs());
        let c_out = case.weight.shape()[0];
        case.bias = Some(uniform_tensor(&mut rng, &[c_out], 0.0, 1.0));
        let (plain, out) = case.run()?;
        let doubled: Vec<f64> = plain.data().iter().map(|v| 2.0 * v).collect();
        if !bitwise_eq(&doubled, out.data()) {
            double_fail += 1;
        }
    }
    Ok(CheckOutcome::new(
        "conv reductions",
        silent_fail == 0 && double_fail == 0,
        format!(
            "{trials} silent-branch cases ({silent_fail} mismatched), {trials} doubling cases ({double_fail} mismatched)"
        ),
    ))
}

enum Head {
    /// `Σ out ⊙ R` with a fixed random `R`
    Projection,
    CrossEntropy,
}

fn network_gradcheck(spec: &ModelSpec, batch: usize, head: Head, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng(seed);
    let mut net = build_model(spec, seed)?;
    let mut params: Vec<Tensor> = net
        .params
        .iter()
        .map(|p| Tensor::from_fn(p.value.shape(), |i| p.value.data()[i] + 0.1 * normal(&mut rng)))
        .collect();
    let n = params.len();
    let mut input_shape = vec![batch];
    input_shape.extend(&spec.input);
    params.push(random_tensor(&mut rng, &input_shape, 1.0));
    let mut out_shape = vec![batch];
    out_shape.extend(net.output_shape());
    let projection = random_tensor(&mut rng, &out_shape, 1.0);
    let classes = out_shape.last().copied().unwrap_or(1);
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    finite_diff_check(
        |tape, v| {
            let out = net.forward(tape, &v[..n], v[n], Mode::Train)?;
            match head {
                Head::Projection => {
                    let r = tape.constant(projection.clone());
                    let prod = tape.mul(out, r)?;
                    tape.sum(prod)
                }
                Head::CrossEntropy => tape.softmax_cross_entropy(out, &labels),
            }
        },
        &params,
        GRADCHECK_EPS,
        kink_crossing,
    )
}

fn depthwise_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng(seed);
    let params = [
        random_tensor(&mut rng, &[2, 3, 5, 5], 1.0),
        random_tensor(&mut rng, &[3, 3, 3], 1.0),
    ];
    let projection = random_tensor(&mut rng, &[2, 3, 3, 3], 1.0);
    finite_diff_check(
        |tape, v| {
            let y = nn::depthwise_conv2d(tape, v[0], v[1], 2, 1)?;
            let r = tape.constant(projection.clone());
            let prod = tape.mul(y, r)?;
            tape.sum(prod)
        },
        &params,
        GRADCHECK_EPS,
        kink_crossing,
    )
}

fn spec(input: &[usize], layers: Vec<LayerSpec>) -> ModelSpec {
    ModelSpec {
        name: "gradcheck".into(),
        input: input.to_vec(),
        layers,
    }
}

/// Named network pieces covering every layer kind.
fn gradcheck_cases() -> Vec<(&'static str, ModelSpec, Head)> {
    use LayerKind as K;
    let img = [2, 6, 6];
    let conv = LayerSpec::conv(3, 3, 1, 1);
    let scalar_ic = LayerSpec {
        ic_mode: Some(IcMode::Scalar),
        ..LayerSpec::conv(3, 3, 2, 1).with_kind(K::IcConv)
    };
    let ic_layers_block = LayerSpec {
        ic_layers: Some(true),
        ..LayerSpec::block(K::BasicBlock, 4, 1)
    };
    vec![
        ("conv", spec(&img, vec![conv.clone()]), Head::Projection),
        ("conv strided", spec(&img, vec![LayerSpec::conv(3, 3, 2, 0)]), Head::Projection),
        ("ic_conv grouped", spec(&img, vec![conv.with_kind(K::IcConv)]), Head::Projection),
        ("ic_conv scalar", spec(&img, vec![scalar_ic]), Head::Projection),
        ("dense", spec(&[5], vec![LayerSpec::dense(3)]), Head::Projection),
        (
            "ic_dense",
            spec(&[5], vec![LayerSpec::dense(3).with_kind(K::IcDense)]),
            Head::Projection,
        ),
        ("batch norm", spec(&img, vec![LayerSpec::new(K::Bn)]), Head::Projection),
        ("relu", spec(&img, vec![LayerSpec::new(K::Relu)]), Head::Projection),
        (
            "max pool",
            spec(&img, vec![LayerSpec::pool(PoolKind::Max, Some(2))]),
            Head::Projection,
        ),
        (
            "avg pool",
            spec(&img, vec![LayerSpec::pool(PoolKind::Avg, Some(2))]),
            Head::Projection,
        ),
        (
            "global avg pool",
            spec(&img, vec![LayerSpec::pool(PoolKind::Avg, None)]),
            Head::Projection,
        ),
        (
            "flatten + dense",
            spec(&img, vec![LayerSpec::new(K::Flatten), LayerSpec::dense(3)]),
            Head::Projection,
        ),
        (
            "basic block",
            spec(&img, vec![LayerSpec::block(K::BasicBlock, 4, 2)]),
            Head::Projection,
        ),
        (
            "ic basic block",
            spec(&img, vec![LayerSpec::block(K::IcBasicBlock, 4, 2)]),
            Head::Projection,
        ),
        ("basic block, ic kernels", spec(&[4, 5, 5], vec![ic_layers_block]), Head::Projection),
        (
            "bottleneck block",
            spec(&[4, 5, 5], vec![LayerSpec::block(K::BottleneckBlock, 8, 2)]),
            Head::Projection,
        ),
        (
            "ic bottleneck block",
            spec(&[8, 5, 5], vec![LayerSpec::block(K::IcBottleneckBlock, 8, 1)]),
            Head::Projection,
        ),
        (
            "softmax cross-entropy",
            spec(&[5], vec![LayerSpec::dense(4)]),
            Head::CrossEntropy,
        ),
    ]
}

/// Central-difference gradient checks over every layer kind, one outcome each.
pub fn gradchecks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut results = Vec::new();
    let mut record = |name: &str, report: GradCheckReport| {
        let passed = report.tested > 0 && report.max_rel_error < GRADCHECK_TOL;
        results.push(CheckOutcome::new(
            format!("gradcheck {name}"),
            passed,
            format!(
                "max rel err {:.2e} over {} coords ({} skipped at kinks)",
                report.max_rel_error, report.tested, report.skipped
            ),
        ));
    };
    for (i, (name, spec, head)) in gradcheck_cases().into_iter().enumerate() {
        record(name, network_gradcheck(&spec, 2, head, seed.wrapping_add(i as u64))?);
    }
    record("depthwise conv", depthwise_gradcheck(seed)?);
    Ok(results)
}

/// Exact added parameters and MACs of one IC convolution against its plain
/// counterpart: `C_out·C_in` weights and `(k²·C_in + C_out·C_in)·H·W` MACs.
pub fn conv_overhead(k: usize, c_in: usize, c_out: usize, hw: usize) -> Result<CheckOutcome> {
    let base = spec(&[c_in, hw, hw], vec![LayerSpec::conv(c_out, k, 1, k / 2)]);
    let b = base.variant(Variant::IcLayer)?;
    let plain = cost_report(&base)?;
    let with_ic = cost_report(&b)?;
    let out = &plain.layers[0].output;
    let plane = (out[1] * out[2]) as i64;
    let (k, c_in, c_out) = (k as i64, c_in as i64, c_out as i64);
    let want_params = c_out * c_in;
    let want_macs = (k * k * c_in + c_out * c_in) * plane;
    let o = with_ic.overhead_vs(&plain);
    let ratio = 1.0 / c_out as f64 + 1.0 / (k * k) as f64;
    let passed = o.added_params == want_params
        && o.added_macs == want_macs
        && (o.mac_ratio - ratio).abs() < 1e-12
        && (o.param_ratio - 1.0 / (k * k) as f64).abs() < 1e-12;
    Ok(CheckOutcome::new(
        format!("overhead k={k} c_in={c_in} c_out={c_out}"),
        passed,
        format!(
            "+{} params (ratio {:.4}), +{} MACs (ratio {:.4}, expected {:.4})",
            o.added_params, o.param_ratio, o.added_macs, o.mac_ratio, ratio
        ),
    ))
}

/// The hyperplane-rotation sweep for random non-constant weight vectors.
pub fn hyperplane_rotation(dim: usize, trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng(seed);
    let mut failures = Vec::new();
    let mut worst_crossing = 0.0f64;
    for t in 0..trials {
        let w: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        match rotation_sweep(&w, &default_sweep_grid(&w)) {
            Ok(report) => worst_crossing = worst_crossing.max(report.value_at_crossing.abs()),
            Err(Error::PropertyViolation { detail, .. }) => failures.push(format!("trial {t}: {detail}")),
            Err(e) => return Err(e),
        }
    }
    let detail = match failures.first() {
        Some(first) => format!("{} of {trials} trials failed, first: {first}", failures.len()),
        None => format!("{trials} trials, |cos θ| at crossing <= {worst_crossing:.1e}"),
    };
    Ok(CheckOutcome::new(format!("hyperplane rotation N={dim}"), failures.is_empty(), detail))
}

fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(f64::MIN_POSITIVE)
}

/// Momentum and energy conservation of the collision, and agreement of the
/// transmission form with the collision velocities.
pub fn collision_consistency(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c = CollisionInput {
            m1: 10f64.powf(rng.random_range(-1.0..1.0)),
            m2: 10f64.powf(rng.random_range(-1.0..1.0)),
            v1: rng.random_range(-10.0..10.0),
        };
        let (a, b) = collision_velocities(&c)?;
        let momentum = c.m1 * c.v1.abs() + c.m2 * b.abs();
        let energy = c.m1 * c.v1 * c.v1;
        let t = collision_transmit(2.0 * c.m1 / (c.m1 + c.m2), c.v1);
        let speed = c.v1.abs();
        worst = worst
            .max(rel_err(c.m1 * c.v1, c.m1 * a + c.m2 * b, momentum))
            .max(rel_err(energy, c.m1 * a * a + c.m2 * b * b, energy))
            .max(rel_err(t.v2, b, speed))
            .max(rel_err(t.v1, a.max(0.0), speed));
    }
    Ok(CheckOutcome::new(
        "collision",
        worst <= COLLISION_TOL,
        format!("{trials} trials, max rel err {worst:.2e} (limit {COLLISION_TOL:e})"),
    ))
}

/// A random valid image-classifier spec with plain convolutions and blocks.
pub fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    use LayerKind as K;
    loop {
        let (channels, side) = (rng.random_range(1..=3), rng.random_range(6..=12));
        let input = vec![channels, side, side];
        let mut layers = Vec::new();
        for _ in 0..rng.random_range(1..=5) {
            let layer = match rng.random_range(0..7) {
                0 | 1 => {
                    let k = [1, 3, 5][rng.random_range(0..3)];
                    LayerSpec::conv(rng.random_range(2..=6), k, rng.random_range(1..=2), k / 2)
                }
                2 => LayerSpec::new(K::Bn),
                3 => LayerSpec::new(K::Relu),
                4 => LayerSpec::pool(PoolKind::Max, Some(2)),
                5 => LayerSpec::block(K::BasicBlock, rng.random_range(2..=6), rng.random_range(1..=2)),
                _ => LayerSpec::block(K::BottleneckBlock, 4 * rng.random_range(1..=2), rng.random_range(1..=2)),
            };
            layers.push(layer);
        }
        if rng.random_bool(0.5) {
            layers.push(LayerSpec::pool(PoolKind::Avg, None));
        }
        layers.push(LayerSpec::new(K::Flatten));
        layers.push(LayerSpec::dense(rng.random_range(2..=5)));
        let spec = ModelSpec {
            name: "random".into(),
            input,
            layers,
        };
        if spec.infer_shapes().is_ok() {
            return spec;
        }
    }
}

/// Random specs built as all three variants must trace identical per-layer
/// output shapes, equal to the statically inferred ones.
pub fn variant_shapes(specs: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng(seed);
    let mut mismatches = Vec::new();
    for s in 0..specs {
        let spec = random_spec(&mut rng);
        let inferred = spec.infer_shapes()?;
        let (a, b, c) = paired_variants(&spec)?;
        let mut x_shape = vec![2];
        x_shape.extend(&spec.input);
        let x = random_tensor(&mut rng, &x_shape, 1.0);
        for v in [a, b, c] {
            let mut net = build_model(&v, seed)?;
            let mut tape = Tape::new();
            let vars = net.params.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let mut trace = Vec::new();
            net.forward_traced(&mut tape, &vars, xv, Mode::Train, Some(&mut trace))?;
            let per_sample: Vec<Vec<usize>> = trace.iter().map(|t| t[1..].to_vec()).collect();
            if per_sample != inferred {
                mismatches.push(format!("spec {s} as {}", v.name));
            }
        }
    }
    let detail = match mismatches.first() {
        Some(m) => format!("{} mismatches, first: {m}", mismatches.len()),
        None => format!("{specs} random specs, 3 variants each"),
    };
    Ok(CheckOutcome::new("variant shapes", mismatches.is_empty(), detail))
}

/// IC neurons must solve XOR in at least `min_successes` of the seeds, and a
/// single ReLU neuron can never exceed 3/4 accuracy.
pub fn xor_separation(seeds: usize, steps: usize, min_successes: usize) -> Result<CheckOutcome> {
    let seeds: Vec<u64> = (0..seeds as u64).collect();
    let report = xor_experiment(&seeds, steps)?;
    let passed = report.ic_successes >= min_successes && report.relu_max_accuracy <= 0.75;
    Ok(CheckOutcome::new(
        "xor",
        passed,
        format!(
            "IC solved {}/{}, standard solved {}/{} (best accuracy {})",
            report.ic_successes,
            seeds.len(),
            report.relu_successes,
            seeds.len(),
            report.relu_max_accuracy
        ),
    ))
}

/// Sizes and selection for [`run_suite`]. `None` keeps the default size.
#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    /// subset of [`CHECK_NAMES`]; empty runs everything
    pub checks: Vec<String>,
    pub seed: u64,
    pub trials: Option<usize>,
    /// hyperplane dimension; default sweeps 2, 8 and 64
    pub dim: Option<usize>,
    /// single overhead case `(k, c_in, c_out)`; default is a grid
    pub conv: Option<(usize, usize, usize)>,
}

/// Run the selected checks in the order of [`CHECK_NAMES`].
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    for name in &opts.checks {
        if !CHECK_NAMES.contains(&name.as_str()) {
            return Err(Error::contract(format!(
                "unknown check {name:?}; expected one of {}",
                CHECK_NAMES.join(", ")
            )));
        }
    }
    let selected = |name: &str| opts.checks.is_empty() || opts.checks.iter().any(|c| c == name);
    let trials = |default: usize| opts.trials.unwrap_or(default);
    let seed = opts.seed;
    let mut out = Vec::new();
    if selected("equivalence") {
        out.push(dense_equivalence(trials(10_000), seed)?);
    }
    if selected("reduction") {
        out.push(conv_reductions(trials(100), seed)?);
    }
    if selected("gradcheck") {
        out.extend(gradchecks(seed)?);
    }
    if selected("overhead") {
        match opts.conv {
            Some((k, c_in, c_out)) => out.push(conv_overhead(k, c_in, c_out, 8)?),
            None => {
                for k in [3, 5] {
                    for c_in in [16, 64] {
                        for c_out in [16, 128] {
                            out.push(conv_overhead(k, c_in, c_out, 8)?);
                        }
                    }
                }
            }
        }
    }
    if selected("hyperplane") {
        let dims = opts.dim.map_or(vec![2, 8, 64], |d| vec![d]);
        for d in dims {
            out.push(hyperplane_rotation(d, trials(100), seed)?);
        }
    }
    if selected("collision") {
        out.push(collision_consistency(trials(10_000), seed)?);
    }
    if selected("shapes") {
        out.push(variant_shapes(trials(50), seed)?);
    }
    if selected("xor") {
        let seeds = trials(10);
        out.push(xor_separation(seeds, 5000, (seeds * 4).div_ceil(5))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_pass() {
        assert!(dense_equivalence(50, 1).unwrap().passed);
        assert!(conv_reductions(10, 2).unwrap().passed);
        assert!(collision_consistency(200, 3).unwrap().passed);
        assert!(hyperplane_rotation(4, 3, 4).unwrap().passed);
        assert!(variant_shapes(5, 5).unwrap().passed);
    }

    #[test]
    fn overhead_matches_closed_form() {
        let o = conv_overhead(3, 64, 128, 8).unwrap();
        assert!(o.passed, "{o}");
        assert!(o.detail.starts_with("+8192 params"));
    }

    #[test]
    fn failed_outcome_is_a_property_violation() {
        let o = CheckOutcome::new("x", false, "bad");
        assert!(matches!(o.into_result(), Err(Error::PropertyViolation { .. })));
        assert_eq!(CheckOutcome::new("x", true, "").to_string().split_whitespace().next(), Some("PASS"));
    }

    #[test]
    fn every_layer_kind_passes_gradcheck() {
        for o in gradchecks(11).unwrap() {
            assert!(o.passed, "{o}");
        }
    }

    #[test]
    fn suite_selects_and_rejects_names() {
        let opts = SuiteOptions {
            checks: vec!["overhead".into()],
            conv: Some((3, 64, 128)),
            ..SuiteOptions::default()
        };
        assert_eq!(run_suite(&opts).unwrap().len(), 1);
        let bad = SuiteOptions {
            checks: vec!["nope".into()],
            ..SuiteOptions::default()
        };
        assert!(matches!(run_suite(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn random_specs_are_valid_and_seeded() {
        let a = random_spec(&mut rng(9));
        let b = random_spec(&mut rng(9));
        assert_eq!(a, b);
        assert!(a.infer_shapes().is_ok());
    }
}
