use std::fmt::Write as _;

use serde::Serialize;

use super::network::Network;
use super::spec::{block_plan, LayerKind, ModelSpec};
use crate::error::{Error, Result};
use crate::ic::IcMode;

/// Analytic cost of one layer, per input sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: LayerKind,
    pub output: Vec<usize>,
    pub params: u64,
    /// multiply-accumulates
    pub macs: u64,
    /// additions, comparisons and per-element affine maps outside MACs
    pub elementwise: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub input: Vec<usize>,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    /// `2 × total_macs`
    pub total_flops: u64,
    pub total_elementwise: u64,
}

/// Relative cost of a model against a baseline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Overhead {
    pub baseline: String,
    pub added_params: i64,
    pub added_macs: i64,
    pub param_ratio: f64,
    pub mac_ratio: f64,
}

#[derive(Default)]
struct Tally {
    params: u64,
    macs: u64,
    elementwise: u64,
}

impl Tally {
    fn absorb(&mut self, other: Tally) {
        self.params += other.params;
        self.macs += other.macs;
        self.elementwise += other.elementwise;
    }
}

fn u(v: usize) -> u64 {
    v as u64
}

/// Convolution to an `[c_out, ho, wo]` output, optionally with an IC kernel.
fn conv_cost(c_in: usize, c_out: usize, k: usize, out_hw: usize, bias: bool, ic: Option<IcMode>) -> Tally {
    let (ci, co, k2, hw) = (u(c_in), u(c_out), u(k * k), u(out_hw));
    let mut t = Tally {
        params: co * ci * k2,
        macs: k2 * ci * co * hw,
        elementwise: 0,
    };
    if bias {
        t.params += co;
        t.elementwise += co * hw;
    }
    if let Some(mode) = ic {
        // rough feature: depthwise all-one window sums
        t.macs += k2 * ci * hw;
        match mode {
            IcMode::Grouped => {
                t.params += co * ci;
                t.macs += ci * co * hw;
            }
            IcMode::Scalar => {
                t.params += co;
                t.macs += ci * hw + co * hw;
            }
        }
        // subtract, ReLU, add
        t.elementwise += 3 * co * hw;
    }
    t
}

fn bn_cost(c: usize, plane: usize) -> Tally {
    Tally {
        params: 2 * u(c),
        macs: 0,
        elementwise: 2 * u(c * plane),
    }
}

fn layer_cost(spec: &ModelSpec, i: usize, input: &[usize], output: &[usize]) -> Result<Tally> {
    let layer = &spec.layers[i];
    let numel = u(output.iter().product());
    let plane = |s: &[usize]| s.get(1..).map_or(1, |r| r.iter().product::<usize>());
    let t = match layer.kind {
        LayerKind::Conv | LayerKind::IcConv => {
            let ic = (layer.kind == LayerKind::IcConv).then(|| layer.ic_mode_or_default());
            conv_cost(
                input[0],
                output[0],
                layer.kernel.unwrap_or(0),
                plane(output),
                layer.has_bias(),
                ic,
            )
        }
        LayerKind::Dense | LayerKind::IcDense => {
            let (d_in, d_out) = (u(input[0]), u(output[0]));
            let mut t = Tally {
                params: d_in * d_out,
                macs: d_in * d_out,
                elementwise: 0,
            };
            let biases = if layer.has_bias() { 1 } else { 0 };
            t.params += biases * d_out;
            t.elementwise += biases * d_out;
            if layer.kind == LayerKind::IcDense {
                t.params += d_out + biases * d_out;
                t.macs += d_in + d_out;
                t.elementwise += biases * d_out + 3 * d_out;
            }
            t
        }
        LayerKind::Bn => bn_cost(output[0], plane(output)),
        LayerKind::Relu => Tally {
            elementwise: numel,
            ..Tally::default()
        },
        LayerKind::Flatten => Tally::default(),
        LayerKind::Pool => {
            let window = layer.kernel.map_or(u(plane(input)), |k| u(k * k));
            Tally {
                elementwise: window * numel,
                ..Tally::default()
            }
        }
        _ => {
            let plan = block_plan(layer, input[0]).map_err(|m| Error::spec(i, m))?;
            let mode = layer.ic_mode_or_default();
            let out_plane = plane(output);
            let mut t = Tally::default();
            let (mut h, mut w) = (input[1], input[2]);
            let last = plan.convs.len() - 1;
            for (j, &(c_in, c_out, k, s, p)) in plan.convs.iter().enumerate() {
                h = (h + 2 * p - k) / s + 1;
                w = (w + 2 * p - k) / s + 1;
                let ic = (plan.ic_layers && k >= 2).then_some(mode);
                t.absorb(conv_cost(c_in, c_out, k, h * w, false, ic));
                t.absorb(bn_cost(c_out, h * w));
                if j < last {
                    t.elementwise += u(c_out * h * w);
                }
            }
            if plan.projection {
                t.absorb(conv_cost(plan.c_in, plan.c_out, 1, out_plane, false, None));
                t.absorb(bn_cost(plan.c_out, out_plane));
            }
            if plan.combine {
                let (ci, hw) = (u(plan.c_in), u(out_plane));
                t.macs += 9 * ci * hw;
                if plan.c_in != plan.c_out {
                    // channel mean, then broadcast to the output channels
                    t.macs += ci * hw + u(plan.c_out) * hw;
                }
                t.absorb(bn_cost(plan.c_out, out_plane));
                // a + b, ReLU, a + gate
                t.elementwise += 3 * numel;
            }
            // residual add and final ReLU
            t.elementwise += 2 * numel;
            t
        }
    };
    Ok(t)
}

/// Per-layer parameter and MAC counts of `spec`, derived from the spec alone.
pub fn cost_report(spec: &ModelSpec) -> Result<CostReport> {
    let shapes = spec.infer_shapes()?;
    let mut layers = Vec::with_capacity(shapes.len());
    let mut input = spec.input.clone();
    for (i, output) in shapes.iter().enumerate() {
        let t = layer_cost(spec, i, &input, output)?;
        layers.push(LayerCost {
            index: i,
            kind: spec.layers[i].kind,
            output: output.clone(),
            params: t.params,
            macs: t.macs,
            elementwise: t.elementwise,
        });
        input = output.clone();
    }
    Ok(CostReport::from_layers(spec, layers))
}

impl CostReport {
    fn from_layers(spec: &ModelSpec, layers: Vec<LayerCost>) -> Self {
        let total_macs = layers.iter().map(|l| l.macs).sum();
        CostReport {
            model: spec.name.clone(),
            input: spec.input.clone(),
            total_params: layers.iter().map(|l| l.params).sum(),
            total_macs,
            total_flops: 2 * total_macs,
            total_elementwise: layers.iter().map(|l| l.elementwise).sum(),
            layers,
        }
    }

    pub fn overhead_vs(&self, baseline: &CostReport) -> Overhead {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { (a as f64 - b as f64) / b as f64 };
        Overhead {
            baseline: baseline.model.clone(),
            added_params: self.total_params as i64 - baseline.total_params as i64,
            added_macs: self.total_macs as i64 - baseline.total_macs as i64,
            param_ratio: ratio(self.total_params, baseline.total_params),
            mac_ratio: ratio(self.total_macs, baseline.total_macs),
        }
    }
}

/// Cost report whose parameter counts are read from the built network
/// rather than derived from the spec.
pub fn count_params(net: &Network) -> Result<CostReport> {
    let mut report = cost_report(&net.spec)?;
    for (i, layer) in report.layers.iter_mut().enumerate() {
        layer.params = u(net.layer_param_count(i));
    }
    Ok(CostReport::from_layers(&net.spec, report.layers))
}

/// MAC and FLOP counts of the network applied to a per-sample input of
/// shape `input`.
pub fn count_flops(net: &Network, input: &[usize]) -> Result<CostReport> {
    let spec = ModelSpec {
        input: input.to_vec(),
        ..net.spec.clone()
    };
    cost_report(&spec)
}

/// Side-by-side per-layer table of several aligned reports.
pub fn comparison_table(reports: &[CostReport]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:>5}  {:<32}", "layer", "kind");
    for r in reports {
        let _ = write!(out, "  {:>14} {:>14}", format!("{} params", short(&r.model)), "MACs");
    }
    out.push('\n');
    let rows = reports.iter().map(|r| r.layers.len()).max().unwrap_or(0);
    for i in 0..rows {
        let kind = reports
            .iter()
            .filter_map(|r| r.layers.get(i))
            .map(|l| l.kind.name())
            .fold(Vec::new(), |mut v: Vec<&str>, k| {
                if !v.contains(&k) {
                    v.push(k);
                }
                v
            })
            .join("/");
        let _ = write!(out, "{i:>5}  {:<32}", truncate(&kind, 32));
        for r in reports {
            match r.layers.get(i) {
                Some(l) => {
                    let _ = write!(out, "  {:>14} {:>14}", l.params, l.macs);
                }
                None => {
                    let _ = write!(out, "  {:>14} {:>14}", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:>5}  {:<32}", "total", "");
    for r in reports {
        let _ = write!(out, "  {:>14} {:>14}", r.total_params, r.total_macs);
    }
    out.push('\n');
    out
}

fn short(name: &str) -> &str {
    name.rsplit('-').next().filter(|s| *s == "B" || *s == "IC").unwrap_or("base")
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
