//! WebAssembly bindings for the static page in `www/`.
//!
//! Every export is a thin wrapper over a plain function so the logic can be
//! tested natively.

use icnet::geometry::{self, TwoInputNeuron};
use icnet::ic::Activation;
use icnet::zoo::{cost_report, LayerSpec, ModelSpec, Variant};
use wasm_bindgen::prelude::*;

fn neuron(kind: &str, params: &[f64]) -> Result<TwoInputNeuron, String> {
    match kind {
        "relu" => Ok(TwoInputNeuron::plain_relu()),
        "collision" => Ok(TwoInputNeuron::collision_unit()),
        "xor" => Ok(TwoInputNeuron::xor_solution()),
        "ic" => match params {
            &[w1, w2, wp, b1, b2] => Ok(TwoInputNeuron::from_ic(w1, w2, wp, b1, b2)),
            _ => Err(format!("ic neuron takes 5 parameters, got {}", params.len())),
        },
        "ic_linear" => match params {
            &[w1, w2, wp, b1, b2] => Ok(TwoInputNeuron {
                outer: Activation::Identity,
                ..TwoInputNeuron::from_ic(w1, w2, wp, b1, b2)
            }),
            _ => Err(format!("ic neuron takes 5 parameters, got {}", params.len())),
        },
        other => Err(format!("unknown neuron {other:?}")),
    }
}

/// Row-major region labels (0, 1, 2) over [-1.5, 1.5]² for the named neuron.
/// `params` is `[w1, w2, w', b1, b2]` for the `ic` and `ic_linear` kinds.
pub fn region_labels(kind: &str, params: &[f64], resolution: usize) -> Result<Vec<u8>, String> {
    let n = neuron(kind, params)?;
    geometry::region_map(|a, b| n.branches(a, b), geometry::REGION_BOUNDS, resolution)
        .map(|m| m.labels)
        .map_err(|e| e.to_string())
}

/// `[w', cos θ]` pairs, flattened, for `steps` evenly spaced `w'` in `[lo, hi]`.
/// Points where every weight equals `w'` are skipped.
pub fn cos_theta_points(weights: &[f64], lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>, String> {
    if steps < 2 || !(lo < hi) {
        return Err("need lo < hi and at least 2 steps".into());
    }
    let mut out = Vec::with_capacity(steps * 2);
    for i in 0..steps {
        let wp = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
        if let Ok(c) = geometry::hyperplane_cos_theta(weights, wp) {
            out.extend([wp, c]);
        } else if weights.len() < 2 {
            return Err("need at least 2 weights".into());
        }
    }
    Ok(out)
}

/// Parameter and MAC overhead of replacing one `k×k` conv by its IC version,
/// as a JSON object.
pub fn overhead_json(k: usize, c_in: usize, c_out: usize, hw: usize) -> Result<String, String> {
    let base = ModelSpec {
        name: "conv".into(),
        input: vec![c_in, hw, hw],
        layers: vec![LayerSpec::conv(c_out, k, 1, k / 2)],
    };
    let run = || -> icnet::Result<String> {
        let plain = cost_report(&base)?;
        let ic = cost_report(&base.variant(Variant::IcLayer)?)?;
        let o = ic.overhead_vs(&plain);
        Ok(serde_json::json!({
            "baseline_params": plain.total_params,
            "baseline_macs": plain.total_macs,
            "added_params": o.added_params,
            "added_macs": o.added_macs,
            "param_ratio": o.param_ratio,
            "mac_ratio": o.mac_ratio,
        })
        .to_string())
    };
    run().map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn region_map(kind: &str, params: &[f64], resolution: usize) -> Result<Vec<u8>, JsError> {
    region_labels(kind, params, resolution).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn cos_theta_curve(weights: &[f64], lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    cos_theta_points(weights, lo, hi, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn zero_crossing(weights: &[f64]) -> f64 {
    geometry::zero_crossing(weights)
}

#[wasm_bindgen]
pub fn ic_overhead(k: usize, c_in: usize, c_out: usize, hw: usize) -> Result<String, JsError> {
    overhead_json(k, c_in, c_out, hw).map_err(|e| JsError::new(&e))
}
