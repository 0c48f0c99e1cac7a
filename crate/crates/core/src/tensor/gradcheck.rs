//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// The coordinate being probed, handed to the exclusion predicate.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    /// Index into the parameter list.
    pub param: usize,
    /// Flat index inside that parameter.
    pub index: usize,
    /// Unperturbed coordinate value.
    pub value: f64,
    /// Whether a ReLU mask or max-pool selection differs between the
    /// perturbed and unperturbed evaluations.
    pub pattern_changed: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// max over tested coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub tested: usize,
    pub skipped: usize,
    /// (param, index) of the worst coordinate
    pub worst: Option<(usize, usize)>,
}

/// Skip coordinates whose perturbation moves any ReLU or max-pool across a kink.
pub fn kink_crossing(probe: &Probe) -> bool {
    probe.pattern_changed
}

/// Skip coordinates whose own value lies within `threshold` of zero.
pub fn near_zero(threshold: f64) -> impl Fn(&Probe) -> bool {
    move |probe| probe.value.abs() < threshold
}

pub fn no_exclusion(_: &Probe) -> bool {
    false
}

fn evaluate<F>(f: &mut F, params: &[Tensor], track: bool) -> Result<(f64, Vec<u64>)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = if track {
        Tape::with_pattern_tracking()
    } else {
        Tape::new()
    };
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    Ok((value, tape.pattern().to_vec()))
}

/// Compare `backward()` gradients of the scalar built by `f` against central
/// differences `(f(p+eps) − f(p−eps)) / 2eps`, one coordinate at a time.
pub fn finite_diff_check<F, X>(
    mut f: F,
    params: &[Tensor],
    eps: f64,
    exclude: X,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    X: Fn(&Probe) -> bool,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).all_finite() {
        return Err(Error::Numeric("objective is not finite at the base point".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let (_, base_pattern) = evaluate(&mut f, params, true)?;
    let mut report = GradCheckReport::default();
    let mut probe_params = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for idx in 0..param.len() {
            let original = param.data()[idx];
            probe_params[pi].data_mut()[idx] = original + eps;
            let (plus, plus_pattern) = evaluate(&mut f, &probe_params, true)?;
            probe_params[pi].data_mut()[idx] = original - eps;
            let (minus, minus_pattern) = evaluate(&mut f, &probe_params, true)?;
            probe_params[pi].data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective not finite when probing param {pi} index {idx}"
                )));
            }
            let probe = Probe {
                param: pi,
                index: idx,
                value: original,
                pattern_changed: plus_pattern != base_pattern || minus_pattern != base_pattern,
            };
            if exclude(&probe) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[pi].data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            report.tested += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, idx));
            }
        }
    }
    Ok(report)
}
