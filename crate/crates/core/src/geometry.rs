//! The 1-D elastic collision that motivates the IC form, the rotation of the
//! IC hyperplane `Σ (w_i − w') x_i = 0` as `w'` varies, and 2-D decision
//! region maps of single neurons.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ic::{Activation, IcDenseWeights};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollisionInput {
    pub m1: f64,
    pub m2: f64,
    /// velocity of `m1` before impact; `m2` starts at rest
    pub v1: f64,
}

/// Velocities `(v1', v2')` after a 1-D elastic collision.
pub fn collision_velocities(c: &CollisionInput) -> Result<(f64, f64)> {
    if !(c.m1 > 0.0 && c.m2 > 0.0) {
        return Err(Error::contract(format!(
            "masses must be positive, got m1={} m2={}",
            c.m1, c.m2
        )));
    }
    let total = c.m1 + c.m2;
    Ok(((c.m1 - c.m2) / total * c.v1, 2.0 * c.m1 / total * c.v1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transmission {
    /// rightward part of the striker's rebound, `σ((w − 1) v1)`
    pub v1: f64,
    /// velocity handed to the target, `w v1`
    pub v2: f64,
    pub total: f64,
}

/// Information passed on by the collision when the transmission
/// coefficient is `w = 2 m1 / (m1 + m2)`.
pub fn collision_transmit(w: f64, v1: f64) -> Transmission {
    let a = ((w - 1.0) * v1).max(0.0);
    let b = w * v1;
    Transmission {
        v1: a,
        v2: b,
        total: a + b,
    }
}

/// Cosine of the angle between the hyperplane normal `H = W − w'·I` and the
/// all-ones vector `I`.
pub fn hyperplane_cos_theta(weights: &[f64], w_prime: f64) -> Result<f64> {
    let n = weights.len();
    if n < 2 {
        return Err(Error::contract("hyperplane analysis needs N >= 2"));
    }
    let norm_sq: f64 = weights.iter().map(|w| (w - w_prime) * (w - w_prime)).sum();
    if norm_sq == 0.0 {
        return Err(Error::contract(format!(
            "degenerate hyperplane: every weight equals w' = {w_prime}"
        )));
    }
    let dot: f64 = weights.iter().sum::<f64>() - n as f64 * w_prime;
    Ok(dot / ((n as f64).sqrt() * norm_sq.sqrt()))
}

fn is_constant(weights: &[f64]) -> bool {
    weights.windows(2).all(|p| p[0] == p[1])
}

/// `w'` at which the hyperplane normal is orthogonal to `I`: `WᵀI / N`.
pub fn zero_crossing(weights: &[f64]) -> f64 {
    weights.iter().sum::<f64>() / weights.len() as f64
}

/// 1000 logarithmically spaced magnitudes in [1e-3, 1e3] on each side of zero,
/// zero itself, and the analytic zero crossing of `weights`.
pub fn default_sweep_grid(weights: &[f64]) -> Vec<f64> {
    let per_side = 1000;
    let mags: Vec<f64> = (0..per_side)
        .map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / (per_side - 1) as f64))
        .collect();
    let mut grid: Vec<f64> = mags.iter().rev().map(|m| -m).collect();
    grid.push(0.0);
    grid.extend(&mags);
    grid.push(zero_crossing(weights));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    /// `(w', cos θ)` per grid point
    pub points: Vec<(f64, f64)>,
    pub strictly_decreasing: bool,
    pub min: f64,
    pub max: f64,
    pub zero_crossing: f64,
    /// cos θ evaluated at the zero crossing
    pub value_at_crossing: f64,
    /// grid neighbours on each side of the crossing
    pub bracket: (f64, f64),
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("w_prime,cos_theta\n");
        for (w, c) in &self.points {
            let _ = writeln!(out, "{w},{c}");
        }
        out
    }
}

fn violation(detail: String) -> Error {
    Error::PropertyViolation {
        check: "hyperplane rotation".into(),
        detail,
    }
}

/// Evaluate cos θ over an increasing `w'` grid and check that it decreases
/// strictly, stays inside (−1, 1), vanishes at `WᵀI/N` and changes sign there.
pub fn rotation_sweep(weights: &[f64], grid: &[f64]) -> Result<SweepReport> {
    if weights.len() < 2 || is_constant(weights) {
        return Err(Error::contract(
            "W must be non-constant (linearly independent of I)",
        ));
    }
    if grid.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::contract("sweep grid must be strictly increasing"));
    }
    let crossing = zero_crossing(weights);
    let below = grid.iter().rev().find(|&&w| w < crossing).copied();
    let above = grid.iter().find(|&&w| w > crossing).copied();
    let (Some(below), Some(above)) = (below, above) else {
        return Err(Error::contract(format!(
            "grid must contain points on both sides of the zero crossing {crossing}"
        )));
    };

    let mut points = Vec::with_capacity(grid.len());
    for &w in grid {
        let c = hyperplane_cos_theta(weights, w)?;
        if !(c.abs() < 1.0) {
            return Err(violation(format!("|cos θ| = {} at w' = {w}", c.abs())));
        }
        if let Some(&(prev_w, prev_c)) = points.last() {
            if c >= prev_c {
                return Err(violation(format!(
                    "cos θ not decreasing between w' = {prev_w} ({prev_c}) and w' = {w} ({c})"
                )));
            }
        }
        points.push((w, c));
    }
    let at_crossing = hyperplane_cos_theta(weights, crossing)?;
    if at_crossing.abs() > 1e-10 {
        return Err(violation(format!(
            "cos θ = {at_crossing} at w' = WᵀI/N = {crossing}"
        )));
    }
    let (c_below, c_above) = (
        hyperplane_cos_theta(weights, below)?,
        hyperplane_cos_theta(weights, above)?,
    );
    if !(c_below > 0.0 && c_above < 0.0) {
        return Err(violation(format!(
            "no sign change across w' = {crossing}: {c_below} at {below}, {c_above} at {above}"
        )));
    }
    let min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(SweepReport {
        points,
        strictly_decreasing: true,
        min,
        max,
        zero_crossing: crossing,
        value_at_crossing: at_crossing,
        bracket: (below, above),
    })
}

/// Which ReLUs of a two-level neuron `σ(a·x + c₁ + σ(d·x + c₂))` are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub outer: bool,
    /// `None` for a neuron without an inner ReLU
    pub inner: Option<bool>,
}

impl Branches {
    /// Region label: 0 where the output is clamped to zero, otherwise 1 or 2
    /// depending on which linear piece is in force.
    pub fn label(self) -> u8 {
        match (self.outer, self.inner) {
            (false, _) => 0,
            (true, Some(true)) => 2,
            (true, _) => 1,
        }
    }
}

/// Two-input neuron `f(a·x + c₁ [+ σ(d·x + c₂)])` with `f` a ReLU or the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoInputNeuron {
    pub a: [f64; 2],
    pub c1: f64,
    pub inner: Option<([f64; 2], f64)>,
    pub outer: Activation,
}

impl TwoInputNeuron {
    /// `σ(x₁ − x₂)`
    pub fn plain_relu() -> Self {
        TwoInputNeuron {
            a: [1.0, -1.0],
            c1: 0.0,
            inner: None,
            outer: Activation::Relu,
        }
    }

    /// `σ(x₁ − x₂ + σ(−2x₂))`
    pub fn collision_unit() -> Self {
        TwoInputNeuron {
            a: [1.0, -1.0],
            c1: 0.0,
            inner: Some(([0.0, -2.0], 0.0)),
            outer: Activation::Relu,
        }
    }

    /// XOR solution with `w₁ = w₂ = 0.2805`, `b₁ = −0.3506`, `b₂ = 0.6463`.
    pub fn xor_solution() -> Self {
        Self::from_ic(0.2805, 0.2805, 1.0, -0.3506, 0.6463)
    }

    /// `σ(w·x + b₁ + σ((w − w')·x + b₂))`
    pub fn from_ic(w1: f64, w2: f64, w_prime: f64, b1: f64, b2: f64) -> Self {
        TwoInputNeuron {
            a: [w1, w2],
            c1: b1,
            inner: Some(([w1 - w_prime, w2 - w_prime], b2)),
            outer: Activation::Relu,
        }
    }

    /// Single-output IC dense weights over two inputs with outer activation `f`.
    pub fn from_ic_weights(w: &IcDenseWeights, f: Activation) -> Result<Self> {
        if w.weight.shape() != [1, 2] {
            return Err(Error::dim(format!(
                "region maps need a 2-input, 1-output neuron, got {:?}",
                w.weight.shape()
            )));
        }
        let scalar = |t: &Option<crate::Tensor>| t.as_ref().map_or(0.0, |t| t.data()[0]);
        Ok(TwoInputNeuron {
            outer: f,
            ..Self::from_ic(
                w.weight.data()[0],
                w.weight.data()[1],
                w.w_prime.data()[0],
                scalar(&w.bias_main),
                scalar(&w.bias_inner),
            )
        })
    }

    fn pre(&self, x1: f64, x2: f64) -> (f64, Option<f64>) {
        let inner = self.inner.map(|(d, c2)| d[0] * x1 + d[1] * x2 + c2);
        let outer = self.a[0] * x1 + self.a[1] * x2 + self.c1 + inner.map_or(0.0, |h| h.max(0.0));
        (outer, inner)
    }

    pub fn value(&self, x1: f64, x2: f64) -> f64 {
        self.outer.apply(self.pre(x1, x2).0)
    }

    /// Without an outer ReLU the outer branch counts as always active.
    pub fn branches(&self, x1: f64, x2: f64) -> Branches {
        let (outer, inner) = self.pre(x1, x2);
        Branches {
            outer: self.outer == Activation::Identity || outer > 0.0,
            inner: inner.map(|h| h >= 0.0),
        }
    }
}

pub const REGION_BOUNDS: (f64, f64) = (-1.5, 1.5);
pub const REGION_RESOLUTION: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMap {
    pub resolution: usize,
    pub bounds: (f64, f64),
    /// row-major labels; row `i` is `x₂ = lo + i·step`, column `j` is `x₁`
    pub labels: Vec<u8>,
    pub distinct: usize,
}

impl RegionMap {
    pub fn coordinate(&self, i: usize) -> f64 {
        let (lo, hi) = self.bounds;
        lo + (hi - lo) * i as f64 / (self.resolution - 1) as f64
    }

    pub fn label_at(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.resolution + col]
    }

    /// One grid row per line, comma separated, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.labels.len() * 2);
        for row in self.labels.chunks(self.resolution) {
            for (j, l) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push(char::from(b'0' + l));
            }
            out.push('\n');
        }
        out
    }
}

/// Label every point of a square grid over `bounds` by its active-branch
/// pattern and count the distinct labels.
pub fn region_map(
    f: impl Fn(f64, f64) -> Branches,
    bounds: (f64, f64),
    resolution: usize,
) -> Result<RegionMap> {
    if resolution < 2 {
        return Err(Error::contract("region map resolution must be at least 2"));
    }
    let (lo, hi) = bounds;
    let coord = |i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
    let mut labels = Vec::with_capacity(resolution * resolution);
    let mut seen = [false; 3];
    for i in 0..resolution {
        let x2 = coord(i);
        for j in 0..resolution {
            let l = f(coord(j), x2).label();
            seen[l as usize] = true;
            labels.push(l);
        }
    }
    Ok(RegionMap {
        resolution,
        bounds,
        labels,
        distinct: seen.iter().filter(|&&s| s).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collision_examples() {
        let c = CollisionInput {
            m1: 2.0,
            m2: 2.0,
            v1: 1.0,
        };
        assert_eq!(collision_velocities(&c).unwrap(), (0.0, 1.0));

        let c = CollisionInput {
            m1: 3.0,
            m2: 1.0,
            v1: 2.0,
        };
        let (a, b) = collision_velocities(&c).unwrap();
        assert_eq!((a, b), (1.0, 3.0));
        assert_eq!(3.0 * a + 1.0 * b, 6.0);
        assert_eq!(0.5 * 3.0 * a * a + 0.5 * 1.0 * b * b, 6.0);

        let c = CollisionInput {
            m1: 1.0,
            m2: 5.0,
            v1: 0.0,
        };
        let (a, b) = collision_velocities(&c).unwrap();
        assert_eq!((a.abs(), b), (0.0, 0.0));

        let bad = CollisionInput {
            m1: 0.0,
            m2: 1.0,
            v1: 1.0,
        };
        assert!(matches!(collision_velocities(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn transmit_examples() {
        let t = collision_transmit(1.0, 5.0);
        assert_eq!((t.v1, t.v2, t.total), (0.0, 5.0, 5.0));
        let t = collision_transmit(0.5, 2.0);
        assert_eq!((t.v1, t.v2, t.total), (0.0, 1.0, 1.0));
        let t = collision_transmit(1.5, 2.0);
        assert_eq!((t.v1, t.v2, t.total), (1.0, 3.0, 4.0));
    }

    #[test]
    fn cos_theta_examples() {
        let c = hyperplane_cos_theta(&[1.0, 0.0], 0.0).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(hyperplane_cos_theta(&[1.0, 0.0], 0.5).unwrap(), 0.0);
        let c = hyperplane_cos_theta(&[1.0, 0.0], 1000.0).unwrap();
        assert!(c > -1.0 && c < -0.99999, "{c}");
        assert!(matches!(
            hyperplane_cos_theta(&[0.3, 0.3], 0.3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sweep_linear_grid() {
        let grid: Vec<f64> = (-1000..=1000).map(f64::from).collect();
        let report = rotation_sweep(&[1.0, 0.0], &grid).unwrap();
        assert!(report.strictly_decreasing);
        assert_eq!(report.bracket, (0.0, 1.0));
        assert!(report.value_at_crossing.abs() < 1e-12);
        assert!(report.max < 1.0 && report.min > -1.0);
    }

    #[test]
    fn sweep_rejects_constant_weights_and_bad_grids() {
        let grid = default_sweep_grid(&[1.0, 1.0]);
        assert!(matches!(rotation_sweep(&[1.0, 1.0], &grid), Err(Error::Contract(_))));
        assert!(matches!(
            rotation_sweep(&[1.0, 0.0], &[0.0, 0.0, 1.0]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            rotation_sweep(&[1.0, 0.0], &[1.0, 2.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn default_grid_shape() {
        let g = default_sweep_grid(&[1.0, 0.0]);
        assert_eq!(g.len(), 2002);
        assert_eq!(g[0], -1000.0);
        assert_eq!(*g.last().unwrap(), 1000.0);
        assert!(g.contains(&0.5));
    }

    #[test]
    fn figure_region_counts() {
        let count = |n: TwoInputNeuron| {
            region_map(|a, b| n.branches(a, b), REGION_BOUNDS, 256)
                .unwrap()
                .distinct
        };
        assert_eq!(count(TwoInputNeuron::plain_relu()), 2);
        assert_eq!(count(TwoInputNeuron::collision_unit()), 3);
        let xor = TwoInputNeuron::xor_solution();
        assert_eq!(count(xor), 3);
        assert_eq!(xor.branches(1.0, 0.0).label(), xor.branches(0.0, 1.0).label());
        assert_ne!(xor.branches(0.0, 0.0).label(), xor.branches(1.0, 0.0).label());
        assert!((xor.value(0.0, 0.0) - 0.2957).abs() < 1e-12);
    }

    #[test]
    fn region_csv_layout() {
        let m = region_map(|a, _| Branches { outer: a > 0.0, inner: None }, (-1.0, 1.0), 4).unwrap();
        assert_eq!(m.to_csv(), "0,0,1,1\n0,0,1,1\n0,0,1,1\n0,0,1,1\n");
        assert!(region_map(|_, _| Branches { outer: true, inner: None }, (0.0, 1.0), 1).is_err());
    }
}
