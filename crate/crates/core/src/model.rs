//! Problem instances: boundary forcing, Hamiltonian, optimal rates, the
//! population drift and the generic first-order coefficients of the master
//! equation, plus a closed registry of cost families.

use crate::error::{Error, Result};
use crate::simplex::SimplexPoint;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Boundary forcing: kappa below delta, 0 above 2*delta, linear in between.
/// Non-increasing and Lipschitz with constant kappa/delta.
pub fn phi_eval(r: f64, kappa: f64, delta: f64) -> Result<f64> {
    if r < 0.0 || !r.is_finite() {
        return Err(Error::invalid(format!("phi argument r={r} must be >= 0")));
    }
    Ok(if r <= delta {
        kappa
    } else if r > 2.0 * delta {
        0.0
    } else {
        kappa * (2.0 * delta - r) / delta
    })
}

/// H^i(y) = -1/2 sum_j (y_i - y_j)_+^2.
pub fn hamiltonian(y: &[f64], i: usize) -> f64 {
    let yi = y[i];
    -0.5 * y.iter().map(|&yj| (yi - yj).max(0.0).powi(2)).sum::<f64>()
}

/// The optimal transition rate (y_i - y_j)_+ for j != i.
pub fn optimal_rate(y: &[f64], i: usize, j: usize) -> Result<f64> {
    if i == j {
        return Err(Error::invalid("optimal_rate needs i != j"));
    }
    Ok((y[i] - y[j]).max(0.0))
}

/// Cost family registry; evaluation is `f(t, i, p)` (running) or `g(i, p)`
/// (terminal, where the time argument is ignored).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum CostFamily {
    /// c for every (t, i, p).
    Constant { c: f64 },
    /// sum_k a_k p_k + b_i.
    LinearInP { a: Vec<f64>, b: Vec<f64> },
    /// gamma * (p_i - target_i)^2.
    QuadraticInP { gamma: f64, target: Vec<f64> },
    /// d=2 uniqueness-violating candidate: -gamma * (p_i - 1/2).
    AntiMonotonePair { gamma: f64 },
    /// Lasry–Lions monotone counterpart: +gamma * (p_i - 1/2).
    MonotonePair { gamma: f64 },
    /// Values tabulated per (state, node); paired with a specific grid.
    TabulatedOnGrid { values: Vec<Vec<f64>> },
}

impl CostFamily {
    pub fn zero() -> Self {
        CostFamily::Constant { c: 0.0 }
    }

    pub fn eval(&self, _t: f64, i: usize, p: &SimplexPoint) -> f64 {
        match self {
            CostFamily::Constant { c } => *c,
            CostFamily::LinearInP { a, b } => {
                a.iter().zip(p.weights()).map(|(ak, pk)| ak * pk).sum::<f64>() + b[i]
            }
            CostFamily::QuadraticInP { gamma, target } => {
                gamma * (p.get(i) - target[i]).powi(2)
            }
            CostFamily::AntiMonotonePair { gamma } => -gamma * (p.get(i) - 0.5),
            CostFamily::MonotonePair { gamma } => gamma * (p.get(i) - 0.5),
            CostFamily::TabulatedOnGrid { .. } => {
                panic!("tabulated costs must be evaluated through their grid")
            }
        }
    }

    /// Tabulated lookup by node id.
    pub fn eval_node(&self, t: f64, i: usize, node_id: usize, p: &SimplexPoint) -> f64 {
        match self {
            CostFamily::TabulatedOnGrid { values } => values[i][node_id],
            other => other.eval(t, i, p),
        }
    }

    /// A crude sup bound used for a-priori estimates.
    pub fn sup_bound(&self, d: usize) -> f64 {
        match self {
            CostFamily::Constant { c } => c.abs(),
            CostFamily::LinearInP { a, b } => {
                let amax = a.iter().cloned().fold(0.0f64, |m, x| m.max(x.abs()));
                let bmax = b.iter().cloned().fold(0.0f64, |m, x| m.max(x.abs()));
                amax + bmax
            }
            CostFamily::QuadraticInP { gamma, .. } => gamma.abs(),
            CostFamily::AntiMonotonePair { gamma } | CostFamily::MonotonePair { gamma } => {
                0.5 * gamma.abs()
            }
            CostFamily::TabulatedOnGrid { values } => values
                .iter()
                .take(d)
                .flat_map(|row| row.iter())
                .cloned()
                .fold(0.0f64, |m, x| m.max(x.abs())),
        }
    }
}

/// Full problem instance. Serialized as
/// `{d, epsilon, kappa, delta, T, f: {kind, params}, g: {kind, params}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d: usize,
    pub epsilon: f64,
    pub kappa: f64,
    pub delta: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub f: CostFamily,
    pub g: CostFamily,
}

/// Which drift-dominance regimes the instance satisfies. These are warnings,
/// not hard errors: regime violations can be studied deliberately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KappaRegime {
    /// kappa >= eps^2 / 2 (boundary non-attainment of P)
    pub weak: bool,
    /// kappa >= 61 eps^2 (well-posedness of the Q equation)
    pub strong: bool,
    /// kappa >= (61 + d) eps^2 (master-equation hypotheses)
    pub master: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::invalid("d must be >= 2"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in [0, 1)"));
        }
        if self.kappa < 0.0 || self.delta <= 0.0 || self.horizon <= 0.0 {
            return Err(Error::invalid("kappa >= 0, delta > 0 and T > 0 required"));
        }
        let delta_max = 1.0 / (4.0 * (self.d as f64).sqrt());
        if self.delta >= delta_max {
            return Err(Error::invalid(format!(
                "delta = {} violates delta < 1/(4 sqrt(d)) = {delta_max}",
                self.delta
            )));
        }
        Ok(())
    }

    pub fn kappa_regime(&self) -> KappaRegime {
        let e2 = self.epsilon * self.epsilon;
        KappaRegime {
            weak: self.kappa >= 0.5 * e2,
            strong: self.kappa >= 61.0 * e2,
            master: self.kappa >= (61.0 + self.d as f64) * e2,
        }
    }

    pub fn phi(&self, r: f64) -> f64 {
        // r comes from simplex coordinates, so it is >= 0
        phi_eval(r.max(0.0), self.kappa, self.delta).expect("phi on nonnegative input")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ModelSpec is serializable")
    }
}

/// Named instances used across experiments and acceptance checks.
pub mod registry {
    use super::{CostFamily, ModelSpec};

    /// d=2, eps=0.5, kappa=61 eps^2, anti-monotone terminal cost. The
    /// uniqueness-violating family at eps = 0, restored by common noise.
    pub fn anti_monotone(gamma: f64) -> ModelSpec {
        let epsilon = 0.5;
        ModelSpec {
            d: 2,
            epsilon,
            kappa: 61.0 * epsilon * epsilon,
            delta: 0.05,
            horizon: 1.0,
            f: CostFamily::zero(),
            g: CostFamily::AntiMonotonePair { gamma },
        }
    }

    /// Monotone counterpart of [`anti_monotone`].
    pub fn monotone(gamma: f64) -> ModelSpec {
        let mut spec = anti_monotone(gamma);
        spec.g = CostFamily::MonotonePair { gamma };
        spec
    }

    /// Zero-common-noise variant (free horizon), used by the eps = 0 probes.
    pub fn zero_noise(g: CostFamily, horizon: f64) -> ModelSpec {
        ModelSpec {
            d: 2,
            epsilon: 0.0,
            kappa: 0.5,
            delta: 0.05,
            horizon,
            f: CostFamily::zero(),
            g,
        }
    }

    /// d=3 instance for the particle and coupling experiments.
    pub fn three_state() -> ModelSpec {
        let epsilon = 0.4;
        ModelSpec {
            d: 3,
            epsilon,
            kappa: 2.0,
            delta: 0.1,
            horizon: 1.0,
            f: CostFamily::zero(),
            g: CostFamily::LinearInP { a: vec![1.0, -0.5, 0.0], b: vec![0.0, 0.1, -0.1] },
        }
    }
}

/// A bounded feedback strategy: nonnegative off-diagonal transition rates
/// `(t, i, p) -> rate toward j`, diagonal fixed by the zero-row-sum
/// convention (never queried here).
pub trait Feedback: Send + Sync {
    /// Rate of jumping from state `i` to state `j != i`.
    fn rate(&self, t: f64, i: usize, p: &SimplexPoint, j: usize) -> f64;

    /// Declared bound on the off-diagonal rates.
    fn sup_bound(&self) -> f64;
}

/// The zero strategy.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroFeedback;

impl Feedback for ZeroFeedback {
    fn rate(&self, _t: f64, _i: usize, _p: &SimplexPoint, _j: usize) -> f64 {
        0.0
    }
    fn sup_bound(&self) -> f64 {
        0.0
    }
}

/// A strategy backed by a closure; `bound` must dominate the returned rates.
pub struct FnFeedback {
    eval: Arc<dyn Fn(f64, usize, &SimplexPoint, usize) -> f64 + Send + Sync>,
    bound: f64,
}

impl FnFeedback {
    pub fn new(
        bound: f64,
        eval: impl Fn(f64, usize, &SimplexPoint, usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnFeedback { eval: Arc::new(eval), bound }
    }
}

impl Feedback for FnFeedback {
    fn rate(&self, t: f64, i: usize, p: &SimplexPoint, j: usize) -> f64 {
        (self.eval)(t, i, p, j).max(0.0)
    }
    fn sup_bound(&self) -> f64 {
        self.bound
    }
}

/// Population drift a_i(t, p) under forcing phi and feedback alpha.
///
/// Computed pairwise: for each (i, j) the same rounded flow enters
/// coordinate i with sign + and coordinate j with sign -, so the coordinate
/// sum only picks up cancellation error from the per-coordinate
/// accumulations (exactly zero for d = 2).
pub fn drift_a(t: f64, p: &SimplexPoint, alpha: &dyn Feedback, spec: &ModelSpec) -> Vec<f64> {
    let d = p.dim();
    let phi: Vec<f64> = (0..d).map(|i| spec.phi(p.get(i))).collect();
    let mut a = vec![0.0; d];
    for i in 0..d {
        for j in (i + 1)..d {
            // inflow to i from j, and inflow to j from i
            let u = p.get(j) * (phi[i] + alpha.rate(t, j, p, i));
            let v = p.get(i) * (phi[j] + alpha.rate(t, i, p, j));
            let flow = u - v;
            a[i] += flow;
            a[j] -= flow;
        }
    }
    a
}

/// The generic coefficients (B^i_j)_j and F^i of the master equation.
///
/// Row sums of B vanish identically; B^i_j > 0 on the face p_j = 0 whenever
/// kappa > eps^2.
pub fn coefficients_bf(
    t: f64,
    p: &SimplexPoint,
    y: &[f64],
    i: usize,
    spec: &ModelSpec,
) -> (Vec<f64>, f64) {
    coefficients_bf_with_cost(t, p, y, i, spec, spec.f.eval(t, i, p))
}

/// Same as [`coefficients_bf`] with the running-cost value supplied by the
/// caller (used for grid-tabulated costs, which need a node id to evaluate).
pub fn coefficients_bf_with_cost(
    t: f64,
    p: &SimplexPoint,
    y: &[f64],
    i: usize,
    spec: &ModelSpec,
    f_value: f64,
) -> (Vec<f64>, f64) {
    let _ = t;
    let d = p.dim();
    let phi: Vec<f64> = (0..d).map(|k| spec.phi(p.get(k))).collect();
    let e2 = spec.epsilon * spec.epsilon;
    // sum_k [phi(p_k) + (y_j - y_k)_+] expanded per j below
    let mut b = vec![0.0; d];
    for j in 0..d {
        let inflow: f64 = (0..d).map(|k| p.get(k) * (y[k] - y[j]).max(0.0)).sum();
        let outflow: f64 = (0..d).map(|k| phi[k] + (y[j] - y[k]).max(0.0)).sum();
        let delta = if i == j { 1.0 } else { 0.0 };
        b[j] = phi[j] + inflow - p.get(j) * outflow + e2 * (delta - p.get(j));
    }
    let coupling: f64 = (0..d).map(|j| phi[j] * (y[j] - y[i])).sum();
    let f = hamiltonian(y, i) + f_value + coupling;
    (b, f)
}
