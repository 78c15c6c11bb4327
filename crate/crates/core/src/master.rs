//! Backward solver for the nonlinear master-equation system: each time step
//! freezes the coefficients B, F on a lagged copy of the field and advances
//! every component with the linear Kimura stepper, iterating the lag to a
//! fixed point (per-step Picard).

use crate::error::{Error, Result};
use crate::model::{Feedback, ModelSpec};
use crate::pde::{assemble_diffusion, assemble_drift, interpolate, solve_implicit, SparseOp};
use crate::simplex::{SimplexGrid, SimplexPoint};
use std::sync::Arc;

/// How the Picard lag is initialized at each backward step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LagInit {
    /// Start from the already-computed later slice (default).
    PrevSlice,
    /// Start from the zero field.
    Zero,
    /// Start from the terminal cost g evaluated on the grid.
    TerminalCost,
}

#[derive(Debug, Clone, Copy)]
pub struct MasterConfig {
    pub dt: f64,
    pub picard_tol: f64,
    pub picard_max: usize,
    pub lag_init: LagInit,
}

impl MasterConfig {
    pub fn new(dt: f64) -> Self {
        MasterConfig { dt, picard_tol: 1e-9, picard_max: 50, lag_init: LagInit::PrevSlice }
    }
}

/// Solution of the master system on a grid.
#[derive(Debug, Clone)]
pub struct MasterSolution {
    pub spec: ModelSpec,
    pub grid: SimplexGrid,
    pub times: Vec<f64>,
    /// values[m][component][node]
    pub values: Vec<Vec<Vec<f64>>>,
    /// hat-chart gradients, grads[m][component][node][axis]
    grads: Vec<Vec<Vec<Vec<f64>>>>,
    /// per-step Picard iteration counts (backward order re-indexed forward)
    pub picard_iters: Vec<usize>,
    /// per-step final sup-norm update sizes
    pub picard_residuals: Vec<f64>,
}

/// One-sided/central hat-chart first differences of a nodal field.
fn hat_gradient(grid: &SimplexGrid, values: &[f64]) -> Vec<Vec<f64>> {
    let n = grid.resolution;
    let h = grid.dx();
    let axes = grid.dimension - 1;
    let mut out = vec![vec![0.0; axes]; grid.node_count()];
    for id in 0..grid.node_count() {
        let lab = grid.label(id).to_vec();
        for axis in 0..axes {
            let mut fwd = lab.clone();
            fwd[axis] += 1;
            let fid = if grid.dimension == 2 {
                (fwd[0] <= n).then_some(fwd[0])
            } else {
                (fwd[0] + fwd[1] <= n).then(|| grid.index_of(&fwd)).flatten()
            };
            let bid = if lab[axis] > 0 {
                let mut bwd = lab.clone();
                bwd[axis] -= 1;
                grid.index_of(&bwd)
            } else {
                None
            };
            out[id][axis] = match (fid, bid) {
                (Some(f), Some(b)) => (values[f] - values[b]) / (2.0 * h),
                (Some(f), None) => (values[f] - values[id]) / h,
                (None, Some(b)) => (values[id] - values[b]) / h,
                (None, None) => 0.0,
            };
        }
    }
    out
}

impl MasterSolution {
    fn locate(&self, t: f64) -> Result<(usize, usize, f64)> {
        let horizon = self.spec.horizon;
        if !(-1e-12..=horizon + 1e-12).contains(&t) {
            return Err(Error::invalid(format!("t = {t} outside [0, {horizon}]")));
        }
        let dt = self.times[1] - self.times[0];
        let s = (t / dt).clamp(0.0, (self.times.len() - 1) as f64);
        let m0 = (s.floor() as usize).min(self.times.len() - 2);
        Ok((m0, m0 + 1, s - m0 as f64))
    }

    /// U^1..U^d at (t, p): linear in time, piecewise linear in space.
    pub fn eval_u(&self, t: f64, p: &SimplexPoint) -> Result<Vec<f64>> {
        let (m0, m1, w) = self.locate(t)?;
        (0..self.spec.d)
            .map(|i| {
                let a = interpolate(&self.grid, &self.values[m0][i], p)?;
                let b = interpolate(&self.grid, &self.values[m1][i], p)?;
                Ok(a * (1.0 - w) + b * w)
            })
            .collect()
    }

    /// Intrinsic gradient (𝔡_{p_1} U^i, ..., 𝔡_{p_d} U^i) at (t, p).
    pub fn intrinsic_gradient(&self, t: f64, p: &SimplexPoint, i: usize) -> Result<Vec<f64>> {
        let (m0, m1, w) = self.locate(t)?;
        let d = self.spec.d;
        let axes = d - 1;
        // interpolated hat gradient with G_d = 0 appended
        let mut g = vec![0.0; d];
        for axis in 0..axes {
            let ga: Vec<f64> = self.grads[m0][i].iter().map(|v| v[axis]).collect();
            let gb: Vec<f64> = self.grads[m1][i].iter().map(|v| v[axis]).collect();
            g[axis] = interpolate(&self.grid, &ga, p)? * (1.0 - w)
                + interpolate(&self.grid, &gb, p)? * w;
        }
        let mean = g.iter().sum::<f64>() / d as f64;
        Ok(g.iter().map(|v| v - mean).collect())
    }

    /// V^{i,j,k}(t,p) = (eps/sqrt(2)) (𝔡_{p_j} U^i − 𝔡_{p_k} U^i) sqrt(p_j p_k).
    pub fn eval_v(&self, t: f64, p: &SimplexPoint, i: usize, j: usize, k: usize) -> Result<f64> {
        if j == k {
            return Err(Error::invalid("eval_v needs j != k"));
        }
        let w = (p.get(j).max(0.0) * p.get(k).max(0.0)).sqrt();
        if w == 0.0 {
            return Ok(0.0);
        }
        let g = self.intrinsic_gradient(t, p, i)?;
        Ok(self.spec.epsilon / 2.0f64.sqrt() * (g[j] - g[k]) * w)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|m| m.iter().flat_map(|c| c.iter()))
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }
}

/// Drift tables (hat components) and sources for every component at time t,
/// with the field y read node-wise from `lag`.
fn tables_at(
    spec: &ModelSpec,
    grid: &SimplexGrid,
    t: f64,
    lag: &[Vec<f64>],
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let d = spec.d;
    let nn = grid.node_count();
    let mut drifts = vec![vec![Vec::new(); nn]; d];
    let mut sources = vec![vec![0.0; nn]; d];
    for id in 0..nn {
        let p = grid.node(id);
        let y: Vec<f64> = (0..d).map(|i| lag[i][id]).collect();
        for i in 0..d {
            let fv = spec.f.eval_node(t, i, id, p);
            let (b, f) = crate::model::coefficients_bf_with_cost(t, p, &y, i, spec, fv);
            drifts[i][id] = b[..d - 1].to_vec();
            sources[i][id] = f;
        }
    }
    (drifts, sources)
}

fn cfl_guard(grid: &SimplexGrid, dt: f64, drifts: &[Vec<Vec<f64>>]) -> Result<()> {
    let max_drift = drifts
        .iter()
        .flat_map(|comp| comp.iter())
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    if dt * max_drift > grid.dx() * (1.0 + 1e-12) {
        return Err(Error::CflViolation {
            dt,
            dx: grid.dx(),
            max_drift,
            suggested: 0.9 * grid.dx() / max_drift,
        });
    }
    Ok(())
}

/// Backward marching with per-step Picard lagging of B and F.
pub fn solve_master(spec: &ModelSpec, grid: &SimplexGrid, cfg: &MasterConfig) -> Result<MasterSolution> {
    spec.validate()?;
    if grid.dimension != spec.d {
        return Err(Error::invalid("grid dimension does not match the model"));
    }
    let steps = (spec.horizon / cfg.dt).round() as usize;
    if steps == 0 || (steps as f64 * cfg.dt - spec.horizon).abs() > 1e-9 {
        return Err(Error::invalid("dt must divide the horizon"));
    }
    let d = spec.d;
    let nn = grid.node_count();
    let diff = assemble_diffusion(grid, spec.epsilon);
    let times: Vec<f64> = (0..=steps).map(|m| m as f64 * cfg.dt).collect();
    let terminal: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            grid.nodes()
                .iter()
                .enumerate()
                .map(|(id, p)| spec.g.eval_node(spec.horizon, i, id, p))
                .collect()
        })
        .collect();
    let mut values = vec![Vec::new(); steps + 1];
    values[steps] = terminal.clone();
    let mut picard_iters = vec![0usize; steps];
    let mut picard_residuals = vec![0.0f64; steps];
    for m in (0..steps).rev() {
        let t = times[m];
        let u_next = values[m + 1].clone();
        let mut lag: Vec<Vec<f64>> = match cfg.lag_init {
            LagInit::PrevSlice => u_next.clone(),
            LagInit::Zero => vec![vec![0.0; nn]; d],
            LagInit::TerminalCost => terminal.clone(),
        };
        let mut history = Vec::new();
        let mut converged = false;
        for iter in 0..cfg.picard_max {
            let (drifts, sources) = tables_at(spec, grid, t, &lag);
            cfl_guard(grid, cfg.dt, &drifts)?;
            let mut new = Vec::with_capacity(d);
            for i in 0..d {
                let drift_op: SparseOp = assemble_drift(grid, &drifts[i]);
                let adv = drift_op.apply(&u_next[i]);
                let rhs: Vec<f64> = (0..nn)
                    .map(|id| u_next[i][id] + cfg.dt * (adv[id] + sources[i][id]))
                    .collect();
                new.push(solve_implicit(grid, &diff, cfg.dt, &rhs)?);
            }
            let gap = new
                .iter()
                .zip(&lag)
                .flat_map(|(a, b)| a.iter().zip(b.iter()))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            history.push(gap);
            lag = new;
            if gap < cfg.picard_tol {
                picard_iters[m] = iter + 1;
                picard_residuals[m] = gap;
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::PicardNonConvergence { max_iters: cfg.picard_max, history });
        }
        values[m] = lag;
    }
    let grads: Vec<Vec<Vec<Vec<f64>>>> = values
        .iter()
        .map(|slice| slice.iter().map(|comp| hat_gradient(grid, comp)).collect())
        .collect();
    Ok(MasterSolution {
        spec: spec.clone(),
        grid: grid.clone(),
        times,
        values,
        grads,
        picard_iters,
        picard_residuals,
    })
}

/// Residual of the discrete master equation: forward time difference plus
/// the spatial operator and source, evaluated on the computed slices.
#[derive(Debug, Clone, Copy)]
pub struct ResidualReport {
    pub sup: f64,
    pub mean_abs: f64,
}

pub fn residual(sol: &MasterSolution) -> Result<ResidualReport> {
    let spec = &sol.spec;
    let grid = &sol.grid;
    let d = spec.d;
    let nn = grid.node_count();
    let dt = sol.times[1] - sol.times[0];
    let diff = assemble_diffusion(grid, spec.epsilon);
    let mut sup = 0.0f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for m in 0..sol.times.len() - 1 {
        let (drifts, sources) = tables_at(spec, grid, sol.times[m], &sol.values[m]);
        for i in 0..d {
            let drift_op = assemble_drift(grid, &drifts[i]);
            let adv = drift_op.apply(&sol.values[m][i]);
            let dif = diff.apply(&sol.values[m][i]);
            for id in 0..nn {
                if grid.is_boundary(id) {
                    continue;
                }
                let dudt = (sol.values[m + 1][i][id] - sol.values[m][i][id]) / dt;
                let r = dudt + adv[id] + dif[id] + sources[i][id];
                sup = sup.max(r.abs());
                acc += r.abs();
                count += 1;
            }
        }
    }
    Ok(ResidualReport { sup, mean_abs: acc / count.max(1) as f64 })
}

/// The optimal feedback read from a master solution:
/// beta*(t, i, p)(j) = (U^i − U^j)_+.
pub struct MasterFeedback {
    sol: Arc<MasterSolution>,
    bound: f64,
}

impl MasterFeedback {
    pub fn new(sol: Arc<MasterSolution>) -> Self {
        let bound = 2.0 * sol.sup_norm();
        MasterFeedback { sol, bound }
    }

    pub fn solution(&self) -> &MasterSolution {
        &self.sol
    }
}

impl Feedback for MasterFeedback {
    fn rate(&self, t: f64, i: usize, p: &SimplexPoint, j: usize) -> f64 {
        let t = t.clamp(0.0, self.sol.spec.horizon);
        let u = self.sol.eval_u(t, p).expect("in-range evaluation");
        (u[i] - u[j]).max(0.0)
    }

    fn sup_bound(&self) -> f64 {
        self.bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CostFamily;
    use crate::simplex::build_grid;

    fn base_spec(d: usize) -> ModelSpec {
        ModelSpec {
            d,
            epsilon: 0.5,
            kappa: 0.5,
            delta: 0.05,
            horizon: 1.0,
            f: CostFamily::zero(),
            g: CostFamily::zero(),
        }
    }

    #[test]
    fn constant_cost_constant_solution() {
        for d in [2usize, 3] {
            let mut spec = base_spec(d);
            spec.g = CostFamily::Constant { c: 1.75 };
            let grid = build_grid(d, 12).unwrap();
            let sol = solve_master(&spec, &grid, &MasterConfig::new(0.02)).unwrap();
            for slice in &sol.values {
                for comp in slice {
                    for &v in comp {
                        assert!((v - 1.75).abs() < 1e-12);
                    }
                }
            }
            let rep = residual(&sol).unwrap();
            assert!(rep.sup <= 1e-10, "residual {}", rep.sup);
        }
    }

    #[test]
    fn unit_running_cost_linear_in_time() {
        let mut spec = base_spec(2);
        spec.f = CostFamily::Constant { c: 1.0 };
        let grid = build_grid(2, 20).unwrap();
        let sol = solve_master(&spec, &grid, &MasterConfig::new(0.01)).unwrap();
        for (m, &t) in sol.times.iter().enumerate() {
            for comp in &sol.values[m] {
                for &v in comp {
                    assert!((v - (spec.horizon - t)).abs() < 1e-10);
                }
            }
        }
        let rep = residual(&sol).unwrap();
        assert!(rep.sup <= 1e-8, "residual {}", rep.sup);
    }

    #[test]
    fn sup_norm_bound_holds() {
        let mut spec = base_spec(2);
        spec.g = CostFamily::AntiMonotonePair { gamma: 3.0 };
        spec.f = CostFamily::LinearInP { a: vec![0.5, -0.5], b: vec![0.0, 0.2] };
        let grid = build_grid(2, 30).unwrap();
        let sol = solve_master(&spec, &grid, &MasterConfig::new(5e-3)).unwrap();
        let bound = spec.g.sup_bound(2) + spec.horizon * spec.f.sup_bound(2);
        assert!(sol.sup_norm() <= bound + 1e-8, "{} > {}", sol.sup_norm(), bound);
    }

    #[test]
    fn symmetry_preservation() {
        // f, g symmetric under swapping the two states => U^1(p) = U^2(swap p)
        let mut spec = base_spec(2);
        spec.g = CostFamily::QuadraticInP { gamma: 2.0, target: vec![0.5, 0.5] };
        let grid = build_grid(2, 24).unwrap();
        let sol = solve_master(&spec, &grid, &MasterConfig::new(5e-3)).unwrap();
        let n = grid.resolution;
        for m in 0..sol.times.len() {
            for id in 0..grid.node_count() {
                let mirror = n - grid.label(id)[0];
                let mid = grid.index_of(&[mirror]).unwrap();
                assert!(
                    (sol.values[m][0][id] - sol.values[m][1][mid]).abs() < 1e-9,
                    "symmetry broken at m={m}, id={id}"
                );
            }
        }
    }

    #[test]
    fn eval_u_and_v_basics() {
        let mut spec = base_spec(2);
        spec.g = CostFamily::Constant { c: 2.0 };
        let grid = build_grid(2, 16).unwrap();
        let sol = solve_master(&spec, &grid, &MasterConfig::new(0.02)).unwrap();
        let p = SimplexPoint::new(vec![0.3, 0.7]).unwrap();
        let u = sol.eval_u(0.37, &p).unwrap();
        assert!((u[0] - 2.0).abs() < 1e-12 && (u[1] - 2.0).abs() < 1e-12);
        // constant solution: V vanishes up to solver roundoff
        assert!(sol.eval_v(0.37, &p, 0, 0, 1).unwrap().abs() < 1e-12);
        // vanishing coordinate: V = 0 regardless of the field
        let edge = SimplexPoint::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(sol.eval_v(0.5, &edge, 1, 0, 1).unwrap(), 0.0);
        // outside [0, T]
        assert!(sol.eval_u(1.5, &p).is_err());
    }

    #[test]
    fn intrinsic_gradient_sums_to_zero() {
        let mut spec = base_spec(3);
        spec.g = CostFamily::LinearInP { a: vec![1.0, -0.3, 0.1], b: vec![0.0; 3] };
        let grid = build_grid(3, 10).unwrap();
        let sol = solve_master(&spec, &grid, &MasterConfig::new(0.02)).unwrap();
        let p = SimplexPoint::new(vec![0.3, 0.3, 0.4]).unwrap();
        for i in 0..3 {
            let g = sol.intrinsic_gradient(0.4, &p, i).unwrap();
            assert!(g.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn refinement_reduces_residual() {
        let mut spec = base_spec(2);
        spec.epsilon = 0.5;
        spec.kappa = 61.0 * 0.25;
        spec.g = CostFamily::AntiMonotonePair { gamma: 1.0 };
        let mut sups = Vec::new();
        for (n, dt) in [(20usize, 2e-3), (40, 1e-3)] {
            let grid = build_grid(2, n).unwrap();
            let sol = solve_master(&spec, &grid, &MasterConfig::new(dt)).unwrap();
            sups.push(residual(&sol).unwrap().sup);
        }
        assert!(
            sups[1] * 1.7 <= sups[0],
            "residuals {:?} did not improve by 1.7x",
            sups
        );
    }

    #[test]
    fn lag_initializations_agree() {
        let mut spec = base_spec(2);
        spec.kappa = 61.0 * 0.25;
        spec.g = CostFamily::AntiMonotonePair { gamma: 3.0 };
        let grid = build_grid(2, 30).unwrap();
        let mut cfg = MasterConfig::new(1e-3);
        cfg.lag_init = LagInit::Zero;
        let a = solve_master(&spec, &grid, &cfg).unwrap();
        cfg.lag_init = LagInit::TerminalCost;
        let b = solve_master(&spec, &grid, &cfg).unwrap();
        let gap = a
            .values
            .iter()
            .zip(&b.values)
            .flat_map(|(x, y)| x.iter().zip(y.iter()))
            .flat_map(|(x, y)| x.iter().zip(y.iter()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(gap < 1e-6, "lag-init gap {gap}");
    }
}
