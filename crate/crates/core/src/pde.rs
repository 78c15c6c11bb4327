//! Backward-in-time IMEX finite differences for the linear Kimura equation
//! in the hat chart (index d dropped), d in {2, 3}: implicit degenerate
//! diffusion, explicit upwind drift, one-sided stencils at the boundary
//! (the normal diffusion coefficient vanishes there, so no boundary
//! condition is imposed), plus an empirical Hölder-exponent estimator.

use crate::error::{Error, Result};
use crate::simplex::{wf_distance, SimplexGrid, SimplexPoint};
use std::sync::Arc;

/// Iterative-solver tolerance for the implicit diffusion step at d = 3.
const LINSOLVE_TOL: f64 = 1e-10;
const LINSOLVE_MAX_ITERS: usize = 20_000;

/// Values on a space-time grid; `values[m][node]`, times ascending.
#[derive(Debug, Clone)]
pub struct FieldOnGrid {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl FieldOnGrid {
    pub fn slice(&self, m: usize) -> &[f64] {
        &self.values[m]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }
}

type DriftFn = Arc<dyn Fn(f64, &SimplexPoint, usize) -> f64 + Send + Sync>;
type SourceFn = Arc<dyn Fn(f64, &SimplexPoint) -> f64 + Send + Sync>;
type TerminalFn = Arc<dyn Fn(&SimplexPoint) -> f64 + Send + Sync>;

/// Linear Kimura problem
///   d_t u + sum_j (phi(p_j) + b_j + p_j b_ring_j) 𝔡_j u
///         + eps^2/2 sum_{jk} (p_j δ_jk − p_j p_k) 𝔡²_jk u + h = 0,  u(T) = ℓ,
/// with the zero-sum compatibility sum_j (phi(p_j) + b_j + p_j b_ring_j) = 0.
#[derive(Clone)]
pub struct LinearKimuraProblem {
    pub epsilon: f64,
    pub kappa: f64,
    pub delta: f64,
    pub horizon: f64,
    /// b_j(t, p) >= 0
    pub b: DriftFn,
    /// b_ring_j(t, p)
    pub b_ring: DriftFn,
    pub source: SourceFn,
    pub terminal: TerminalFn,
}

impl LinearKimuraProblem {
    /// Pure Wright–Fisher problem (b = b° = 0, phi = 0, h = 0).
    pub fn pure_wf(epsilon: f64, horizon: f64, terminal: TerminalFn) -> Self {
        LinearKimuraProblem {
            epsilon,
            kappa: 0.0,
            delta: 0.1,
            horizon,
            b: Arc::new(|_, _, _| 0.0),
            b_ring: Arc::new(|_, _, _| 0.0),
            source: Arc::new(|_, _| 0.0),
            terminal,
        }
    }

    fn phi(&self, r: f64) -> f64 {
        crate::model::phi_eval(r.max(0.0), self.kappa, self.delta).expect("r >= 0")
    }

    /// Full drift coefficient of coordinate j: phi(p_j) + b_j + p_j b_ring_j.
    pub fn drift_coeff(&self, t: f64, p: &SimplexPoint, j: usize) -> f64 {
        self.phi(p.get(j)) + (self.b)(t, p, j) + p.get(j) * (self.b_ring)(t, p, j)
    }
}

/// Row-compressed sparse operator on grid nodes.
#[derive(Debug, Clone)]
pub struct SparseOp {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseOp {
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, c)| c * u[j]).sum())
            .collect()
    }

    fn add(&mut self, i: usize, j: usize, c: f64) {
        if c != 0.0 {
            self.rows[i].push((j, c));
        }
    }
}

/// Discretized Wright–Fisher diffusion eps^2/2 sum (x_j δ_jk − x_j x_k) ∂²_jk
/// in the hat chart. All off-diagonal weights are nonnegative and row sums
/// vanish (an M-matrix after I − Δt·D), with exact zeros at the boundary so
/// no out-of-domain node is ever referenced.
pub fn assemble_diffusion(grid: &SimplexGrid, epsilon: f64) -> SparseOp {
    let n = grid.resolution;
    let h2 = grid.dx() * grid.dx();
    let half_e2 = 0.5 * epsilon * epsilon;
    let mut op = SparseOp { rows: vec![Vec::new(); grid.node_count()] };
    match grid.dimension {
        2 => {
            for id in 0..grid.node_count() {
                let i = grid.label(id)[0];
                if i == 0 || i == n {
                    continue; // x(1-x) = 0: degenerate, no row
                }
                let x = i as f64 / n as f64;
                let a = half_e2 * x * (1.0 - x) / h2;
                op.add(id, id - 1, a);
                op.add(id, id + 1, a);
                op.add(id, id, -2.0 * a);
            }
        }
        3 => {
            // 7-point monotone stencil for the negative cross coefficient
            // a12 = -eps^2/2 x1 x2; the neighbor weights reduce to
            // x1 x3, x2 x3 (axis) and x1 x2 (anti-diagonal corners), which
            // vanish exactly on the corresponding faces.
            for id in 0..grid.node_count() {
                let lab = grid.label(id);
                let (i, j) = (lab[0], lab[1]);
                let k = n - i - j;
                let (x1, x2, x3) =
                    (i as f64 / n as f64, j as f64 / n as f64, k as f64 / n as f64);
                let w_x1 = half_e2 * x1 * x3 / h2; // to (i±1, j)
                let w_x2 = half_e2 * x2 * x3 / h2; // to (i, j±1)
                let w_c = half_e2 * x1 * x2 / h2; // to (i+1,j-1), (i-1,j+1)
                let mut diag = 0.0;
                let mut link = |op: &mut SparseOp, di: i64, dj: i64, w: f64| {
                    if w == 0.0 {
                        return;
                    }
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    let nb = grid
                        .index_of(&[ni as usize, nj as usize])
                        .expect("nonzero weight implies in-domain neighbor");
                    op.rows[id].push((nb, w));
                    diag -= w;
                };
                link(&mut op, 1, 0, w_x1);
                link(&mut op, -1, 0, w_x1);
                link(&mut op, 0, 1, w_x2);
                link(&mut op, 0, -1, w_x2);
                link(&mut op, 1, -1, w_c);
                link(&mut op, -1, 1, w_c);
                op.add(id, id, diag);
            }
        }
        d => panic!("unsupported grid dimension {d}"),
    }
    op
}

/// First-order upwind discretization of sum_{j<d} c_j ∂_{x_j}; `c[node][j]`
/// are the hat-chart drift components. Where the upwind neighbor would leave
/// the domain the inward one-sided difference is used instead.
pub fn assemble_drift(grid: &SimplexGrid, c: &[Vec<f64>]) -> SparseOp {
    let n = grid.resolution;
    let h = grid.dx();
    let mut op = SparseOp { rows: vec![Vec::new(); grid.node_count()] };
    let dims = grid.dimension - 1;
    for id in 0..grid.node_count() {
        let lab = grid.label(id).to_vec();
        for axis in 0..dims {
            let cj = c[id][axis];
            if cj == 0.0 {
                continue;
            }
            let mut fwd = lab.clone();
            fwd[axis] += 1;
            let mut bwd = lab.clone();
            let has_bwd = lab[axis] > 0;
            if has_bwd {
                bwd[axis] -= 1;
            }
            let in_domain = |l: &[usize]| -> Option<usize> {
                if grid.dimension == 2 {
                    (l[0] <= n).then(|| l[0])
                } else {
                    (l[0] + l[1] <= n).then(|| grid.index_of(l))?
                }
            };
            let fwd_id = in_domain(&fwd);
            let bwd_id = if has_bwd { in_domain(&bwd) } else { None };
            // upwind by sign, falling back to the inward-pointing side; at
            // the two d=3 corners without axis-aligned neighbors the term is
            // dropped (compatible drifts vanish against the zero coordinate
            // there)
            let use_fwd = match (cj > 0.0, fwd_id.is_some(), bwd_id.is_some()) {
                (_, false, false) => continue,
                (true, true, _) => true,
                (true, false, true) => false,
                (false, _, true) => false,
                (false, true, false) => true,
            };
            if use_fwd {
                let f = fwd_id.expect("at least one neighbor exists along each axis");
                op.add(id, f, cj / h);
                op.add(id, id, -cj / h);
            } else {
                let b = bwd_id.expect("at least one neighbor exists along each axis");
                op.add(id, b, -cj / h);
                op.add(id, id, cj / h);
            }
        }
    }
    op
}

/// Full spatial operator (diffusion + upwind drift) at fixed coefficients.
pub fn assemble_local_operator(grid: &SimplexGrid, epsilon: f64, c: &[Vec<f64>]) -> SparseOp {
    let diff = assemble_diffusion(grid, epsilon);
    let drift = assemble_drift(grid, c);
    let mut op = SparseOp { rows: vec![Vec::new(); grid.node_count()] };
    for id in 0..grid.node_count() {
        let mut row: Vec<(usize, f64)> = Vec::new();
        for &(j, v) in diff.rows[id].iter().chain(drift.rows[id].iter()) {
            if let Some(e) = row.iter_mut().find(|e| e.0 == j) {
                e.1 += v;
            } else {
                row.push((j, v));
            }
        }
        op.rows[id] = row;
    }
    op
}

/// Solves (I − dt·D) u = rhs for the assembled diffusion D: Thomas algorithm
/// for the tridiagonal d=2 system, diagonally-preconditioned Gauss–Seidel
/// sweeps for d=3.
pub fn solve_implicit(grid: &SimplexGrid, diff: &SparseOp, dt: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let nn = grid.node_count();
    if grid.dimension == 2 {
        // build tridiagonal I - dt D (node ids are ordered along the line)
        let mut lower = vec![0.0; nn];
        let mut diag = vec![1.0; nn];
        let mut upper = vec![0.0; nn];
        for (i, row) in diff.rows.iter().enumerate() {
            for &(j, v) in row {
                if j == i {
                    diag[i] -= dt * v;
                } else if j + 1 == i {
                    lower[i] = -dt * v;
                } else if j == i + 1 {
                    upper[i] = -dt * v;
                } else {
                    return Err(Error::invalid("non-tridiagonal structure at d=2"));
                }
            }
        }
        // Thomas sweep
        let mut c = vec![0.0; nn];
        let mut x = vec![0.0; nn];
        c[0] = upper[0] / diag[0];
        x[0] = rhs[0] / diag[0];
        for i in 1..nn {
            let m = diag[i] - lower[i] * c[i - 1];
            c[i] = upper[i] / m;
            x[i] = (rhs[i] - lower[i] * x[i - 1]) / m;
        }
        for i in (0..nn - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        Ok(x)
    } else {
        // Gauss–Seidel on the strictly diagonally dominant M-matrix
        let mut x = rhs.to_vec();
        let diag: Vec<f64> = (0..nn)
            .map(|i| {
                1.0 - dt
                    * diff.rows[i]
                        .iter()
                        .find(|&&(j, _)| j == i)
                        .map(|&(_, v)| v)
                        .unwrap_or(0.0)
            })
            .collect();
        for _ in 0..LINSOLVE_MAX_ITERS {
            let mut max_res = 0.0f64;
            for i in 0..nn {
                let mut off = 0.0;
                for &(j, v) in &diff.rows[i] {
                    if j != i {
                        off += -dt * v * x[j];
                    }
                }
                let xi = (rhs[i] - off) / diag[i];
                max_res = max_res.max((xi - x[i]).abs());
                x[i] = xi;
            }
            if max_res < LINSOLVE_TOL {
                return Ok(x);
            }
        }
        Err(Error::invalid("implicit diffusion solve did not converge"))
    }
}

fn check_cfl(dt: f64, dx: f64, c: &[Vec<f64>]) -> Result<()> {
    let max_drift = c
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    if dt * max_drift > dx * (1.0 + 1e-12) {
        return Err(Error::CflViolation {
            dt,
            dx,
            max_drift,
            suggested: 0.9 * dx / max_drift,
        });
    }
    Ok(())
}

/// Hat-chart drift components at every node: c_j = phi(p_j) + b_j + p_j b°_j
/// for j < d (the dropped-coordinate term is absorbed by the zero sum).
fn drift_table(problem: &LinearKimuraProblem, grid: &SimplexGrid, t: f64) -> Result<Vec<Vec<f64>>> {
    let d = grid.dimension;
    let mut table = Vec::with_capacity(grid.node_count());
    for node in grid.nodes() {
        let all: Vec<f64> = (0..d).map(|j| problem.drift_coeff(t, node, j)).collect();
        let sum: f64 = all.iter().sum();
        if sum.abs() > 1e-10 {
            return Err(Error::invalid(format!(
                "zero-sum compatibility violated at t={t}: sum = {sum:e}"
            )));
        }
        table.push(all[..d - 1].to_vec());
    }
    Ok(table)
}

/// Backward IMEX marching of the linear Kimura equation.
pub fn solve_linear(
    problem: &LinearKimuraProblem,
    grid: &SimplexGrid,
    dt: f64,
) -> Result<FieldOnGrid> {
    let steps = (problem.horizon / dt).round() as usize;
    if steps == 0 || (steps as f64 * dt - problem.horizon).abs() > 1e-9 {
        return Err(Error::invalid("dt must divide the horizon"));
    }
    let diff = assemble_diffusion(grid, problem.epsilon);
    let times: Vec<f64> = (0..=steps).map(|m| m as f64 * dt).collect();
    let mut values = vec![Vec::new(); steps + 1];
    values[steps] = grid.nodes().iter().map(|p| (problem.terminal)(p)).collect();
    for m in (0..steps).rev() {
        let t_next = times[m + 1];
        let c = drift_table(problem, grid, t_next)?;
        check_cfl(dt, grid.dx(), &c)?;
        let drift = assemble_drift(grid, &c);
        let u_next = &values[m + 1];
        let adv = drift.apply(u_next);
        let rhs: Vec<f64> = (0..grid.node_count())
            .map(|id| u_next[id] + dt * (adv[id] + (problem.source)(t_next, grid.node(id))))
            .collect();
        values[m] = solve_implicit(grid, &diff, dt, &rhs)?;
    }
    Ok(FieldOnGrid { times, values })
}

/// Piecewise-linear interpolation of a nodal field at an arbitrary simplex
/// point: segment-linear for d = 2, barycentric on the triangulated lattice
/// for d = 3.
pub fn interpolate(grid: &SimplexGrid, values: &[f64], p: &SimplexPoint) -> Result<f64> {
    if values.len() != grid.node_count() {
        return Err(Error::invalid("field/grid size mismatch"));
    }
    let n = grid.resolution;
    let nf = n as f64;
    match grid.dimension {
        2 => {
            let x = (p.get(0) * nf).clamp(0.0, nf);
            let i = (x.floor() as usize).min(n - 1);
            let f = x - i as f64;
            Ok(values[i] * (1.0 - f) + values[i + 1] * f)
        }
        3 => {
            let x = (p.get(0) * nf).clamp(0.0, nf);
            let y = (p.get(1) * nf).clamp(0.0, nf);
            let mut i = (x.floor() as usize).min(n - 1);
            let mut j = (y.floor() as usize).min(n - 1);
            // clamp the cell into the triangle
            while i + j > n - 1 {
                if i >= j && i > 0 {
                    i -= 1;
                } else if j > 0 {
                    j -= 1;
                } else {
                    break;
                }
            }
            let fx = (x - i as f64).clamp(0.0, 1.0);
            let fy = (y - j as f64).clamp(0.0, 1.0);
            let at = |a: usize, b: usize| -> f64 {
                values[grid.index_of(&[a, b]).expect("cell inside triangle")]
            };
            if fx + fy <= 1.0 {
                Ok(at(i, j) * (1.0 - fx - fy) + at(i + 1, j) * fx + at(i, j + 1) * fy)
            } else {
                let w = fx + fy - 1.0;
                Ok(at(i + 1, j) * (1.0 - fy)
                    + at(i, j + 1) * (1.0 - fx)
                    + if i + j + 2 <= n { at(i + 1, j + 1) * w } else { (at(i + 1, j) + at(i, j + 1)) * 0.5 * w })
            }
        }
        d => Err(Error::UnsupportedDimension(d)),
    }
}

/// Empirical Hölder estimate of a nodal field against the Wright–Fisher
/// distance: log-log regression of per-bin max oscillation over 20
/// logarithmic distance bins in [dx, 1]. Returns (exponent, constant); a
/// numerically constant field yields the sentinel (infinity, 0).
pub fn holder_estimate(values: &[f64], grid: &SimplexGrid) -> Result<(f64, f64)> {
    if values.len() != grid.node_count() {
        return Err(Error::invalid("field/grid size mismatch"));
    }
    let n_bins = 20;
    let lo = grid.dx();
    let hi = 1.0f64; // half the WF diameter of the simplex
    let log_lo = lo.ln();
    let log_hi = hi.ln();
    let mut bin_max = vec![0.0f64; n_bins];
    let nn = grid.node_count();
    // subsample pairs on large grids to keep this O(10^7)
    let stride = ((nn * nn) / 10_000_000 + 1).max(1);
    let mut counter = 0usize;
    for a in 0..nn {
        for b in (a + 1)..nn {
            counter += 1;
            if counter % stride != 0 {
                continue;
            }
            let dist = wf_distance(grid.node(a), grid.node(b))?;
            if dist < lo || dist > hi {
                continue;
            }
            let bin = (((dist.ln() - log_lo) / (log_hi - log_lo)) * n_bins as f64)
                .floor()
                .clamp(0.0, n_bins as f64 - 1.0) as usize;
            let osc = (values[a] - values[b]).abs();
            if osc > bin_max[bin] {
                bin_max[bin] = osc;
            }
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, &osc) in bin_max.iter().enumerate() {
        if osc > 1e-14 {
            let center = log_lo + (k as f64 + 0.5) / n_bins as f64 * (log_hi - log_lo);
            xs.push(center);
            ys.push(osc.ln());
        }
    }
    if xs.len() < 2 {
        return Ok((f64::INFINITY, 0.0)); // constant field sentinel
    }
    let slope = crate::sde::fit_slope(&xs, &ys);
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let intercept = (my - slope * mx).exp();
    Ok((slope, intercept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::build_grid;

    fn quadratic_oracle(epsilon: f64, horizon: f64, t: f64, p: f64) -> f64 {
        p + (p * p - p) * (-epsilon * epsilon * (horizon - t)).exp()
    }

    #[test]
    fn operator_annihilates_constants() {
        for d in [2usize, 3] {
            let grid = build_grid(d, 16).unwrap();
            let c: Vec<Vec<f64>> = grid
                .nodes()
                .iter()
                .enumerate()
                .map(|(id, _)| vec![0.3 * (id as f64).sin(); d - 1])
                .collect();
            let op = assemble_local_operator(&grid, 0.7, &c);
            let ones = vec![1.0; grid.node_count()];
            for v in op.apply(&ones) {
                assert!(v.abs() < 1e-12);
            }
            // row sums vanish everywhere
            for row in &op.rows {
                let s: f64 = row.iter().map(|&(_, v)| v).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn operator_on_linear_field_gives_drift() {
        let grid = build_grid(2, 50).unwrap();
        let c: Vec<Vec<f64>> =
            (0..grid.node_count()).map(|id| vec![0.5 - 0.01 * id as f64]).collect();
        let op = assemble_local_operator(&grid, 0.4, &c);
        let field: Vec<f64> = grid.nodes().iter().map(|p| p.get(0)).collect();
        let applied = op.apply(&field);
        for (id, v) in applied.iter().enumerate() {
            assert!((v - c[id][0]).abs() < 1e-10, "node {id}: {v} vs {}", c[id][0]);
        }
    }

    #[test]
    fn constant_terminal_is_exact() {
        for d in [2usize, 3] {
            let grid = build_grid(d, 12).unwrap();
            let problem = LinearKimuraProblem::pure_wf(0.5, 1.0, Arc::new(|_| 3.25));
            let sol = solve_linear(&problem, &grid, 0.05).unwrap();
            for slice in &sol.values {
                for &v in slice {
                    assert!((v - 3.25).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_terminal_is_scheme_exact() {
        let grid = build_grid(2, 200).unwrap();
        let problem = LinearKimuraProblem::pure_wf(0.5, 1.0, Arc::new(|p| p.get(0)));
        let sol = solve_linear(&problem, &grid, 1e-3).unwrap();
        for slice in &sol.values {
            for (id, &v) in slice.iter().enumerate() {
                assert!((v - grid.node(id).get(0)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn quadratic_moment_oracle_and_refinement() {
        let eps = 0.5;
        let horizon = 1.0;
        let mut errs = Vec::new();
        for (n, dt) in [(50usize, 4e-3), (100, 2e-3)] {
            let grid = build_grid(2, n).unwrap();
            let problem =
                LinearKimuraProblem::pure_wf(eps, horizon, Arc::new(|p| p.get(0) * p.get(0)));
            let sol = solve_linear(&problem, &grid, dt).unwrap();
            let mut err = 0.0f64;
            for (m, &t) in sol.times.iter().enumerate() {
                for (id, &v) in sol.values[m].iter().enumerate() {
                    let exact = quadratic_oracle(eps, horizon, t, grid.node(id).get(0));
                    err = err.max((v - exact).abs());
                }
            }
            errs.push(err);
        }
        assert!(errs[0] < 1e-3, "coarse error {}", errs[0]);
        assert!(errs[1] * 1.7 <= errs[0], "refinement ratio {}", errs[0] / errs[1]);
    }

    #[test]
    fn discrete_maximum_principle() {
        let grid = build_grid(3, 14).unwrap();
        let mut problem = LinearKimuraProblem::pure_wf(0.6, 0.5, Arc::new(|p| {
            (7.0 * p.get(0)).sin() + 0.5 * (3.0 * p.get(1)).cos()
        }));
        problem.kappa = 1.0;
        problem.delta = 0.1;
        // compatible drift: b_j = -phi(p_j) + mean of phis keeps the sum zero
        // and stays bounded. Simpler: use b_ring from a potential so that the
        // zero-sum holds: take b_j = 0 and phi absorbed via kappa = 0 instead.
        problem.kappa = 0.0;
        let sol = solve_linear(&problem, &grid, 0.01).unwrap();
        let lmax = sol.values.last().unwrap().iter().cloned().fold(f64::MIN, f64::max);
        let lmin = sol.values.last().unwrap().iter().cloned().fold(f64::MAX, f64::min);
        for slice in &sol.values {
            for &v in slice {
                assert!(v <= lmax + 1e-10 && v >= lmin - 1e-10);
            }
        }
    }

    #[test]
    fn cfl_violation_is_refused() {
        let grid = build_grid(2, 20).unwrap();
        let mut problem = LinearKimuraProblem::pure_wf(0.5, 1.0, Arc::new(|p| p.get(0)));
        // strong compatible drift: c_0 = 20 (1/2 - p_0), c_1 = -c_0
        problem.b = Arc::new(|_, p, j| {
            let v = 20.0 * (0.5 - p.get(0));
            if j == 0 {
                v.max(0.0)
            } else {
                (-v).max(0.0)
            }
        });
        problem.b_ring = Arc::new(|_, p, j| {
            let v = 20.0 * (0.5 - p.get(0));
            if j == 0 {
                (-(-v).max(0.0)) / p.get(0).max(1e-9)
            } else {
                -(v.max(0.0)) / p.get(1).max(1e-9)
            }
        });
        let err = solve_linear(&problem, &grid, 0.1);
        assert!(matches!(err, Err(Error::CflViolation { .. })), "{err:?}");
    }

    #[test]
    fn holder_constant_field_sentinel() {
        let grid = build_grid(2, 40).unwrap();
        let field = vec![2.0; grid.node_count()];
        let (eta, _) = holder_estimate(&field, &grid).unwrap();
        assert!(eta.is_infinite());
    }

    #[test]
    fn holder_linear_field_exponent() {
        let grid = build_grid(2, 100).unwrap();
        let field: Vec<f64> = grid.nodes().iter().map(|p| p.get(0)).collect();
        let (eta, _) = holder_estimate(&field, &grid).unwrap();
        assert!((0.9..=2.0).contains(&eta), "eta = {eta}");
    }

    #[test]
    fn holder_rough_drift_solution() {
        let grid = build_grid(2, 100).unwrap();
        let mut problem = LinearKimuraProblem::pure_wf(0.5, 0.5, Arc::new(|p| {
            if p.get(0) > 0.5 { 1.0 } else { 0.0 }
        }));
        // merely-continuous compatible drift: c_0 = |p_0 - 1/2| p_0 p_1 and
        // c_1 = -c_0, realized through bounded b_ring coefficients
        problem.b_ring = Arc::new(|_, p, j| {
            let a = (p.get(0) - 0.5).abs();
            if j == 0 {
                a * p.get(1)
            } else {
                -a * p.get(0)
            }
        });
        let sol = solve_linear(&problem, &grid, 2e-3).unwrap();
        let (eta, _) = holder_estimate(&sol.values[0], &grid).unwrap();
        assert!(eta >= 0.3, "eta = {eta}");
    }

    #[test]
    fn d3_quadratic_consistency() {
        // no closed form needed: compare the d=3 solver against itself under
        // refinement on a smooth terminal condition
        let term: TerminalFn = Arc::new(|p| p.get(0) * p.get(0) + 0.5 * p.get(1));
        let mut sols = Vec::new();
        for (n, dt) in [(10usize, 2e-2), (20, 1e-2)] {
            let problem = LinearKimuraProblem::pure_wf(0.5, 0.5, term.clone());
            let grid = build_grid(3, n).unwrap();
            sols.push((n, solve_linear(&problem, &grid, dt).unwrap()));
        }
        // compare at shared nodes (coarse labels scale by 2)
        let coarse_grid = build_grid(3, 10).unwrap();
        let fine_grid = build_grid(3, 20).unwrap();
        let mut gap = 0.0f64;
        for id in 0..coarse_grid.node_count() {
            let lab = coarse_grid.label(id);
            let fid = fine_grid.index_of(&[2 * lab[0], 2 * lab[1]]).unwrap();
            gap = gap.max((sols[0].1.values[0][id] - sols[1].1.values[0][fid]).abs());
        }
        assert!(gap < 5e-3, "self-convergence gap {gap}");
    }
}
