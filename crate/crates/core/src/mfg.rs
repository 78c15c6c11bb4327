//! Ties the master solution to the game: equilibrium path simulation, the
//! verification value identity, suboptimality probes with common random
//! numbers, and the eps = 0 non-uniqueness / restoration experiments.

use crate::error::{Error, Result};
use crate::master::{MasterFeedback, MasterSolution};
use crate::model::{drift_a, Feedback, FnFeedback, ModelSpec};
use crate::sde::{mc_cost_samples, mean_se, simulate, PathBundle, SchemeConfig};
use crate::simplex::SimplexPoint;
use rayon::prelude::*;
use std::sync::Arc;

/// Equilibrium trajectories with the value field evaluated along each path:
/// `u[path][slice][i] = U^i(t_slice, P_t)`.
#[derive(Debug, Clone)]
pub struct EquilibriumPaths {
    pub bundle: PathBundle,
    pub u: Vec<Vec<Vec<f64>>>,
}

/// Simulates the equilibrium forward SDE with feedback (U^i - U^j)_+ read
/// from the master solution.
pub fn simulate_equilibrium(
    sol: Arc<MasterSolution>,
    p0: &SimplexPoint,
    n_paths: usize,
    cfg: &SchemeConfig,
    seed: u64,
) -> Result<EquilibriumPaths> {
    let spec = sol.spec.clone();
    let feedback = MasterFeedback::new(sol.clone());
    let bundle = simulate(&spec, &feedback, None, p0, n_paths, cfg, seed)?;
    let u: Result<Vec<Vec<Vec<f64>>>> = bundle
        .paths_p
        .par_iter()
        .map(|traj| {
            traj.iter()
                .zip(&bundle.times)
                .map(|(p, &t)| sol.eval_u(t.min(spec.horizon), p))
                .collect()
        })
        .collect();
    Ok(EquilibriumPaths { bundle, u: u? })
}

/// Verification identity: Monte-Carlo cost under the optimal feedback versus
/// the master value U^l(0, p0). Returns (estimate, standard error, U^l, z).
pub fn verify_value(
    sol: Arc<MasterSolution>,
    p0: &SimplexPoint,
    l: usize,
    n_paths: usize,
    cfg: &SchemeConfig,
    seed: u64,
) -> Result<(f64, f64, f64, f64)> {
    let spec = sol.spec.clone();
    let feedback = MasterFeedback::new(sol.clone());
    let samples = mc_cost_samples(&spec, &feedback, &feedback, l, p0, n_paths, cfg, seed)?;
    let (est, se) = mean_se(&samples);
    let u0 = sol.eval_u(0.0, p0)?[l];
    let z = (est - u0) / se;
    Ok((est, se, u0, z))
}

/// Paired (common random numbers) suboptimality gap J(beta_alt) - J(beta*).
/// Returns (gap, standard error of the gap).
pub fn suboptimality_probe(
    sol: Arc<MasterSolution>,
    p0: &SimplexPoint,
    l: usize,
    beta_alt: &dyn Feedback,
    n_paths: usize,
    cfg: &SchemeConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let spec = sol.spec.clone();
    let star = MasterFeedback::new(sol.clone());
    let opt = mc_cost_samples(&spec, &star, &star, l, p0, n_paths, cfg, seed)?;
    let alt = mc_cost_samples(&spec, &star, beta_alt, l, p0, n_paths, cfg, seed)?;
    let diffs: Vec<f64> = alt.iter().zip(&opt).map(|(a, o)| a - o).collect();
    Ok(mean_se(&diffs))
}

/// One eps = 0 equilibrium candidate: deterministic flow plus value curves.
#[derive(Debug, Clone)]
pub struct ZeroNoiseEquilibrium {
    pub times: Vec<f64>,
    /// flow[m] in the simplex
    pub flow: Vec<SimplexPoint>,
    /// values[m][i]
    pub values: Vec<Vec<f64>>,
    /// sup distance between the last two sweep iterates
    pub residual: f64,
    /// terminal first-coordinate guess that seeded the sweep
    pub guess: f64,
}

fn backward_values(spec: &ModelSpec, flow: &[SimplexPoint], dt: f64) -> Vec<Vec<f64>> {
    // explicit Euler on -du^i/dt = F^i(t, P_t, u) with F from the generic
    // coefficients (the eps^2 term vanishes at eps = 0)
    let m = flow.len() - 1;
    let d = spec.d;
    let mut values = vec![vec![0.0; d]; m + 1];
    values[m] = (0..d).map(|i| spec.g.eval(spec.horizon, i, &flow[m])).collect();
    for k in (0..m).rev() {
        let t = (k + 1) as f64 * dt;
        let u_next = values[k + 1].clone();
        let p = &flow[k + 1];
        let phi: Vec<f64> = (0..d).map(|j| spec.phi(p.get(j))).collect();
        let mut u = u_next.clone();
        for i in 0..d {
            let coupling: f64 = (0..d).map(|j| phi[j] * (u_next[j] - u_next[i])).sum();
            let f = crate::model::hamiltonian(&u_next, i) + spec.f.eval(t, i, p) + coupling;
            u[i] += dt * f;
        }
        values[k] = u;
    }
    values
}

fn forward_flow(
    spec: &ModelSpec,
    values: &[Vec<f64>],
    p0: &SimplexPoint,
    dt: f64,
) -> Vec<SimplexPoint> {
    let m = values.len() - 1;
    let mut flow = Vec::with_capacity(m + 1);
    flow.push(p0.clone());
    for k in 0..m {
        let u = values[k].clone();
        let alpha = FnFeedback::new(f64::INFINITY, move |_, i, _, j| (u[i] - u[j]).max(0.0));
        let p = &flow[k];
        let a = drift_a(k as f64 * dt, p, &alpha, spec);
        let mut w: Vec<f64> = p.weights().to_vec();
        for i in 0..w.len() {
            w[i] = (w[i] + dt * a[i]).max(0.0);
        }
        let s: f64 = w.iter().sum();
        flow.push(SimplexPoint::new(w.iter().map(|x| x / s).collect()).expect("valid flow"));
    }
    flow
}

/// Damped forward-backward sweeps from a grid of terminal guesses, clustered
/// into distinct eps = 0 equilibria (d = 2).
pub fn zero_noise_equilibria(
    spec: &ModelSpec,
    p0: &SimplexPoint,
    guess_grid: &[f64],
    dt: f64,
    picard_tol: f64,
    max_sweeps: usize,
) -> Result<Vec<ZeroNoiseEquilibrium>> {
    if spec.d != 2 {
        return Err(Error::UnsupportedDimension(spec.d));
    }
    if spec.epsilon != 0.0 {
        return Err(Error::invalid("zero_noise_equilibria needs epsilon = 0"));
    }
    let m = (spec.horizon / dt).round() as usize;
    if m == 0 || (m as f64 * dt - spec.horizon).abs() > 1e-9 {
        return Err(Error::invalid("dt must divide the horizon"));
    }
    let times: Vec<f64> = (0..=m).map(|k| k as f64 * dt).collect();
    let converged: Vec<ZeroNoiseEquilibrium> = guess_grid
        .par_iter()
        .filter_map(|&guess| {
            // seed flow: linear interpolation p0 -> (guess, 1 - guess)
            let mut flow: Vec<SimplexPoint> = (0..=m)
                .map(|k| {
                    let s = k as f64 / m as f64;
                    let x = (p0.get(0) * (1.0 - s) + guess * s).clamp(0.0, 1.0);
                    SimplexPoint::from_raw(vec![x, 1.0 - x])
                })
                .collect();
            let mut residual = f64::INFINITY;
            for _ in 0..max_sweeps {
                let values = backward_values(spec, &flow, dt);
                let candidate = forward_flow(spec, &values, p0, dt);
                residual = flow
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a.get(0) - b.get(0)).abs())
                    .fold(0.0f64, f64::max);
                // damping 0.5
                flow = flow
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| {
                        let x = 0.5 * a.get(0) + 0.5 * b.get(0);
                        SimplexPoint::from_raw(vec![x, 1.0 - x])
                    })
                    .collect();
                if residual < picard_tol {
                    break;
                }
            }
            if residual < picard_tol {
                let values = backward_values(spec, &flow, dt);
                Some(ZeroNoiseEquilibrium { times: times.clone(), flow, values, residual, guess })
            } else {
                None
            }
        })
        .collect();
    // cluster by sup distance of the flow
    let threshold = 10.0 * picard_tol;
    let mut clusters: Vec<ZeroNoiseEquilibrium> = Vec::new();
    for eq in converged {
        let is_new = clusters.iter().all(|rep| {
            let dist = rep
                .flow
                .iter()
                .zip(&eq.flow)
                .map(|(a, b)| (a.get(0) - b.get(0)).abs())
                .fold(0.0f64, f64::max);
            dist > threshold
        });
        if is_new {
            clusters.push(eq);
        }
    }
    clusters.sort_by(|a, b| {
        a.flow
            .last()
            .unwrap()
            .get(0)
            .partial_cmp(&b.flow.last().unwrap().get(0))
            .unwrap()
    });
    Ok(clusters)
}

/// First and second moments of P_T across paths, with standard errors.
pub fn terminal_moments(bundle: &PathBundle, d: usize) -> Vec<(f64, f64, f64, f64)> {
    (0..d)
        .map(|i| {
            let xs: Vec<f64> =
                bundle.paths_p.iter().map(|tr| tr.last().unwrap().get(i)).collect();
            let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
            let (m1, s1) = mean_se(&xs);
            let (m2, s2) = mean_se(&sq);
            (m1, s1, m2, s2)
        })
        .collect()
}
