//! Euler–Maruyama simulation of the forward population process P and the
//! conditional mass process Q, Monte-Carlo cost evaluation, and the
//! exponential-moment diagnostics.

use crate::error::{Error, Result};
use crate::model::{Feedback, ModelSpec};
use crate::rng::{domain, StreamRng};
use crate::simplex::SimplexPoint;
use rayon::prelude::*;

/// Guard below which step_Q refuses to form the ratio Q^i sqrt(P^j / P^i).
pub const Q_BOUNDARY_FLOOR: f64 = 1e-10;

/// One antisymmetric Brownian increment matrix; only the i < j entries are
/// drawn, so antisymmetry and the zero diagonal hold exactly by construction.
#[derive(Debug, Clone)]
pub struct AntisymIncrement {
    d: usize,
    upper: Vec<f64>,
}

impl AntisymIncrement {
    fn flat_index(&self, i: usize, j: usize) -> usize {
        // index of (i, j) with i < j in row-major upper-triangle order
        i * self.d - i * (i + 1) / 2 + (j - i - 1)
    }

    /// The signed entry dW̄^{ij}; zero on the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else if i < j {
            self.upper[self.flat_index(i, j)]
        } else {
            -self.upper[self.flat_index(j, i)]
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }
}

/// Draw one increment matrix: i < j entries i.i.d. N(0, dt).
pub fn draw_increments(d: usize, dt: f64, rng: &mut StreamRng) -> AntisymIncrement {
    let sd = dt.sqrt();
    let n = d * d.saturating_sub(1) / 2;
    let upper = (0..n).map(|_| sd * rng.next_normal()).collect();
    AntisymIncrement { d, upper }
}

/// Time-stepping parameters. The scheme is fixed: drift-explicit
/// Euler–Maruyama with square-root arguments clamped at zero and a
/// mass-conserving clip after every step.
#[derive(Debug, Clone, Copy)]
pub struct SchemeConfig {
    pub dt: f64,
    /// Entries of P below this trigger the step_Q boundary guard.
    pub q_floor: f64,
    /// Store every k-th time slice in the bundle (the final slice is always
    /// kept); 1 stores everything.
    pub store_every: usize,
}

impl SchemeConfig {
    pub fn new(dt: f64) -> Self {
        SchemeConfig { dt, q_floor: Q_BOUNDARY_FLOOR, store_every: 1 }
    }

    pub fn with_stride(dt: f64, store_every: usize) -> Self {
        SchemeConfig { dt, q_floor: Q_BOUNDARY_FLOOR, store_every: store_every.max(1) }
    }

    /// Number of steps covering [0, T]; dt must divide T within 1e-12.
    pub fn steps(&self, horizon: f64) -> Result<usize> {
        if self.dt <= 0.0 {
            return Err(Error::invalid("dt must be positive"));
        }
        let m = (horizon / self.dt).round();
        if (m * self.dt - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return Err(Error::invalid(format!(
                "dt = {} does not divide T = {horizon}",
                self.dt
            )));
        }
        Ok(m as usize)
    }
}

/// One Euler step of the population process; returns the new point and the
/// total mass clipped away from negative coordinates.
pub fn step_p_tracked(
    p: &SimplexPoint,
    t: f64,
    dw: &AntisymIncrement,
    alpha: &dyn Feedback,
    spec: &ModelSpec,
    cfg: &SchemeConfig,
) -> (SimplexPoint, f64) {
    let d = p.dim();
    let phi: Vec<f64> = (0..d).map(|i| spec.phi(p.get(i))).collect();
    let sqrt_p: Vec<f64> = (0..d).map(|i| p.get(i).max(0.0).sqrt()).collect();
    let mut x: Vec<f64> = p.weights().to_vec();
    for i in 0..d {
        for j in (i + 1)..d {
            // drift and noise both enter as a single pairwise flow so that
            // the coordinate sum is conserved up to accumulation rounding
            let u = p.get(j) * (phi[i] + alpha.rate(t, j, p, i));
            let v = p.get(i) * (phi[j] + alpha.rate(t, i, p, j));
            let flow = (u - v) * cfg.dt + spec.epsilon * sqrt_p[i] * sqrt_p[j] * dw.get(i, j);
            x[i] += flow;
            x[j] -= flow;
        }
    }
    // mass-conserving clip: zero out negatives, charge the deficit (and any
    // rounding drift of the sum) to the largest coordinate
    let mut deficit = 0.0;
    for xi in x.iter_mut() {
        if *xi < 0.0 {
            deficit -= *xi;
            *xi = 0.0;
        }
    }
    let sum: f64 = x.iter().sum();
    let argmax = (0..d)
        .max_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite weights"))
        .expect("d >= 2");
    x[argmax] -= sum - 1.0;
    (SimplexPoint::from_raw(x), deficit)
}

/// One Euler step of the population process.
pub fn step_p(
    p: &SimplexPoint,
    t: f64,
    dw: &AntisymIncrement,
    alpha: &dyn Feedback,
    spec: &ModelSpec,
    cfg: &SchemeConfig,
) -> SimplexPoint {
    step_p_tracked(p, t, dw, alpha, spec, cfg).0
}

/// One Euler step of the conditional mass process. The multiplicative noise
/// Q^i sqrt(P^j / P^i) is formed as sqrt(P^i P^j) * (Q^i / P^i) so that the
/// step coincides with [`step_p`] when Q = P and beta = alpha.
pub fn step_q(
    q: &[f64],
    p: &SimplexPoint,
    t: f64,
    dw: &AntisymIncrement,
    beta: &dyn Feedback,
    spec: &ModelSpec,
    cfg: &SchemeConfig,
) -> Result<Vec<f64>> {
    let d = p.dim();
    for i in 0..d {
        if p.get(i) < cfg.q_floor {
            return Err(Error::BoundaryGuard { index: i, value: p.get(i), floor: cfg.q_floor });
        }
    }
    let phi: Vec<f64> = (0..d).map(|i| spec.phi(p.get(i))).collect();
    let sqrt_p: Vec<f64> = (0..d).map(|i| p.get(i).sqrt()).collect();
    let mut x = q.to_vec();
    for i in 0..d {
        let mut incr = 0.0;
        for j in 0..d {
            if j == i {
                continue;
            }
            incr += (q[j] * (phi[i] + beta.rate(t, j, p, i))
                - q[i] * (phi[j] + beta.rate(t, i, p, j)))
                * cfg.dt;
            incr += spec.epsilon * sqrt_p[i] * sqrt_p[j] * (q[i] / p.get(i)) * dw.get(i, j);
        }
        x[i] += incr;
    }
    for xi in x.iter_mut() {
        if *xi < 0.0 {
            *xi = 0.0;
        }
    }
    Ok(x)
}

/// Simulated trajectories; slices are stored per `store_every`.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub times: Vec<f64>,
    /// paths_p[path][slice]
    pub paths_p: Vec<Vec<SimplexPoint>>,
    /// paths_q[path][slice], present when a tagged-player strategy was given
    pub paths_q: Option<Vec<Vec<Vec<f64>>>>,
    pub stream_ids: Vec<u64>,
    /// Total mass removed by the negative-coordinate clip, summed over paths.
    pub clip_mass: f64,
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.paths_p.len()
    }

    /// Fraction of paths whose minimum stored coordinate dips below `thr`.
    pub fn boundary_dip_fraction(&self, thr: f64) -> f64 {
        if self.paths_p.is_empty() {
            return 0.0;
        }
        let dips = self
            .paths_p
            .iter()
            .filter(|traj| traj.iter().any(|p| p.min_coordinate() < thr))
            .count();
        dips as f64 / self.paths_p.len() as f64
    }
}

fn simulate_one_path(
    spec: &ModelSpec,
    alpha: &dyn Feedback,
    beta: Option<&dyn Feedback>,
    q0: Option<&[f64]>,
    p0: &SimplexPoint,
    cfg: &SchemeConfig,
    seed: u64,
    path_id: u64,
    m: usize,
) -> Result<(Vec<SimplexPoint>, Option<Vec<Vec<f64>>>, f64)> {
    let mut rng = StreamRng::from_parts(seed, &[domain::SDE_PATH, path_id]);
    let mut p = p0.clone();
    let mut q = q0.map(|q| q.to_vec());
    let mut traj_p = Vec::with_capacity(m / cfg.store_every + 2);
    let mut traj_q: Option<Vec<Vec<f64>>> = q.as_ref().map(|_| Vec::new());
    let mut clip = 0.0;
    traj_p.push(p.clone());
    if let (Some(tq), Some(qv)) = (traj_q.as_mut(), q.as_ref()) {
        tq.push(qv.clone());
    }
    for k in 0..m {
        let t = k as f64 * cfg.dt;
        let dw = draw_increments(spec.d, cfg.dt, &mut rng);
        if let (Some(qv), Some(b)) = (q.as_mut(), beta) {
            *qv = step_q(qv, &p, t, &dw, b, spec, cfg)?;
        }
        let (pn, deficit) = step_p_tracked(&p, t, &dw, alpha, spec, cfg);
        p = pn;
        clip += deficit;
        if (k + 1) % cfg.store_every == 0 || k + 1 == m {
            traj_p.push(p.clone());
            if let (Some(tq), Some(qv)) = (traj_q.as_mut(), q.as_ref()) {
                tq.push(qv.clone());
            }
        }
    }
    Ok((traj_p, traj_q, clip))
}

/// Simulate `n_paths` independent trajectories of P (and Q when `beta` and a
/// tagged start state `q0` are supplied). Deterministic given `seed`; each
/// path owns its own counter-based stream, so the parallel schedule cannot
/// affect the output.
pub fn simulate(
    spec: &ModelSpec,
    alpha: &dyn Feedback,
    beta: Option<(&dyn Feedback, &[f64])>,
    p0: &SimplexPoint,
    n_paths: usize,
    cfg: &SchemeConfig,
    seed: u64,
) -> Result<PathBundle> {
    spec.validate()?;
    let m = cfg.steps(spec.horizon)?;
    let mut times = Vec::new();
    times.push(0.0);
    for k in 0..m {
        if (k + 1) % cfg.store_every == 0 || k + 1 == m {
            times.push((k + 1) as f64 * cfg.dt);
        }
    }
    let results: Result<Vec<_>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|pid| {
            simulate_one_path(
                spec,
                alpha,
                beta.map(|(b, _)| b),
                beta.map(|(_, q0)| q0),
                p0,
                cfg,
                seed,
                pid,
                m,
            )
        })
        .collect();
    let results = results?;
    let mut paths_p = Vec::with_capacity(n_paths);
    let mut paths_q = beta.map(|_| Vec::with_capacity(n_paths));
    let mut clip_mass = 0.0;
    for (tp, tq, clip) in results {
        paths_p.push(tp);
        if let (Some(all), Some(tq)) = (paths_q.as_mut(), tq) {
            all.push(tq);
        }
        clip_mass += clip;
    }
    Ok(PathBundle {
        times,
        paths_p,
        paths_q,
        stream_ids: (0..n_paths as u64).collect(),
        clip_mass,
    })
}

/// Mean and standard error of a sample.
pub fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Per-coordinate Monte-Carlo estimate of E[exp(lambda * gamma * int_0^T ds / P_s^i)]
/// with gamma = kappa - (1 + lambda) eps^2 / 2, via trapezoidal quadrature on
/// the stored slices.
#[derive(Debug, Clone)]
pub struct ExpMomentEstimate {
    pub gamma: f64,
    /// (mean, standard error) per coordinate i
    pub per_state: Vec<(f64, f64)>,
    /// gamma <= 0 means the bound regime does not apply; estimates are still
    /// reported for diagnostics
    pub in_regime: bool,
}

pub fn exp_moment_estimate(bundle: &PathBundle, lambda: f64, spec: &ModelSpec) -> Result<ExpMomentEstimate> {
    if lambda <= 0.0 {
        return Err(Error::invalid("lambda must be positive"));
    }
    if bundle.paths_p.is_empty() {
        return Err(Error::invalid("empty bundle"));
    }
    let gamma = spec.kappa - 0.5 * (1.0 + lambda) * spec.epsilon * spec.epsilon;
    let d = spec.d;
    let mut per_state = Vec::with_capacity(d);
    for i in 0..d {
        let samples: Vec<f64> = bundle
            .paths_p
            .iter()
            .map(|traj| {
                let mut integral = 0.0;
                for (k, w) in traj.windows(2).enumerate() {
                    let dt = bundle.times[k + 1] - bundle.times[k];
                    let a = 1.0 / w[0].get(i).max(1e-12);
                    let b = 1.0 / w[1].get(i).max(1e-12);
                    integral += 0.5 * (a + b) * dt;
                }
                (lambda * gamma * integral).exp()
            })
            .collect();
        per_state.push(mean_se(&samples));
    }
    Ok(ExpMomentEstimate { gamma, per_state, in_regime: gamma > 0.0 })
}

/// Least-squares slope of y against x.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Monte-Carlo estimate of the tagged-player cost
/// J = E[ sum_i Q_T^i g^i(P_T) + int_0^T sum_i Q_t^i (f^i(t,P_t) + 1/2 sum_{j!=i} beta_ij^2) dt ]
/// for the tagged player started in state `l` (Q_0 = e_l), with trapezoidal
/// time quadrature. Returns (estimate, standard error).
pub fn mc_cost(
    spec: &ModelSpec,
    alpha: &dyn Feedback,
    beta: &dyn Feedback,
    l: usize,
    p0: &SimplexPoint,
    n_paths: usize,
    cfg: &SchemeConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let samples = mc_cost_samples(spec, alpha, beta, l, p0, n_paths, cfg, seed)?;
    Ok(mean_se(&samples))
}

/// Per-path cost samples behind [`mc_cost`]; path k uses the stream
/// (seed, SDE_PATH, k), so two calls with the same seed are driven by
/// identical noise (common random numbers).
#[allow(clippy::too_many_arguments)]
pub fn mc_cost_samples(
    spec: &ModelSpec,
    alpha: &dyn Feedback,
    beta: &dyn Feedback,
    l: usize,
    p0: &SimplexPoint,
    n_paths: usize,
    cfg: &SchemeConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if l >= spec.d {
        return Err(Error::invalid("start state out of range"));
    }
    let m = cfg.steps(spec.horizon)?;
    let d = spec.d;
    let running = |t: f64, p: &SimplexPoint, q: &[f64]| -> f64 {
        (0..d)
            .map(|i| {
                let beta2: f64 = (0..d)
                    .filter(|&j| j != i)
                    .map(|j| beta.rate(t, i, p, j).powi(2))
                    .sum();
                q[i] * (spec.f.eval(t, i, p) + 0.5 * beta2)
            })
            .sum()
    };
    let samples: Result<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|pid| {
            let mut rng = StreamRng::from_parts(seed, &[domain::SDE_PATH, pid]);
            let mut p = p0.clone();
            let mut q = vec![0.0; d];
            q[l] = 1.0;
            let mut integral = 0.0;
            let mut prev = running(0.0, &p, &q);
            for k in 0..m {
                let t = k as f64 * cfg.dt;
                let dw = draw_increments(d, cfg.dt, &mut rng);
                q = step_q(&q, &p, t, &dw, beta, spec, cfg)?;
                p = step_p(&p, t, &dw, alpha, spec, cfg);
                let cur = running(t + cfg.dt, &p, &q);
                integral += 0.5 * (prev + cur) * cfg.dt;
                prev = cur;
            }
            let terminal: f64 = (0..d).map(|i| q[i] * spec.g.eval(spec.horizon, i, &p)).sum();
            Ok(terminal + integral)
        })
        .collect();
    samples
}
