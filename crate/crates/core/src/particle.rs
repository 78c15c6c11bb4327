//! Discrete-time N-player system with Wright–Fisher common-noise resampling:
//! positions, masses, the conditional-mass recursion, discrete costs, and the
//! diffusion-approximation diagnostics under the hyperbolic scaling M = ⌊NT⌋.

use crate::error::{Error, Result};
use crate::model::{Feedback, ModelSpec};
use crate::rng::{domain, StreamRng};
use crate::sde::{mean_se, SchemeConfig};
use crate::simplex::SimplexPoint;
use rayon::prelude::*;
use std::sync::Arc;

/// Bounded mean field rate function upα(t, i, μ)(j) ≥ 0 for j ≠ i; `bound`
/// must dominate every off-diagonal rate so that the induced one-step
/// transition (rates scaled by 1/N) is a probability row.
#[derive(Clone)]
pub struct MeanFieldRateFunction {
    pub d: usize,
    pub bound: f64,
    eval: Arc<dyn Fn(f64, usize, &SimplexPoint, usize) -> f64 + Send + Sync>,
}

impl MeanFieldRateFunction {
    pub fn new(
        d: usize,
        bound: f64,
        eval: impl Fn(f64, usize, &SimplexPoint, usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        MeanFieldRateFunction { d, bound, eval: Arc::new(eval) }
    }

    pub fn zero(d: usize) -> Self {
        MeanFieldRateFunction::new(d, 0.0, |_, _, _, _| 0.0)
    }

    /// Constant unit rates between distinct states.
    pub fn unit(d: usize) -> Self {
        MeanFieldRateFunction::new(d, 1.0, |_, _, _, _| 1.0)
    }

    pub fn from_feedback(d: usize, fb: Arc<dyn Feedback>) -> Self {
        let bound = fb.sup_bound();
        MeanFieldRateFunction::new(d, bound, move |t, i, mu, j| fb.rate(t, i, mu, j))
    }

    pub fn rate(&self, t: f64, i: usize, mu: &SimplexPoint, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            (self.eval)(t, i, mu, j).max(0.0)
        }
    }

    /// One-step transition row at population size N: off-diagonal entries
    /// upα(j)/N, diagonal the complement.
    pub fn transition_row(&self, t: f64, i: usize, mu: &SimplexPoint, n: usize) -> Result<Vec<f64>> {
        let scale = 1.0 / n as f64;
        let mut row = vec![0.0; self.d];
        let mut off = 0.0;
        for j in 0..self.d {
            if j != i {
                row[j] = scale * self.rate(t, i, mu, j);
                off += row[j];
            }
        }
        if off > 1.0 {
            return Err(Error::invalid(format!(
                "off-diagonal mass {off} exceeds 1 at N = {n}; increase N or lower the rates"
            )));
        }
        row[i] = 1.0 - off;
        Ok(row)
    }

    /// Population drift a_i(t, μ) = Σ_j (μ_j upα(t,j,μ)(i) − μ_i upα(t,i,μ)(j)).
    pub fn population_drift(&self, t: f64, mu: &SimplexPoint) -> Vec<f64> {
        (0..self.d)
            .map(|i| {
                (0..self.d)
                    .map(|j| mu.get(j) * self.rate(t, j, mu, i) - mu.get(i) * self.rate(t, i, mu, j))
                    .sum()
            })
            .collect()
    }
}

/// Common noise: per-step Bernoulli coin and the multinomial uniforms V^k,
/// all derived from seed¹. Per-step substreams make the draws independent of
/// the branch history.
#[derive(Debug, Clone, Copy)]
pub struct CommonNoiseStream {
    pub seed1: u64,
}

impl CommonNoiseStream {
    pub fn new(seed1: u64) -> Self {
        CommonNoiseStream { seed1 }
    }

    pub fn coin(&self, m: usize, epsilon: f64) -> bool {
        let mut rng = StreamRng::from_parts(self.seed1, &[domain::PARTICLE_COMMON, m as u64, 0]);
        rng.next_uniform() < epsilon
    }

    pub fn thresholds(&self, m: usize, n: usize) -> Vec<f64> {
        let mut rng = StreamRng::from_parts(self.seed1, &[domain::PARTICLE_COMMON, m as u64, 1]);
        (0..n).map(|_| rng.next_uniform()).collect()
    }
}

/// Idiosyncratic noise (seed⁰): per-step quantile uniforms U^l and the
/// initial positions.
#[derive(Debug, Clone, Copy)]
pub struct IdiosyncraticStream {
    pub seed0: u64,
}

impl IdiosyncraticStream {
    pub fn new(seed0: u64) -> Self {
        IdiosyncraticStream { seed0 }
    }

    pub fn uniforms(&self, m: usize, n: usize) -> Vec<f64> {
        let mut rng =
            StreamRng::from_parts(self.seed0, &[domain::PARTICLE_IDIOSYNCRATIC, m as u64 + 1]);
        (0..n).map(|_| rng.next_uniform()).collect()
    }

    /// i.i.d. initial positions from μ0 by inverse transform.
    pub fn initial_positions(&self, mu0: &SimplexPoint, n: usize) -> Vec<usize> {
        let mut rng = StreamRng::from_parts(self.seed0, &[domain::PARTICLE_IDIOSYNCRATIC, 0]);
        (0..n)
            .map(|_| quantile_index(mu0.weights(), rng.next_uniform()))
            .collect()
    }
}

fn quantile_index(weights: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return i;
        }
    }
    weights.len() - 1
}

/// The N-player state: positions X^l in 0..d, masses Y^l ≥ 0 with Σ Y = N.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub d: usize,
    pub positions: Vec<usize>,
    pub masses: Vec<f64>,
    pub step: usize,
}

impl ParticleEnsemble {
    /// Unit masses, positions sampled i.i.d. from μ0.
    pub fn init(d: usize, n: usize, mu0: &SimplexPoint, idio: &IdiosyncraticStream) -> Result<Self> {
        if mu0.dim() != d {
            return Err(Error::invalid("initial measure dimension mismatch"));
        }
        Ok(ParticleEnsemble {
            d,
            positions: idio.initial_positions(mu0, n),
            masses: vec![1.0; n],
            step: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// μ̄(i) = (1/N) Σ_l Y^l 1{X^l = i}.
pub fn empirical_measure(ens: &ParticleEnsemble) -> SimplexPoint {
    let mut w = vec![0.0; ens.d];
    for (&x, &y) in ens.positions.iter().zip(&ens.masses) {
        w[x] += y;
    }
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    SimplexPoint::new(w).expect("nonnegative masses with positive total")
}

/// Multinomial counts S(i) from the uniform thresholds V^k against μ.
pub fn multinomial_counts(mu: &SimplexPoint, thresholds: &[f64]) -> Vec<usize> {
    let mut s = vec![0usize; mu.dim()];
    for &v in thresholds {
        s[quantile_index(mu.weights(), v)] += 1;
    }
    s
}

/// One step of the canonical dynamics. With the coin at 0, each position
/// moves by the quantile of its transition row and the masses are frozen;
/// with the coin at 1, the positions are frozen and each mass is multiplied
/// by S(i)/(N μ̄(i)), the ratio read as 0 when μ̄(i) = 0.
pub fn step_ensemble(
    ens: &ParticleEnsemble,
    rate: &MeanFieldRateFunction,
    epsilon: f64,
    idio: &IdiosyncraticStream,
    common: &CommonNoiseStream,
) -> Result<ParticleEnsemble> {
    let n = ens.n();
    let m = ens.step;
    let t = m as f64 / n as f64;
    let mu = empirical_measure(ens);
    let coin = epsilon > 0.0 && common.coin(m, epsilon);
    let mut next = ens.clone();
    next.step = m + 1;
    if !coin {
        // rows only depend on the current site: precompute d rows
        let rows: Result<Vec<Vec<f64>>> =
            (0..ens.d).map(|i| rate.transition_row(t, i, &mu, n)).collect();
        let rows = rows?;
        let u = idio.uniforms(m, n);
        next.positions
            .par_iter_mut()
            .zip(&ens.positions)
            .zip(&u)
            .for_each(|((pos, &old), &ul)| {
                *pos = quantile_index(&rows[old], ul);
            });
    } else {
        let s = multinomial_counts(&mu, &common.thresholds(m, n));
        let n_f = n as f64;
        next.masses
            .par_iter_mut()
            .zip(&ens.positions)
            .for_each(|(y, &x)| {
                let denom = n_f * mu.get(x);
                *y = if denom == 0.0 { 0.0 } else { *y * s[x] as f64 / denom };
            });
    }
    Ok(next)
}

/// One step of the conditional-mass recursion for a deviating player with
/// rate function upβ, against a frozen empirical measure μ̄ and the realized
/// common noise (coin, S).
pub fn conditional_mass_step(
    q: &[f64],
    mu: &SimplexPoint,
    upbeta: &MeanFieldRateFunction,
    t: f64,
    coin: bool,
    s: &[usize],
    n: usize,
) -> Result<Vec<f64>> {
    if q.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("conditional masses must be nonnegative"));
    }
    let d = mu.dim();
    if !coin {
        let mut out = vec![0.0; d];
        for j in 0..d {
            let row = upbeta.transition_row(t, j, mu, n)?;
            for i in 0..d {
                out[i] += q[j] * row[i];
            }
        }
        Ok(out)
    } else {
        Ok((0..d)
            .map(|i| {
                let denom = n as f64 * mu.get(i);
                if denom == 0.0 { 0.0 } else { q[i] * s[i] as f64 / denom }
            })
            .collect())
    }
}

/// Per-player discrete cost along a recorded trajectory of (X^l, Y^l, μ̄):
/// Y_M g + (1/N) Σ Y_m f(m/N, ·) + (1/(2N)) Σ Y_m Σ_{j≠X} upβ(·)(j)².
pub fn discrete_cost(
    trajectory: &[(usize, f64, SimplexPoint)],
    f: &dyn Fn(f64, usize, &SimplexPoint) -> f64,
    g: &dyn Fn(usize, &SimplexPoint) -> f64,
    upbeta: &MeanFieldRateFunction,
    n: usize,
) -> Result<f64> {
    if trajectory.len() < 2 {
        return Err(Error::invalid("trajectory must contain at least one step"));
    }
    let m_end = trajectory.len() - 1;
    let n_f = n as f64;
    let (x_m, y_m, ref mu_m) = trajectory[m_end];
    let mut cost = y_m * g(x_m, mu_m);
    for (m, (x, y, mu)) in trajectory.iter().take(m_end).enumerate() {
        let t = m as f64 / n_f;
        cost += y / n_f * f(t, *x, mu);
        let kinetic: f64 = (0..upbeta.d)
            .filter(|&j| j != *x)
            .map(|j| upbeta.rate(t, *x, mu, j).powi(2))
            .sum();
        cost += y / (2.0 * n_f) * kinetic;
    }
    Ok(cost)
}

/// One-step moment diagnostics at a fixed ensemble state.
#[derive(Debug, Clone)]
pub struct MomentReport {
    /// z-scores of the mean increment of μ̄ against (1−ε)/N · a(m/N, μ̄)
    pub mean_z: Vec<f64>,
    /// z-scores of the resampling-branch covariance against (ε/N)·Ξ(μ̄)
    pub cov_z: Vec<Vec<f64>>,
    pub max_mean_z: f64,
    pub max_cov_z: f64,
}

/// Replicates one-step increments of μ̄ and compares the empirical
/// conditional mean and the T=1-branch covariance with their limits.
pub fn moment_diagnostics(
    ens: &ParticleEnsemble,
    rate: &MeanFieldRateFunction,
    epsilon: f64,
    n_replicates: usize,
    seed: u64,
) -> Result<MomentReport> {
    let d = ens.d;
    let n = ens.n();
    let mu = empirical_measure(ens);
    let t = ens.step as f64 / n as f64;
    let drift = rate.population_drift(t, &mu);
    let incs: Result<Vec<(Vec<f64>, bool)>> = (0..n_replicates as u64)
        .into_par_iter()
        .map(|r| {
            let idio = IdiosyncraticStream::new(seed.wrapping_add(2 * r));
            let common = CommonNoiseStream::new(seed.wrapping_add(2 * r + 1));
            let next = step_ensemble(ens, rate, epsilon, &idio, &common)?;
            let mu_next = empirical_measure(&next);
            let coin = epsilon > 0.0 && common.coin(ens.step, epsilon);
            let inc: Vec<f64> = (0..d).map(|i| mu_next.get(i) - mu.get(i)).collect();
            Ok((inc, coin))
        })
        .collect();
    let incs = incs?;
    let n_f = n as f64;
    let mut mean_z = vec![0.0; d];
    for i in 0..d {
        let samples: Vec<f64> = incs.iter().map(|(inc, _)| inc[i]).collect();
        let (mean, se) = mean_se(&samples);
        let target = (1.0 - epsilon) / n_f * drift[i];
        mean_z[i] = if se > 0.0 { (mean - target) / se } else { 0.0 };
    }
    let mut cov_z = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let samples: Vec<f64> = incs
                .iter()
                .map(|(inc, coin)| if *coin { inc[i] * inc[j] } else { 0.0 })
                .collect();
            let (mean, se) = mean_se(&samples);
            let xi = mu.get(i) * if i == j { 1.0 } else { 0.0 } - mu.get(i) * mu.get(j);
            let target = epsilon / n_f * xi;
            cov_z[i][j] = if se > 0.0 { (mean - target) / se } else { 0.0 };
        }
    }
    let max_mean_z = mean_z.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let max_cov_z = cov_z
        .iter()
        .flatten()
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    Ok(MomentReport { mean_z, cov_z, max_mean_z, max_cov_z })
}

/// Per-N entry of the diffusion-approximation study.
#[derive(Debug, Clone)]
pub struct ConvergenceEntry {
    pub n: usize,
    /// max |moment gap| over coordinates, checkpoints, first/second moments
    pub max_gap: f64,
    /// the same gap normalized by the combined standard error
    pub max_z: f64,
}

/// Compares μ̄^N_{⌊Nt⌋} at t ∈ {T/2, T} against the diffusion marginals with
/// drift (1−ε)a and noise intensity √ε (per-step covariance εΞ/N over time
/// step 1/N matches the ε²Ξ bracket of the SDE only after ε ↦ √ε).
pub fn convergence_study(
    rate: &MeanFieldRateFunction,
    epsilon: f64,
    horizon: f64,
    mu0: &SimplexPoint,
    n_list: &[usize],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<ConvergenceEntry>> {
    let d = rate.d;
    // reference diffusion: forcing off, drift (1−ε)·upα via feedback
    let spec = ModelSpec {
        d,
        epsilon: epsilon.sqrt(),
        kappa: 0.0,
        delta: 0.2 / (d as f64).sqrt(),
        horizon,
        f: crate::model::CostFamily::zero(),
        g: crate::model::CostFamily::zero(),
    };
    spec.validate()?;
    let damped = rate.clone();
    let fb = crate::model::FnFeedback::new(
        (1.0 - epsilon) * rate.bound,
        move |t, i, mu: &SimplexPoint, j| (1.0 - epsilon) * damped.rate(t, i, mu, j),
    );
    let steps = 2 * ((horizon / 2e-3).round() as usize).max(1);
    let dt = horizon / steps as f64;
    let cfg = SchemeConfig::with_stride(dt, steps / 2);
    let bundle = crate::sde::simulate(&spec, &fb, None, mu0, n_paths, &cfg, seed)?;
    // bundle paths store p at t = 0, T/2, T
    let checkpoints = [1usize, 2];
    let sde_moments: Vec<Vec<(f64, f64)>> = checkpoints
        .iter()
        .map(|&ck| {
            (0..2 * d)
                .map(|k| {
                    let (i, pw) = (k % d, 1 + (k / d) as i32);
                    let samples: Vec<f64> = bundle
                        .paths_p
                        .iter()
                        .map(|path| path[ck].get(i).powi(pw))
                        .collect();
                    mean_se(&samples)
                })
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(n_list.len());
    for (ni, &n) in n_list.iter().enumerate() {
        let m_total = (n as f64 * horizon).floor() as usize;
        let marks = [m_total / 2, m_total];
        let snaps: Result<Vec<Vec<SimplexPoint>>> = (0..n_paths as u64)
            .into_par_iter()
            .map(|pid| {
                let tag = (ni as u64) << 32 | pid;
                let idio = IdiosyncraticStream::new(seed ^ splat(2 * tag));
                let common = CommonNoiseStream::new(seed ^ splat(2 * tag + 1));
                let mut ens = ParticleEnsemble::init(d, n, mu0, &idio)?;
                let mut snaps = Vec::with_capacity(marks.len());
                for m in 0..m_total {
                    ens = step_ensemble(&ens, rate, epsilon, &idio, &common)?;
                    let _ = m;
                    if marks.contains(&ens.step) {
                        snaps.push(empirical_measure(&ens));
                    }
                }
                Ok(snaps)
            })
            .collect();
        let snaps = snaps?;
        let mut max_gap = 0.0f64;
        let mut max_z = 0.0f64;
        for (ck, _) in checkpoints.iter().enumerate() {
            for k in 0..2 * d {
                let (i, pw) = (k % d, 1 + (k / d) as i32);
                let samples: Vec<f64> =
                    snaps.iter().map(|s| s[ck].get(i).powi(pw)).collect();
                let (mean, se) = mean_se(&samples);
                let (ref_mean, ref_se) = sde_moments[ck][k];
                let gap = (mean - ref_mean).abs();
                max_gap = max_gap.max(gap);
                max_z = max_z.max(gap / (se * se + ref_se * ref_se).sqrt());
            }
        }
        out.push(ConvergenceEntry { n, max_gap, max_z });
    }
    Ok(out)
}

fn splat(x: u64) -> u64 {
    // cheap seed decorrelation between replicate labels
    x.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(31)
}
