//! Conditioning / dimension-reduction system, the reflection-coupled pair in
//! square-root coordinates, stopping-time bookkeeping, and the empirical
//! checks of the coupling estimate and the rotation lemma.

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::{domain, StreamRng};
use crate::sde::{draw_increments, mean_se, AntisymIncrement};
use crate::simplex::{project_to_simplex, SimplexPoint};
use rayon::prelude::*;
use std::sync::Arc;

/// Discrete-time surrogate for the continuous hitting time |Z| = 0.
pub const TAU_THRESHOLD: f64 = 1e-9;
const SQRT_FLOOR: f64 = 1e-10;

type DriftFn = Arc<dyn Fn(f64, &SimplexPoint, usize) -> f64 + Send + Sync>;

/// Drift data for the conditioned systems: the ambient coefficients b, b°
/// together with the forcing parameters of `spec`. Off-simplex arguments are
/// handled by composing with the Euclidean projection onto the simplex.
#[derive(Clone)]
pub struct CouplingModel {
    pub spec: ModelSpec,
    pub b: DriftFn,
    pub b_ring: DriftFn,
}

impl CouplingModel {
    /// Forcing only: b = 0 and b°_i = -Σ_k φ(p_k), so that Σ_i 𝔟_i = 0 on
    /// the simplex and 𝔟_i(p) = φ(p_i) - p_i Σ_k φ(p_k).
    pub fn forced(spec: ModelSpec) -> Self {
        let (kappa, delta) = (spec.kappa, spec.delta);
        CouplingModel {
            spec,
            b: Arc::new(|_, _, _| 0.0),
            b_ring: Arc::new(move |_t, p, _i| {
                -(0..p.dim())
                    .map(|k| crate::model::phi_eval(p.get(k), kappa, delta).expect("phi"))
                    .sum::<f64>()
            }),
        }
    }

    /// The full drift 𝔟_i(t, x) = phi(x_i) + b_i + x_i b°_i, extended off the
    /// simplex by projection.
    pub fn frak_b(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let p = project_to_simplex(x)?;
        Ok((0..p.dim())
            .map(|i| {
                self.spec.phi(p.get(i)) + (self.b)(t, &p, i) + p.get(i) * (self.b_ring)(t, &p, i)
            })
            .collect())
    }
}

/// ς(p°) = sqrt(1 − |p°|₁).
pub fn sigma_eval(p_ring: &[f64]) -> Result<f64> {
    let s: f64 = p_ring.iter().sum();
    if s > 1.0 + 1e-12 {
        return Err(Error::invalid(format!("|p°|_1 = {s} exceeds 1")));
    }
    Ok((1.0 - s).max(0.0).sqrt())
}

/// State of the dimension-reduced system: m conditioned coordinates p° in
/// the solid simplex and a (d − m)-dimensional simplex block p.
#[derive(Debug, Clone)]
pub struct ConditioningState {
    pub m: usize,
    pub p_ring: Vec<f64>,
    pub p: Vec<f64>,
}

impl ConditioningState {
    pub fn new(m: usize, p_ring: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if p_ring.len() != m {
            return Err(Error::invalid("p° length must equal m"));
        }
        sigma_eval(&p_ring)?;
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 || p.iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("reduced block must lie on the simplex"));
        }
        Ok(ConditioningState { m, p_ring, p })
    }

    pub fn sigma(&self) -> f64 {
        sigma_eval(&self.p_ring).expect("invariant |p°|_1 <= 1")
    }

    /// The reconstructed ambient point (p°, ς²(p°) p).
    pub fn reconstruct(&self) -> Vec<f64> {
        let s2 = 1.0 - self.p_ring.iter().sum::<f64>();
        self.p_ring
            .iter()
            .cloned()
            .chain(self.p.iter().map(|&x| s2 * x))
            .collect()
    }
}

fn clip_ring(p_ring: &mut [f64]) {
    for x in p_ring.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = p_ring.iter().sum();
    if s > 1.0 {
        for x in p_ring.iter_mut() {
            *x /= s;
        }
    }
}

fn clip_simplex_block(p: &mut [f64]) {
    for x in p.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = p.iter().sum();
    let argmax = (0..p.len())
        .max_by(|&a, &b| p[a].partial_cmp(&p[b]).expect("finite"))
        .expect("nonempty");
    p[argmax] -= s - 1.0;
}

/// One Euler step of the reduced system. `dw` and `dw_ring` are
/// antisymmetric increments of ambient dimension d (the block equation reads
/// entries (m+i, m+j), the ring equation reads W°).
pub fn step_reduced(
    state: &ConditioningState,
    t: f64,
    dt: f64,
    dw: &AntisymIncrement,
    dw_ring: &AntisymIncrement,
    model: &CouplingModel,
) -> Result<ConditioningState> {
    let m = state.m;
    let dm = state.p.len();
    let eps = model.spec.epsilon;
    let sigma = state.sigma();
    if sigma < 1e-6 {
        return Err(Error::BoundaryGuard { index: 0, value: sigma, floor: 1e-6 });
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    let fb = model.frak_b(t, &state.reconstruct())?;
    // reduced block: drift ς⁻²(B_i − p_i Σ_j B_j), pairwise noise
    let cap_b: Vec<f64> = (0..dm).map(|i| fb[m + i]).collect();
    let sum_b: f64 = cap_b.iter().sum();
    let sqrt_p: Vec<f64> = state.p.iter().map(|&x| x.max(0.0).sqrt()).collect();
    let mut p = state.p.clone();
    for i in 0..dm {
        p[i] += dt * inv_s2 * (cap_b[i] - state.p[i] * sum_b);
        for j in (i + 1)..dm {
            let flow = eps / sigma * sqrt_p[i] * sqrt_p[j] * dw.get(m + i, m + j);
            p[i] += flow;
            p[j] -= flow;
        }
    }
    clip_simplex_block(&mut p);
    // ring block
    let mut p_ring = state.p_ring.clone();
    for i in 0..m {
        let mut incr = dt * fb[i];
        for j in 0..m {
            if j != i {
                incr += eps * (state.p_ring[i].max(0.0) * state.p_ring[j].max(0.0)).sqrt()
                    * dw_ring.get(i, j);
            }
        }
        let root_i = state.p_ring[i].max(0.0).sqrt();
        for j in 0..dm {
            incr += eps * sigma * root_i * sqrt_p[j] * dw_ring.get(i, m + j);
        }
        p_ring[i] += incr;
    }
    clip_ring(&mut p_ring);
    Ok(ConditioningState { m, p_ring, p })
}

/// One Euler step of the ambient equation for X (drift 𝔟, Wright–Fisher
/// noise), used as the direct side of the identity-in-law check.
pub fn step_x(
    x: &SimplexPoint,
    t: f64,
    dt: f64,
    dw: &AntisymIncrement,
    model: &CouplingModel,
) -> Result<SimplexPoint> {
    let d = x.dim();
    let eps = model.spec.epsilon;
    let fb = model.frak_b(t, x.weights())?;
    let sqrt_x: Vec<f64> = (0..d).map(|i| x.get(i).max(0.0).sqrt()).collect();
    let mut w: Vec<f64> = x.weights().to_vec();
    for i in 0..d {
        w[i] += dt * fb[i];
        for j in (i + 1)..d {
            let flow = eps * sqrt_x[i] * sqrt_x[j] * dw.get(i, j);
            w[i] += flow;
            w[j] -= flow;
        }
    }
    clip_simplex_block(&mut w);
    Ok(SimplexPoint::new(w)?)
}

/// Householder reflection I − 2ZZᵀ/|Z|² for Z = p̃ − q̃; identity once
/// |Z| ≤ the τ threshold.
pub fn reflection_matrix(p_tilde: &[f64], q_tilde: &[f64]) -> Vec<Vec<f64>> {
    let n = p_tilde.len();
    let z: Vec<f64> = p_tilde.iter().zip(q_tilde).map(|(a, b)| a - b).collect();
    let norm2: f64 = z.iter().map(|v| v * v).sum();
    let mut r = vec![vec![0.0; n]; n];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    if norm2.sqrt() <= TAU_THRESHOLD {
        return r;
    }
    for i in 0..n {
        for j in 0..n {
            r[i][j] -= 2.0 * z[i] * z[j] / norm2;
        }
    }
    r
}

/// R · ΔW · R for a dense antisymmetric increment; the conjugation preserves
/// antisymmetry exactly when computed as M − Mᵀ over the symmetrized product.
pub fn rotate_increment(r: &[Vec<f64>], dw: &AntisymIncrement) -> Vec<Vec<f64>> {
    let n = r.len();
    // A = R W R with W antisymmetric; enforce exact antisymmetry by
    // averaging A and -Aᵀ (they agree analytically)
    let mut rw = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += r[i][k] * dw.get(k, j);
            }
            rw[i][j] = acc;
        }
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += rw[i][k] * r[k][j];
            }
            out[i][j] = acc;
            out[j][i] = -acc;
        }
    }
    out
}

/// Stopping flags; `Some(k)` records the first step index at which the time
/// triggered.
#[derive(Debug, Clone, Copy, Default)]
pub struct StopFlags {
    pub tau: Option<usize>,
    pub sigma: Option<usize>,
    pub varrho: Option<usize>,
    pub rho: Option<usize>,
}

impl StopFlags {
    pub fn varpi(&self) -> Option<usize> {
        [self.tau, self.sigma, self.varrho, self.rho]
            .into_iter()
            .flatten()
            .min()
    }
}

/// The reflection-coupled pair in square-root coordinates.
#[derive(Debug, Clone)]
pub struct CoupledState {
    pub m: usize,
    pub p_ring: Vec<f64>,
    pub q_ring: Vec<f64>,
    pub p_tilde: Vec<f64>,
    pub q_tilde: Vec<f64>,
    pub flags: StopFlags,
    pub step: usize,
    /// |Z| level at which the pair is declared glued. The continuous hitting
    /// time |Z| = 0 is invisible on a discrete grid (|Z| moves by ~ε√Δt per
    /// step), so experiments set this to the one-step noise scale.
    pub glue_threshold: f64,
}

impl CoupledState {
    pub fn new(m: usize, p_ring: Vec<f64>, p: &[f64], q_ring: Vec<f64>, q: &[f64]) -> Result<Self> {
        sigma_eval(&p_ring)?;
        sigma_eval(&q_ring)?;
        let mut state = CoupledState {
            m,
            p_ring,
            q_ring,
            p_tilde: p.iter().map(|&x| x.max(0.0).sqrt()).collect(),
            q_tilde: q.iter().map(|&x| x.max(0.0).sqrt()).collect(),
            flags: StopFlags::default(),
            step: 0,
            glue_threshold: TAU_THRESHOLD,
        };
        state.update_flags();
        Ok(state)
    }

    pub fn with_glue_threshold(mut self, threshold: f64) -> Self {
        self.glue_threshold = threshold.max(TAU_THRESHOLD);
        self.update_flags();
        self
    }

    pub fn z(&self) -> Vec<f64> {
        self.p_tilde.iter().zip(&self.q_tilde).map(|(a, b)| a - b).collect()
    }

    pub fn z_norm(&self) -> f64 {
        self.z().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn update_flags(&mut self) {
        let k = self.step;
        let zn = self.z_norm();
        if self.flags.tau.is_none() && zn <= self.glue_threshold {
            self.flags.tau = Some(k);
        }
        let ring_gap: f64 = self
            .p_ring
            .iter()
            .zip(&self.q_ring)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if self.flags.varrho.is_none() && ring_gap > zn {
            self.flags.varrho = Some(k);
        }
        if self.flags.rho.is_none() && self.p_ring.iter().sum::<f64>() >= 0.75 {
            self.flags.rho = Some(k);
        }
    }

    fn check_sigma(&mut self, delta: f64) {
        if self.flags.sigma.is_none() && self.z_norm() >= delta / 4.0 {
            self.flags.sigma = Some(self.step);
        }
    }
}

/// Drift of the square-root block:
/// B̃_i = (B_i − r_i ΣB)/(2√r_i) − ε²/(8√r_i) + (ε²/8)√r_i,
/// where B_i = 𝔟_{m+i}(t, (r°, ς² r)).
fn tilde_drift(
    model: &CouplingModel,
    t: f64,
    m: usize,
    ring: &[f64],
    tilde: &[f64],
) -> Result<Vec<f64>> {
    let dm = tilde.len();
    let e2 = model.spec.epsilon * model.spec.epsilon;
    let s2 = 1.0 - ring.iter().sum::<f64>();
    let r: Vec<f64> = tilde.iter().map(|v| v * v).collect();
    let ambient: Vec<f64> = ring.iter().cloned().chain(r.iter().map(|&x| s2 * x)).collect();
    let fb = model.frak_b(t, &ambient)?;
    let cap_b: Vec<f64> = (0..dm).map(|i| fb[m + i]).collect();
    let sum_b: f64 = cap_b.iter().sum();
    (0..dm)
        .map(|i| {
            let root = tilde[i];
            if root * root < SQRT_FLOOR {
                return Err(Error::BoundaryGuard {
                    index: i,
                    value: root * root,
                    floor: SQRT_FLOOR,
                });
            }
            Ok((cap_b[i] - r[i] * sum_b) / (2.0 * root) - e2 / (8.0 * root)
                + e2 / 8.0 * root)
        })
        .collect()
}

fn step_ring(
    model: &CouplingModel,
    t: f64,
    dt: f64,
    m: usize,
    ring: &[f64],
    tilde: &[f64],
    dw_ring: &AntisymIncrement,
) -> Result<Vec<f64>> {
    let dm = tilde.len();
    let eps = model.spec.epsilon;
    let s2 = 1.0 - ring.iter().sum::<f64>();
    let sigma = s2.max(0.0).sqrt();
    let r: Vec<f64> = tilde.iter().map(|v| v * v).collect();
    let ambient: Vec<f64> = ring.iter().cloned().chain(r.iter().map(|&x| s2 * x)).collect();
    let fb = model.frak_b(t, &ambient)?;
    let mut out = ring.to_vec();
    for i in 0..m {
        let mut incr = dt * fb[i];
        for j in 0..m {
            if j != i {
                incr += eps * (ring[i].max(0.0) * ring[j].max(0.0)).sqrt() * dw_ring.get(i, j);
            }
        }
        let root_i = ring[i].max(0.0).sqrt();
        for j in 0..dm {
            incr += eps * sigma * root_i * tilde[j].max(0.0) * dw_ring.get(i, m + j);
        }
        out[i] += incr;
    }
    clip_ring(&mut out);
    Ok(out)
}

/// One Euler step of the four-block coupled system. `dw` has the reduced
/// dimension d − m; `dw_ring` has ambient dimension d. After τ the pair is
/// glued (Q̃ kept equal to P̃). `delta` drives σ detection.
pub fn step_coupled(
    state: &CoupledState,
    t: f64,
    dt: f64,
    dw: &AntisymIncrement,
    dw_ring: &AntisymIncrement,
    model: &CouplingModel,
) -> Result<CoupledState> {
    let m = state.m;
    let dm = state.p_tilde.len();
    let eps = model.spec.epsilon;
    let glued = state.flags.tau.is_some();
    let r = reflection_matrix(&state.p_tilde, &state.q_tilde);
    let rotated = rotate_increment(&r, dw);

    let sigma_p = sigma_eval(&state.p_ring)?;
    let sigma_q = sigma_eval(&state.q_ring)?;
    if sigma_p < 1e-6 || sigma_q < 1e-6 {
        return Err(Error::BoundaryGuard { index: 0, value: sigma_p.min(sigma_q), floor: 1e-6 });
    }

    // P-block
    let bp = tilde_drift(model, t, m, &state.p_ring, &state.p_tilde)?;
    let mut p_tilde = state.p_tilde.clone();
    for i in 0..dm {
        let mut noise = 0.0;
        for j in 0..dm {
            noise += state.p_tilde[j] * dw.get(i, j);
        }
        p_tilde[i] += dt / (sigma_p * sigma_p) * bp[i] + eps / (2.0 * sigma_p) * noise;
        p_tilde[i] = p_tilde[i].max(0.0);
    }
    let norm: f64 = p_tilde.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in p_tilde.iter_mut() {
        *v /= norm;
    }

    // Q-block (rotated noise), or glued copy
    let q_tilde = if glued {
        p_tilde.clone()
    } else {
        let bq = tilde_drift(model, t, m, &state.q_ring, &state.q_tilde)?;
        let mut q_tilde = state.q_tilde.clone();
        for i in 0..dm {
            let mut noise = 0.0;
            for j in 0..dm {
                noise += state.q_tilde[j] * rotated[i][j];
            }
            q_tilde[i] += dt / (sigma_q * sigma_q) * bq[i] + eps / (2.0 * sigma_q) * noise;
            q_tilde[i] = q_tilde[i].max(0.0);
        }
        let norm: f64 = q_tilde.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in q_tilde.iter_mut() {
            *v /= norm;
        }
        q_tilde
    };

    // rings share the same W°
    let p_ring = step_ring(model, t, dt, m, &state.p_ring, &state.p_tilde, dw_ring)?;
    let q_ring = step_ring(model, t, dt, m, &state.q_ring, &state.q_tilde, dw_ring)?;

    let mut next = CoupledState {
        m,
        p_ring,
        q_ring,
        p_tilde,
        q_tilde,
        flags: state.flags,
        step: state.step + 1,
        glue_threshold: state.glue_threshold,
    };
    next.update_flags();
    next.check_sigma(model.spec.delta);
    Ok(next)
}

/// Covariance/isotropy report for the rotated increments R ΔW̄ R.
#[derive(Debug, Clone)]
pub struct RotationReport {
    /// max |empirical antisymmetry defect| (exact zero by construction)
    pub antisymmetry_defect: f64,
    /// max |z| of per-entry variance against dt
    pub variance_z: f64,
    /// max |z| of pairwise correlations against 0
    pub correlation_z: f64,
}

/// Accumulates rotated increments along a randomized Z path and compares
/// their empirical second moments with an antisymmetric Brownian increment.
pub fn rotated_noise_check(n_steps: usize, dim: usize, dt: f64, seed: u64) -> RotationReport {
    let mut rng = StreamRng::from_parts(seed, &[domain::COUPLING_PATH, 0]);
    let n_entries = dim * (dim - 1) / 2;
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_steps); n_entries];
    let mut defect = 0.0f64;
    for _ in 0..n_steps {
        // randomized unit vectors p̃, q̃ defining Z
        let mut p: Vec<f64> = (0..dim).map(|_| rng.next_uniform()).collect();
        let mut q: Vec<f64> = (0..dim).map(|_| rng.next_uniform()).collect();
        let np: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nq: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        p.iter_mut().for_each(|v| *v /= np);
        q.iter_mut().for_each(|v| *v /= nq);
        let r = reflection_matrix(&p, &q);
        let dw = draw_increments(dim, dt, &mut rng);
        let rot = rotate_increment(&r, &dw);
        let mut k = 0;
        for i in 0..dim {
            for j in (i + 1)..dim {
                samples[k].push(rot[i][j]);
                defect = defect.max((rot[i][j] + rot[j][i]).abs());
                k += 1;
            }
        }
    }
    let mut variance_z = 0.0f64;
    for entry in &samples {
        let sq: Vec<f64> = entry.iter().map(|v| v * v).collect();
        let (mean, se) = mean_se(&sq);
        variance_z = variance_z.max(((mean - dt) / se).abs());
    }
    let mut correlation_z = 0.0f64;
    let n = n_steps as f64;
    for a in 0..n_entries {
        for b in (a + 1)..n_entries {
            let prods: Vec<f64> =
                samples[a].iter().zip(&samples[b]).map(|(x, y)| x * y).collect();
            let (mean, se) = mean_se(&prods);
            let _ = n;
            correlation_z = correlation_z.max((mean / se).abs());
        }
    }
    RotationReport { antisymmetry_defect: defect, variance_z, correlation_z }
}

/// Result of a coupling run at one initial gap.
#[derive(Debug, Clone)]
pub struct CouplingPoint {
    pub gap: f64,
    pub failure_prob: f64,
    pub std_err: f64,
    pub n_paths: usize,
}

/// Estimates P(ϖ_S < τ ∧ ϱ ∧ ρ) by direct simulation: failure means σ (or
/// the horizon S) occurs strictly before any of τ, ϱ, ρ.
pub fn coupling_experiment(
    model: &CouplingModel,
    m: usize,
    p_ring: &[f64],
    p: &[f64],
    q: &[f64],
    s_horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<CouplingPoint> {
    let gap: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let steps = (s_horizon / dt).ceil() as usize;
    let d = model.spec.d;
    let ring_mass: f64 = p_ring.iter().sum();
    if ring_mass > 0.5 {
        eprintln!("warning: |p°|_1 = {ring_mass} exceeds the statement's 1/2");
    }
    let gap_bound = model.spec.delta * model.spec.delta / (64.0 * (d as f64).sqrt());
    if gap > gap_bound {
        eprintln!("warning: |p - q| = {gap} exceeds the statement's delta^2/(64 sqrt(d)) = {gap_bound}");
    }
    let failures: Result<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|pid| {
            let mut rng = StreamRng::from_parts(seed, &[domain::COUPLING_PATH, pid]);
            let mut st = CoupledState::new(m, p_ring.to_vec(), p, p_ring.to_vec(), q)?
                .with_glue_threshold(model.spec.epsilon * dt.sqrt());
            for k in 0..steps {
                if st.flags.tau.is_some()
                    || st.flags.varrho.is_some()
                    || st.flags.rho.is_some()
                    || st.flags.sigma.is_some()
                {
                    break;
                }
                let dw = draw_increments(d - m, dt, &mut rng);
                let dw_ring = draw_increments(d, dt, &mut rng);
                st = step_coupled(&st, k as f64 * dt, dt, &dw, &dw_ring, model)?;
            }
            // success iff τ, ϱ or ρ triggered no later than σ and within S
            let good = [st.flags.tau, st.flags.varrho, st.flags.rho]
                .into_iter()
                .flatten()
                .min();
            let fail = match (good, st.flags.sigma) {
                (Some(g), Some(s)) => s < g,
                (Some(_), None) => false,
                (None, _) => true, // σ or the horizon came first
            };
            Ok(if fail { 1.0 } else { 0.0 })
        })
        .collect();
    let failures = failures?;
    let k: f64 = failures.iter().sum();
    let n = n_paths as f64;
    let prob = k / n;
    let std_err = (prob * (1.0 - prob) / n).sqrt().max(1.0 / (2.0 * n));
    Ok(CouplingPoint { gap, failure_prob: prob, std_err, n_paths })
}

/// Sweeps the initial gap over a geometric grid in the direction
/// (e_1 − e_2)/√2 of the reduced block and fits the decay exponent of the
/// failure probability. Returns the per-gap points and the fitted exponent.
pub fn coupling_sweep(
    model: &CouplingModel,
    m: usize,
    p_ring: &[f64],
    p: &[f64],
    gaps: &[f64],
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<(Vec<CouplingPoint>, f64)> {
    let mut points = Vec::with_capacity(gaps.len());
    for (gi, &gap) in gaps.iter().enumerate() {
        let shift = gap / 2.0f64.sqrt();
        let mut q = p.to_vec();
        q[0] += shift;
        q[1] -= shift;
        if q[1] < 0.0 {
            return Err(Error::invalid("gap too large for the chosen base point"));
        }
        let s_horizon = gap.powf(1.0 / 3.0).min(model.spec.horizon);
        points.push(coupling_experiment(
            model,
            m,
            p_ring,
            p,
            &q,
            s_horizon,
            dt,
            n_paths,
            seed.wrapping_add(gi as u64),
        )?);
    }
    let xs: Vec<f64> = points.iter().map(|pt| pt.gap.ln()).collect();
    let ys: Vec<f64> = points
        .iter()
        .map(|pt| pt.failure_prob.max(pt.std_err).ln())
        .collect();
    let exponent = crate::sde::fit_slope(&xs, &ys);
    Ok((points, exponent))
}

/// Moment comparison between the reconstructed law (P°, ς²(P°)P) and the
/// direct simulation of X at times {T/4, T/2, T}. Returns the max |z| over
/// coordinates, times, and first/second moments.
pub fn identity_in_law_check(
    model: &CouplingModel,
    m: usize,
    start: &SimplexPoint,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<f64> {
    let d = model.spec.d;
    if m == 0 || m >= d {
        return Err(Error::invalid("m must satisfy 1 <= m <= d-1"));
    }
    let horizon = model.spec.horizon;
    let steps = (horizon / dt).round() as usize;
    let checkpoints = [steps / 4, steps / 2, steps];
    // reduced start: p° = x_{1..m}, p_i = x_{m+i} / ς²
    let p_ring0: Vec<f64> = start.weights()[..m].to_vec();
    let s2 = 1.0 - p_ring0.iter().sum::<f64>();
    if s2 < 1e-6 {
        return Err(Error::invalid("start puts almost all mass on p°"));
    }
    let p0: Vec<f64> = start.weights()[m..].iter().map(|&x| x / s2).collect();

    // per-(path, coordinate, checkpoint) samples of the reconstructed point
    let run_reduced = |pid: u64| -> Result<Vec<Vec<f64>>> {
        let mut rng = StreamRng::from_parts(seed, &[domain::COUPLING_PATH, 1, pid]);
        let mut st = ConditioningState::new(m, p_ring0.clone(), p0.clone())?;
        let mut snaps = Vec::new();
        for k in 0..steps {
            let dw = draw_increments(d, dt, &mut rng);
            let dw_ring = draw_increments(d, dt, &mut rng);
            st = step_reduced(&st, k as f64 * dt, dt, &dw, &dw_ring, model)?;
            if checkpoints.contains(&(k + 1)) {
                snaps.push(st.reconstruct());
            }
        }
        Ok(snaps)
    };
    let run_direct = |pid: u64| -> Result<Vec<Vec<f64>>> {
        let mut rng = StreamRng::from_parts(seed, &[domain::COUPLING_PATH, 2, pid]);
        let mut x = start.clone();
        let mut snaps = Vec::new();
        for k in 0..steps {
            let dw = draw_increments(d, dt, &mut rng);
            x = step_x(&x, k as f64 * dt, dt, &dw, model)?;
            if checkpoints.contains(&(k + 1)) {
                snaps.push(x.weights().to_vec());
            }
        }
        Ok(snaps)
    };
    let reduced: Result<Vec<_>> = (0..n_paths as u64).into_par_iter().map(run_reduced).collect();
    let direct: Result<Vec<_>> = (0..n_paths as u64).into_par_iter().map(run_direct).collect();
    let (reduced, direct) = (reduced?, direct?);
    let mut max_z = 0.0f64;
    for ck in 0..checkpoints.len() {
        for i in 0..d {
            for power in [1i32, 2] {
                let a: Vec<f64> =
                    reduced.iter().map(|s| s[ck][i].powi(power)).collect();
                let b: Vec<f64> = direct.iter().map(|s| s[ck][i].powi(power)).collect();
                let (ma, sa) = mean_se(&a);
                let (mb, sb) = mean_se(&b);
                let z = (ma - mb) / (sa * sa + sb * sb).sqrt();
                max_z = max_z.max(z.abs());
            }
        }
    }
    Ok(max_z)
}
