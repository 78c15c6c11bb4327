//! Simplex geometry: validated points, local (hat) charts, the Wright-Fisher
//! distance, the degenerate diffusion matrix and lattice grids for d in {2,3}.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Absolute tolerance on the coordinate sum.
pub const SUM_TOL: f64 = 1e-12;
/// Entries above this (negative) floor are treated as roundoff and clipped to 0.
pub const NEG_CLIP: f64 = -1e-14;

/// A point of the probability simplex: d nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexPoint {
    weights: Vec<f64>,
}

impl SimplexPoint {
    /// Validates (and clips roundoff-negative entries of) `weights`.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let mut w = weights;
        if w.len() < 2 {
            return Err(Error::invalid("simplex point needs d >= 2 entries"));
        }
        let mut sum = 0.0;
        for (i, x) in w.iter_mut().enumerate() {
            if !x.is_finite() {
                return Err(Error::invalid(format!("entry {i} is not finite")));
            }
            if *x < 0.0 {
                if *x < NEG_CLIP {
                    return Err(Error::invalid(format!("entry {i} = {x} is negative")));
                }
                *x = 0.0;
            }
            sum += *x;
        }
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("weights sum to {sum}, not 1")));
        }
        Ok(SimplexPoint { weights: w })
    }

    /// Uniform barycenter (1/d, ..., 1/d).
    pub fn barycenter(d: usize) -> Self {
        SimplexPoint { weights: vec![1.0 / d as f64; d] }
    }

    /// Vertex e_i.
    pub fn vertex(d: usize, i: usize) -> Self {
        let mut w = vec![0.0; d];
        w[i] = 1.0;
        SimplexPoint { weights: w }
    }

    /// Bypasses validation; callers must guarantee the invariants.
    pub(crate) fn from_raw(weights: Vec<f64>) -> Self {
        SimplexPoint { weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// True iff every coordinate is strictly positive.
    pub fn is_interior(&self) -> bool {
        self.weights.iter().all(|&x| x > 0.0)
    }

    pub fn min_coordinate(&self) -> f64 {
        self.weights.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Euclidean projection of an arbitrary vector onto the simplex.
///
/// Sort-and-threshold algorithm; idempotent on points already in the simplex.
pub fn project_to_simplex(v: &[f64]) -> Result<SimplexPoint> {
    if v.len() < 2 {
        return Err(Error::invalid("need d >= 2 entries"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite input"));
    }
    let d = v.len();
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if k + 1 == d || sorted[k + 1] <= t {
            theta = t;
            // check the support condition before accepting
            if u > t {
                break;
            }
        }
    }
    let mut w: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // renormalize away the last-bit drift so the invariant holds exactly
    let s: f64 = w.iter().sum();
    for x in &mut w {
        *x /= s;
    }
    SimplexPoint::new(w)
}

/// The Wright-Fisher distance sum_i |sqrt(p_i) - sqrt(q_i)|.
pub fn wf_distance(p: &SimplexPoint, q: &SimplexPoint) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::invalid("dimension mismatch"));
    }
    Ok(p.weights
        .iter()
        .zip(&q.weights)
        .map(|(&a, &b)| (a.sqrt() - b.sqrt()).abs())
        .sum())
}

/// The Wright-Fisher diffusion matrix eps^2 (p_i delta_ij - p_i p_j).
///
/// Positive semi-definite with the all-ones vector in its kernel; vanishes
/// entirely at the vertices.
pub fn diffusion_matrix(p: &SimplexPoint, epsilon: f64) -> Vec<Vec<f64>> {
    let d = p.dim();
    let e2 = epsilon * epsilon;
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    e2 * (p.get(i) * delta - p.get(i) * p.get(j))
                })
                .collect()
        })
        .collect()
}

/// The hat chart dropping one coordinate: p <-> p^{-i}.
#[derive(Debug, Clone, Copy)]
pub struct LocalChart {
    dropped_index: usize,
    dim: usize,
}

impl LocalChart {
    pub fn new(dim: usize, dropped_index: usize) -> Result<Self> {
        if dropped_index >= dim {
            return Err(Error::invalid("dropped index out of range"));
        }
        Ok(LocalChart { dropped_index, dim })
    }

    pub fn dropped_index(&self) -> usize {
        self.dropped_index
    }

    /// p -> p^{-i} (the d-1 remaining coordinates, original order).
    pub fn to_local(&self, p: &SimplexPoint) -> Vec<f64> {
        p.weights
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != self.dropped_index)
            .map(|(_, &x)| x)
            .collect()
    }

    /// p^{-i} -> p; the dropped coordinate is rebuilt as 1 - sum of the rest.
    pub fn from_local(&self, local: &[f64]) -> Result<SimplexPoint> {
        if local.len() + 1 != self.dim {
            return Err(Error::invalid("local coordinate length mismatch"));
        }
        let rest: f64 = local.iter().sum();
        let mut w = Vec::with_capacity(self.dim);
        let mut it = local.iter();
        for j in 0..self.dim {
            if j == self.dropped_index {
                w.push(1.0 - rest);
            } else {
                w.push(*it.next().unwrap());
            }
        }
        SimplexPoint::new(w)
    }
}

/// A lattice grid on the hat simplex (index d dropped), d in {2, 3}.
#[derive(Debug, Clone)]
pub struct SimplexGrid {
    pub dimension: usize,
    pub resolution: usize,
    nodes: Vec<SimplexPoint>,
    boundary: Vec<bool>,
    /// hat-coordinate integer labels, lexicographic
    labels: Vec<Vec<usize>>,
}

impl SimplexGrid {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[SimplexPoint] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &SimplexPoint {
        &self.nodes[id]
    }

    pub fn is_boundary(&self, id: usize) -> bool {
        self.boundary[id]
    }

    /// Hat-lattice integer coordinates of a node.
    pub fn label(&self, id: usize) -> &[usize] {
        &self.labels[id]
    }

    /// Hat-chart spacing 1/n.
    pub fn dx(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    /// Node id for hat label (i) in d=2 or (i, j) in d=3; None outside.
    pub fn index_of(&self, label: &[usize]) -> Option<usize> {
        let n = self.resolution;
        match self.dimension {
            2 => {
                let i = label[0];
                (i <= n).then_some(i)
            }
            3 => {
                let (i, j) = (label[0], label[1]);
                (i + j <= n).then(|| i * (n + 1) - i * (i.saturating_sub(1)) / 2 + j)
            }
            _ => None,
        }
    }

    /// CSV with header (node_id, p_1, ..., p_d, is_boundary).
    pub fn to_csv(&self) -> String {
        let d = self.dimension;
        let mut out = String::from("node_id");
        for k in 1..=d {
            out.push_str(&format!(",p_{k}"));
        }
        out.push_str(",is_boundary\n");
        for (id, node) in self.nodes.iter().enumerate() {
            out.push_str(&id.to_string());
            for &w in node.weights() {
                out.push_str(&format!(",{w:.17}"));
            }
            out.push_str(if self.boundary[id] { ",1\n" } else { ",0\n" });
        }
        out
    }
}

/// Builds the lattice {k/n} on the hat simplex, lexicographic node order.
pub fn build_grid(d: usize, n: usize) -> Result<SimplexGrid> {
    if d != 2 && d != 3 {
        return Err(Error::UnsupportedDimension(d));
    }
    if n < 2 {
        return Err(Error::invalid("grid resolution must be >= 2"));
    }
    let mut nodes = Vec::new();
    let mut boundary = Vec::new();
    let mut labels = Vec::new();
    let h = 1.0 / n as f64;
    match d {
        2 => {
            for i in 0..=n {
                let x = i as f64 * h;
                nodes.push(SimplexPoint::from_raw(vec![x, 1.0 - x]));
                boundary.push(i == 0 || i == n);
                labels.push(vec![i]);
            }
        }
        3 => {
            for i in 0..=n {
                for j in 0..=(n - i) {
                    let x1 = i as f64 * h;
                    let x2 = j as f64 * h;
                    nodes.push(SimplexPoint::from_raw(vec![x1, x2, 1.0 - x1 - x2]));
                    boundary.push(i == 0 || j == 0 || i + j == n);
                    labels.push(vec![i, j]);
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(SimplexGrid { dimension: d, resolution: n, nodes, boundary, labels })
}
