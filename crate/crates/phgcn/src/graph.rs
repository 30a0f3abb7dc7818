//! The hierarchical part graph: fixed topology over partition levels and
//! per-image weighted adjacency.
//!
//! Within a level, stripes are connected when they are vertically adjacent
//! or share an adjacent stripe (distance one or two along the chain).
//! Across levels, a coarse part is connected to every finer part whose row
//! span it contains. Edge weights are `exp(-||x_i - x_j|| / delta)`,
//! mirrored so the adjacency is symmetric with a zero diagonal.

use ndarray::{Array2, NdFloat};

use crate::dataset::{PartFeatureSet, PartId, PartitionSpec};
use crate::error::{Error, Result};

/// Node layering and undirected edge set for a partition spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    nodes: Vec<PartId>,
    edges: Vec<(usize, usize)>,
    levels: Vec<u32>,
}

impl GraphTopology {
    pub fn nodes(&self) -> &[PartId] {
        &self.nodes
    }

    /// Undirected edges as global node index pairs `(a, b)` with `a < b`,
    /// sorted lexicographically.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }
}

/// Build the fixed topology for a partition spec.
pub fn build_topology(spec: &PartitionSpec) -> GraphTopology {
    let levels = spec.levels().to_vec();
    let mut nodes = Vec::with_capacity(spec.num_parts());
    let mut level_start = Vec::with_capacity(levels.len());
    for (level, &n) in levels.iter().enumerate() {
        level_start.push(nodes.len());
        for part in 0..n as usize {
            nodes.push(PartId { level, part });
        }
    }

    let mut edges = Vec::new();
    // Intra-layer: adjacent stripes or stripes sharing an adjacent stripe.
    for (level, &n) in levels.iter().enumerate() {
        let base = level_start[level];
        for a in 0..n as usize {
            for b in a + 1..n as usize {
                if b - a <= 2 {
                    edges.push((base + a, base + b));
                }
            }
        }
    }
    // Inter-layer: coarse stripe a of n_p parts contains fine stripe b of
    // n_q parts iff a/n_p <= b/n_q and (b+1)/n_q <= (a+1)/n_p, evaluated in
    // exact integer arithmetic.
    for p in 0..levels.len() {
        for q in p + 1..levels.len() {
            let (np, nq) = (levels[p] as u64, levels[q] as u64);
            for a in 0..np {
                for b in 0..nq {
                    if a * nq <= b * np && (b + 1) * np <= (a + 1) * nq {
                        edges.push((level_start[p] + a as usize, level_start[q] + b as usize));
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();

    GraphTopology {
        nodes,
        edges,
        levels,
    }
}

/// Per-image weighted adjacency: symmetric, zero diagonal, zero off the
/// topology edge set.
#[derive(Debug, Clone)]
pub struct WeightedAdjacency<F> {
    matrix: Array2<F>,
}

impl<F: NdFloat> WeightedAdjacency<F> {
    pub fn matrix(&self) -> &Array2<F> {
        &self.matrix
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.nrows()
    }

    /// Wrap a matrix the caller promises is symmetric, nonnegative, and
    /// zero on the diagonal (testing and diagnostics).
    pub fn from_matrix_unchecked(matrix: Array2<F>) -> Self {
        WeightedAdjacency { matrix }
    }
}

/// Row-stochastic adjacency used for propagation.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency<F> {
    matrix: Array2<F>,
}

impl<F: NdFloat> NormalizedAdjacency<F> {
    pub fn matrix(&self) -> &Array2<F> {
        &self.matrix
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.nrows()
    }

    /// Directly wrap a row-stochastic matrix (testing and diagnostics).
    pub fn from_matrix(matrix: Array2<F>) -> Self {
        NormalizedAdjacency { matrix }
    }
}

fn edge_distance<F: NdFloat>(x: &PartFeatureSet<F>, a: usize, b: usize) -> F {
    let ra = x.features.row(a);
    let rb = x.features.row(b);
    let mut acc = F::zero();
    for (va, vb) in ra.iter().zip(rb.iter()) {
        let d = *va - *vb;
        acc += d * d;
    }
    acc.sqrt()
}

fn check_features<F: NdFloat>(x: &PartFeatureSet<F>, topo: &GraphTopology) -> Result<()> {
    if x.parts != topo.nodes {
        return Err(Error::ShapeMismatch(format!(
            "part set has {} parts, topology expects {}",
            x.parts.len(),
            topo.nodes.len()
        )));
    }
    if x.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "part feature",
            detail: "edge weights require finite part vectors".into(),
        });
    }
    Ok(())
}

/// Mean Euclidean distance over all topology edges; 1 when that mean is 0.
pub fn auto_delta<F: NdFloat>(x: &PartFeatureSet<F>, topo: &GraphTopology) -> Result<F> {
    check_features(x, topo)?;
    if topo.edges.is_empty() {
        return Err(Error::Invalid("auto delta needs at least one edge".into()));
    }
    let mut acc = F::zero();
    for &(a, b) in &topo.edges {
        acc += edge_distance(x, a, b);
    }
    let mean = acc / F::from(topo.edges.len()).expect("edge count fits");
    if mean == F::zero() {
        Ok(F::one())
    } else {
        Ok(mean)
    }
}

/// Weight every topology edge as `exp(-distance / delta)`.
pub fn edge_weights<F: NdFloat>(
    x: &PartFeatureSet<F>,
    topo: &GraphTopology,
    delta: F,
) -> Result<WeightedAdjacency<F>> {
    check_features(x, topo)?;
    if delta <= F::zero() || !delta.is_finite() {
        return Err(Error::Invalid(format!(
            "delta must be a positive finite number, got {delta}"
        )));
    }
    let n = topo.num_nodes();
    let mut matrix = Array2::<F>::zeros((n, n));
    for &(a, b) in &topo.edges {
        let w = (-edge_distance(x, a, b) / delta).exp();
        matrix[(a, b)] = w;
        matrix[(b, a)] = w;
    }
    Ok(WeightedAdjacency { matrix })
}

/// Row-normalize: each row divided by its sum; an all-zero row becomes the
/// unit self row.
pub fn row_normalize<F: NdFloat>(adj: &WeightedAdjacency<F>) -> NormalizedAdjacency<F> {
    let n = adj.matrix.nrows();
    let mut matrix = adj.matrix.clone();
    for i in 0..n {
        let sum = matrix.row(i).sum();
        if sum == F::zero() {
            matrix.row_mut(i).fill(F::zero());
            matrix[(i, i)] = F::one();
        } else {
            matrix.row_mut(i).mapv_inplace(|v| v / sum);
        }
    }
    NormalizedAdjacency { matrix }
}
