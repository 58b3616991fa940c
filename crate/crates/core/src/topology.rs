//! Communication graphs and doubly stochastic mixing matrices.
//!
//! A mixing matrix `W` is symmetric, has unit row sums and a spectral parameter
//! `lambda = max |eig_i|` over the non-leading eigenvalues with `lambda < 1`.
//! One gossip round replaces the node-column matrix `M` by `M W`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Complete,
    Star,
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Self::Ring),
            "complete" => Ok(Self::Complete),
            "star" => Ok(Self::Star),
            other => Err(Error::Config(format!("unknown topology `{other}`"))),
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ring => "ring",
            Self::Complete => "complete",
            Self::Star => "star",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingScheme {
    UniformNeighbor,
    Metropolis,
}

impl FromStr for MixingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_neighbor" => Ok(Self::UniformNeighbor),
            "metropolis" => Ok(Self::Metropolis),
            other => Err(Error::Config(format!("unknown mixing scheme `{other}`"))),
        }
    }
}

impl fmt::Display for MixingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::UniformNeighbor => "uniform_neighbor",
            Self::Metropolis => "metropolis",
        })
    }
}

/// Undirected connected graph over nodes `0..node_count`.
///
/// Edges are stored as `(min, max)` pairs in ascending order. Self-weights
/// belong to the mixing matrix, not to the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    kind: Option<TopologyKind>,
}

impl Graph {
    /// Builds a graph from an arbitrary edge list. Fails on out-of-range
    /// nodes, self-loops, or a disconnected result. Duplicates are merged.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::InvalidSize("graph needs at least one node".into()));
        }
        let mut norm = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(Error::InvalidSize(format!(
                    "edge ({a},{b}) outside 0..{node_count}"
                )));
            }
            if a == b {
                return Err(Error::InvalidSize(format!("self-loop at node {a}")));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        norm.dedup();
        let g = Self {
            node_count,
            edges: norm,
            kind: None,
        };
        if !g.is_connected() {
            return Err(Error::Disconnected);
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn kind(&self) -> Option<TopologyKind> {
        self.kind
    }

    /// Neighbors of `node` in ascending order.
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == node {
                    Some(b)
                } else if b == node {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == node || b == node)
            .count()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.node_count];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Builds one of the supported named topologies over `k` nodes.
pub fn build_topology(kind: TopologyKind, k: usize) -> Result<Graph> {
    if k == 0 {
        return Err(Error::InvalidSize("topology needs K >= 1".into()));
    }
    let edges: Vec<(usize, usize)> = match kind {
        TopologyKind::Ring => {
            if k == 1 {
                vec![]
            } else {
                (0..k).map(|i| (i, (i + 1) % k)).collect()
            }
        }
        TopologyKind::Complete => (0..k)
            .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
            .collect(),
        TopologyKind::Star => (1..k).map(|j| (0, j)).collect(),
    };
    let mut g = Graph::from_edges(k, &edges)?;
    g.kind = Some(kind);
    Ok(g)
}

/// Symmetric doubly stochastic mixing matrix with its spectral data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrix {
    weights: Vec<Vec<f64>>,
    lambda: f64,
    spectral_gap: f64,
}

impl MixingMatrix {
    /// Validates a dense matrix against the mixing assumptions and computes
    /// its spectrum.
    pub fn from_weights(weights: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || weights.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidSize("mixing matrix must be square".into()));
        }
        for i in 0..k {
            for j in 0..k {
                if weights[i][j] < 0.0 || !weights[i][j].is_finite() {
                    return Err(Error::AssumptionViolation(format!(
                        "entry ({i},{j}) = {} is not a non-negative weight",
                        weights[i][j]
                    )));
                }
                if weights[i][j] != weights[j][i] {
                    return Err(Error::AssumptionViolation(format!(
                        "not symmetric at ({i},{j})"
                    )));
                }
            }
            let row: f64 = weights[i].iter().sum();
            if (row - 1.0).abs() > 1e-12 {
                return Err(Error::AssumptionViolation(format!("row {i} sums to {row}")));
            }
        }
        let (lambda, spectral_gap) = spectral_parameters(&weights)?;
        Ok(Self {
            weights,
            lambda,
            spectral_gap,
        })
    }

    /// The trivial single-node matrix `[1]`.
    pub fn single() -> Self {
        Self {
            weights: vec![vec![1.0]],
            lambda: 0.0,
            spectral_gap: 1.0,
        }
    }

    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i][j]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn spectral_gap(&self) -> f64 {
        self.spectral_gap
    }

    /// One gossip round: returns the columns of `M W`, where `cols[i]` is the
    /// column held by node `i`. Column `j` of the result is
    /// `sum_i W[i][j] * cols[i]`, accumulated over `i` in ascending order and
    /// skipping zero weights.
    pub fn mix(&self, cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let k = self.size();
        assert_eq!(cols.len(), k, "one column per node");
        let d = cols[0].len();
        (0..k)
            .map(|j| {
                let mut out = vec![0.0; d];
                for (i, col) in cols.iter().enumerate() {
                    let w = self.weights[i][j];
                    if w != 0.0 {
                        for (o, v) in out.iter_mut().zip(col) {
                            *o += w * v;
                        }
                    }
                }
                out
            })
            .collect()
    }
}

/// Builds a mixing matrix for `graph` with the requested weighting scheme.
///
/// `UniformNeighbor` needs a regular graph: every node gives weight
/// `1/(slots+1)` to itself and to each neighbor slot. On a ring with `K >= 2`
/// a node has the two slots `i-1` and `i+1`, which coincide when `K = 2`.
/// `Metropolis` uses `w_ij = 1/(1 + max(deg i, deg j))` on edges and puts the
/// remaining mass on the diagonal.
pub fn build_mixing(graph: &Graph, scheme: MixingScheme) -> Result<MixingMatrix> {
    let k = graph.node_count();
    if k == 1 {
        return Ok(MixingMatrix::single());
    }
    let mut w = vec![vec![0.0; k]; k];
    match scheme {
        MixingScheme::UniformNeighbor => {
            if graph.kind() == Some(TopologyKind::Ring) {
                let share = 1.0 / 3.0;
                for (i, row) in w.iter_mut().enumerate() {
                    row[i] = share;
                    row[(i + 1) % k] += share;
                    row[(i + k - 1) % k] += share;
                }
            } else {
                let deg = graph.degree(0);
                if (1..k).any(|i| graph.degree(i) != deg) {
                    return Err(Error::SchemeMismatch(
                        "uniform_neighbor weights need a regular graph; use metropolis".into(),
                    ));
                }
                let share = 1.0 / (deg as f64 + 1.0);
                for (i, row) in w.iter_mut().enumerate() {
                    row[i] = share;
                    for j in graph.neighbors(i) {
                        row[j] = share;
                    }
                }
            }
        }
        MixingScheme::Metropolis => {
            for &(a, b) in graph.edges() {
                let wij = 1.0 / (1.0 + graph.degree(a).max(graph.degree(b)) as f64);
                w[a][b] = wij;
                w[b][a] = wij;
            }
            for (i, row) in w.iter_mut().enumerate() {
                let off: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, v)| v)
                    .sum();
                row[i] = 1.0 - off;
            }
        }
    }
    MixingMatrix::from_weights(w)
}

/// Returns `(lambda, 1 - lambda)` for a symmetric doubly stochastic matrix.
pub fn spectral_gap(weights: &[Vec<f64>]) -> Result<(f64, f64)> {
    spectral_parameters(weights)
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(weights: &[Vec<f64>]) -> Vec<f64> {
    let k = weights.len();
    let m = DMatrix::from_fn(k, k, |i, j| weights[i][j]);
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn spectral_parameters(weights: &[Vec<f64>]) -> Result<(f64, f64)> {
    let k = weights.len();
    if k == 1 {
        return Ok((0.0, 1.0));
    }
    let ev = symmetric_eigenvalues(weights);
    let (lead_idx, lead) = ev
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
        .expect("non-empty spectrum");
    if (lead - 1.0).abs() > 1e-10 {
        return Err(Error::AssumptionViolation(format!(
            "leading eigenvalue {lead} is not 1"
        )));
    }
    let lambda = ev
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != lead_idx)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    if lambda >= 1.0 - 1e-12 {
        return Err(Error::AssumptionViolation(format!(
            "|lambda_2| = {lambda} is not below 1"
        )));
    }
    Ok((lambda, 1.0 - lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ring_three_edges() {
        let g = build_topology(TopologyKind::Ring, 3).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn complete_two_and_star_four() {
        let g = build_topology(TopologyKind::Complete, 2).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        let s = build_topology(TopologyKind::Star, 4).unwrap();
        assert_eq!(s.edges(), &[(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn zero_nodes_rejected() {
        assert!(matches!(
            build_topology(TopologyKind::Ring, 0),
            Err(Error::InvalidSize(_))
        ));
    }

    #[test]
    fn disconnected_graph_rejected() {
        assert!(matches!(
            Graph::from_edges(4, &[(0, 1), (2, 3)]),
            Err(Error::Disconnected)
        ));
    }

    #[test]
    fn complete_three_is_exact_average() {
        let g = build_topology(TopologyKind::Complete, 3).unwrap();
        let w = build_mixing(&g, MixingScheme::UniformNeighbor).unwrap();
        for row in w.weights() {
            for &v in row {
                assert_eq!(v, 1.0 / 3.0);
            }
        }
        assert!(close(w.lambda(), 0.0, 1e-12));
        assert!(close(w.spectral_gap(), 1.0, 1e-12));
    }

    #[test]
    fn ring_two_folds_both_slots_onto_peer() {
        let g = build_topology(TopologyKind::Ring, 2).unwrap();
        let w = build_mixing(&g, MixingScheme::UniformNeighbor).unwrap();
        assert!(close(w.weight(0, 0), 1.0 / 3.0, 1e-15));
        assert!(close(w.weight(0, 1), 2.0 / 3.0, 1e-15));
        // eigenvalues of [[a, b], [b, a]] are a + b and a - b
        assert!(close(w.lambda(), 1.0 / 3.0, 1e-12));
        assert!(close(w.spectral_gap(), 2.0 / 3.0, 1e-12));
    }

    #[test]
    fn ring_eight_matches_circulant_spectrum() {
        let g = build_topology(TopologyKind::Ring, 8).unwrap();
        let w = build_mixing(&g, MixingScheme::UniformNeighbor).unwrap();
        let expect = 1.0 / 3.0 + (2.0 / 3.0) * (2.0 * std::f64::consts::PI / 8.0).cos();
        assert!(close(w.lambda(), expect, 1e-12));
    }

    #[test]
    fn identity_violates_assumption() {
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            spectral_gap(&id),
            Err(Error::AssumptionViolation(_))
        ));
    }

    #[test]
    fn star_needs_metropolis() {
        let g = build_topology(TopologyKind::Star, 5).unwrap();
        assert!(matches!(
            build_mixing(&g, MixingScheme::UniformNeighbor),
            Err(Error::SchemeMismatch(_))
        ));
        let w = build_mixing(&g, MixingScheme::Metropolis).unwrap();
        // hub: deg 4, leaves: deg 1 -> edge weight 1/5
        assert!(close(w.weight(0, 1), 0.2, 1e-15));
        assert!(close(w.weight(1, 1), 0.8, 1e-15));
        assert!(close(w.weight(0, 0), 0.2, 1e-15));
    }

    #[test]
    fn weights_respect_graph_support() {
        let g = build_topology(TopologyKind::Ring, 6).unwrap();
        let w = build_mixing(&g, MixingScheme::Metropolis).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i != j && !g.has_edge(i, j) {
                    assert_eq!(w.weight(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn bipartite_swap_rejected() {
        // two nodes exchanging everything: eigenvalues {1, -1}
        let w = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(
            MixingMatrix::from_weights(w),
            Err(Error::AssumptionViolation(_))
        ));
    }

    #[test]
    fn parse_names() {
        assert_eq!("ring".parse::<TopologyKind>().unwrap(), TopologyKind::Ring);
        assert_eq!(
            "metropolis".parse::<MixingScheme>().unwrap(),
            MixingScheme::Metropolis
        );
        assert!("torus".parse::<TopologyKind>().is_err());
    }
}
