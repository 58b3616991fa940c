//! Bilevel problem instances exposing per-node stochastic oracles.
//!
//! Every oracle is a pure function of `(node, x, y, ids)`: replaying the same
//! sample ids reproduces bit-identical output, which the variance-reduced
//! estimator relies on when it re-evaluates the previous iterate.

mod hyperlogreg;
mod quadratic;

pub use hyperlogreg::{HyperLogReg, NodeData};
pub use quadratic::{QuadraticBilevel, QuadraticConfig};

use crate::error::{Error, Result};
use crate::vecops;

/// Loss and accuracy of a full-data evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub upper_loss: f64,
    pub accuracy: Option<f64>,
}

/// Per-node stochastic first- and second-order oracles of a bilevel problem
/// `min_x (1/K) sum_k f_k(x, y*(x))` with `y*(x) = argmin_y (1/K) sum_k g_k(x, y)`.
///
/// Upper-level ids index the node's upper-level samples (e.g. validation
/// shard); lower-level ids index its lower-level samples (training shard).
pub trait BilevelProblem: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn node_count(&self) -> usize;
    fn upper_sample_count(&self, node: usize) -> usize;
    fn lower_sample_count(&self, node: usize) -> usize;

    fn grad_x_f(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<Vec<f64>>;
    fn grad_y_f(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<Vec<f64>>;
    fn grad_y_g(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<Vec<f64>>;
    /// Action of the lower-level Hessian in `y` on `v` (length `dim_y`).
    fn hvp_yy_g(
        &self,
        node: usize,
        x: &[f64],
        y: &[f64],
        ids: &[usize],
        v: &[f64],
    ) -> Result<Vec<f64>>;
    /// Action of the mixed block `d/dx grad_y g` on `v`; returns length `dim_x`.
    fn jvp_xy_g(
        &self,
        node: usize,
        x: &[f64],
        y: &[f64],
        ids: &[usize],
        v: &[f64],
    ) -> Result<Vec<f64>>;

    /// Mini-batch upper objective on a node.
    fn upper_loss(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<f64>;
    /// Mini-batch lower objective on a node.
    fn lower_loss(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<f64>;

    /// Network-average upper objective over all data.
    fn full_upper_loss(&self, x: &[f64], y: &[f64]) -> f64;

    fn evaluate(&self, x: &[f64], y: &[f64]) -> Evaluation;

    /// Closed-form inner minimizer, when the instance has one.
    fn exact_inner_solution(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Closed-form hypergradient of the network objective, when available.
    fn exact_hypergrad(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Network-average gradient of `g` in `y` over full shards.
    fn full_grad_y_g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        network_mean(self.node_count(), |k| {
            self.grad_y_g(k, x, y, &full_ids(self.lower_sample_count(k)))
        })
    }

    fn full_grad_y_f(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        network_mean(self.node_count(), |k| {
            self.grad_y_f(k, x, y, &full_ids(self.upper_sample_count(k)))
        })
    }

    fn full_grad_x_f(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        network_mean(self.node_count(), |k| {
            self.grad_x_f(k, x, y, &full_ids(self.upper_sample_count(k)))
        })
    }

    fn full_hvp_yy_g(&self, x: &[f64], y: &[f64], v: &[f64]) -> Vec<f64> {
        network_mean(self.node_count(), |k| {
            self.hvp_yy_g(k, x, y, &full_ids(self.lower_sample_count(k)), v)
        })
    }

    fn full_jvp_xy_g(&self, x: &[f64], y: &[f64], v: &[f64]) -> Vec<f64> {
        network_mean(self.node_count(), |k| {
            self.jvp_xy_g(k, x, y, &full_ids(self.lower_sample_count(k)), v)
        })
    }

    fn full_lower_loss(&self, x: &[f64], y: &[f64]) -> f64 {
        let k = self.node_count();
        let mut s = 0.0;
        for node in 0..k {
            s += self
                .lower_loss(node, x, y, &full_ids(self.lower_sample_count(node)))
                .expect("full shard ids are valid");
        }
        s / k as f64
    }
}

/// `0..n` as a batch.
pub fn full_ids(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn network_mean(k: usize, mut per_node: impl FnMut(usize) -> Result<Vec<f64>>) -> Vec<f64> {
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|node| per_node(node).expect("full shard ids are valid"))
        .collect();
    vecops::column_mean(&cols)
}

pub(crate) fn check_ids(node: usize, ids: &[usize], size: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::InvalidBatch(format!("empty batch on node {node}")));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= size) {
        return Err(Error::ShardViolation { node, id, size });
    }
    Ok(())
}

pub(crate) fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Shape {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_node(node: usize, k: usize) -> Result<()> {
    if node >= k {
        return Err(Error::InvalidSize(format!("node {node} outside 0..{k}")));
    }
    Ok(())
}
