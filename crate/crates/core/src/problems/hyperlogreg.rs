//! Hyperparameter optimization of multinomial logistic regression.
//!
//! Lower level on node `k`: mean softmax cross-entropy of `y` on the node's
//! training shard plus `(1/(c d)) sum_{p,q} exp(x_q) y_pq^2`.
//! Upper level: mean cross-entropy on the node's validation shard.
//!
//! `y` is a `d x c` weight matrix flattened feature-major: entry `(q, p)`
//! (feature `q`, class `p`) lives at `q * c + p`, so logits are
//! `z_p = sum_q y[q * c + p] a_q`.

use crate::error::{Error, Result};
use crate::ingest::{Dataset, SparseRow};

use super::{check_ids, check_len, check_node, BilevelProblem, Evaluation};

/// Training and validation shard of one node.
#[derive(Debug, Clone)]
pub struct NodeData {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone)]
pub struct HyperLogReg {
    nodes: Vec<NodeData>,
    dim: usize,
    classes: usize,
}

impl HyperLogReg {
    pub fn new(nodes: Vec<NodeData>) -> Result<Self> {
        let first = nodes
            .first()
            .ok_or_else(|| Error::InvalidSize("need at least one node".into()))?;
        let dim = first.train.dim;
        let classes = first.train.classes();
        if dim == 0 || classes < 2 {
            return Err(Error::InvalidSize(format!(
                "need d >= 1 and at least two classes, got d={dim} c={classes}"
            )));
        }
        for (k, n) in nodes.iter().enumerate() {
            for (what, ds) in [("train", &n.train), ("val", &n.val)] {
                if ds.dim != dim || ds.classes() != classes {
                    return Err(Error::InvalidSize(format!(
                        "node {k} {what} shard has d={} c={}, expected d={dim} c={classes}",
                        ds.dim,
                        ds.classes()
                    )));
                }
                if ds.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                if ds.labels.iter().any(|&l| l >= classes) {
                    return Err(Error::InvalidSize(format!(
                        "node {k} {what}: label out of range"
                    )));
                }
            }
        }
        Ok(Self {
            nodes,
            dim,
            classes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn node_data(&self, node: usize) -> &NodeData {
        &self.nodes[node]
    }

    fn reg_scale(&self) -> f64 {
        1.0 / (self.classes * self.dim) as f64
    }

    fn logits(&self, y: &[f64], row: &SparseRow, out: &mut [f64]) {
        let c = self.classes;
        out.fill(0.0);
        for (q, a) in row.iter() {
            let w = &y[q * c..(q + 1) * c];
            for (o, wi) in out.iter_mut().zip(w) {
                *o += wi * a;
            }
        }
    }

    /// Softmax in place; returns `log sum exp` of the input logits.
    fn softmax(z: &mut [f64]) -> f64 {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in z.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in z.iter_mut() {
            *v /= s;
        }
        m + s.ln()
    }

    fn ce_loss(&self, y: &[f64], data: &Dataset, ids: &[usize]) -> f64 {
        let mut z = vec![0.0; self.classes];
        let mut total = 0.0;
        for &i in ids {
            self.logits(y, &data.rows[i], &mut z);
            let label_logit = z[data.labels[i]];
            let lse = Self::softmax(&mut z);
            total += lse - label_logit;
        }
        total / ids.len() as f64
    }

    fn ce_grad(&self, y: &[f64], data: &Dataset, ids: &[usize]) -> Vec<f64> {
        let c = self.classes;
        let mut g = vec![0.0; y.len()];
        let mut z = vec![0.0; c];
        let inv = 1.0 / ids.len() as f64;
        for &i in ids {
            let row = &data.rows[i];
            self.logits(y, row, &mut z);
            Self::softmax(&mut z);
            z[data.labels[i]] -= 1.0;
            for (q, a) in row.iter() {
                let gq = &mut g[q * c..(q + 1) * c];
                for (gi, ri) in gq.iter_mut().zip(&z) {
                    *gi += inv * a * ri;
                }
            }
        }
        g
    }

    /// Exact Hessian of the mean cross-entropy applied to `v`:
    /// per sample `a (diag(s) - s s') (V' a)`.
    fn ce_hvp(&self, y: &[f64], data: &Dataset, ids: &[usize], v: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut out = vec![0.0; y.len()];
        let mut s = vec![0.0; c];
        let mut dz = vec![0.0; c];
        let inv = 1.0 / ids.len() as f64;
        for &i in ids {
            let row = &data.rows[i];
            self.logits(y, row, &mut s);
            Self::softmax(&mut s);
            self.logits(v, row, &mut dz);
            let sd: f64 = s.iter().zip(&dz).map(|(a, b)| a * b).sum();
            for (dzp, sp) in dz.iter_mut().zip(&s) {
                *dzp = sp * (*dzp - sd);
            }
            for (q, a) in row.iter() {
                let oq = &mut out[q * c..(q + 1) * c];
                for (o, h) in oq.iter_mut().zip(&dz) {
                    *o += inv * a * h;
                }
            }
        }
        out
    }

    fn check(&self, node: usize, x: &[f64], y: &[f64]) -> Result<()> {
        check_node(node, self.nodes.len())?;
        check_len("x", x, self.dim_x())?;
        check_len("y", y, self.dim_y())
    }

    /// Fraction of validation samples (all nodes) whose argmax logit is the label.
    pub fn accuracy(&self, y: &[f64]) -> f64 {
        let mut z = vec![0.0; self.classes];
        let mut correct = 0usize;
        let mut total = 0usize;
        for n in &self.nodes {
            for (row, &label) in n.val.rows.iter().zip(&n.val.labels) {
                self.logits(y, row, &mut z);
                let pred = z
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                correct += usize::from(pred == label);
                total += 1;
            }
        }
        correct as f64 / total as f64
    }
}

impl BilevelProblem for HyperLogReg {
    fn dim_x(&self) -> usize {
        self.dim
    }

    fn dim_y(&self) -> usize {
        self.dim * self.classes
    }

    fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn upper_sample_count(&self, node: usize) -> usize {
        self.nodes[node].val.len()
    }

    fn lower_sample_count(&self, node: usize) -> usize {
        self.nodes[node].train.len()
    }

    fn grad_x_f(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<Vec<f64>> {
        self.check(node, x, y)?;
        check_ids(node, ids, self.upper_sample_count(node))?;
        Ok(vec![0.0; self.dim])
    }

    fn grad_y_f(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<Vec<f64>> {
        self.check(node, x, y)?;
        check_ids(node, ids, self.upper_sample_count(node))?;
        Ok(self.ce_grad(y, &self.nodes[node].val, ids))
    }

    fn grad_y_g(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<Vec<f64>> {
        self.check(node, x, y)?;
        check_ids(node, ids, self.lower_sample_count(node))?;
        let mut g = self.ce_grad(y, &self.nodes[node].train, ids);
        let c = self.classes;
        let r = 2.0 * self.reg_scale();
        for (q, xq) in x.iter().enumerate() {
            let e = r * xq.exp();
            for p in 0..c {
                g[q * c + p] += e * y[q * c + p];
            }
        }
        Ok(g)
    }

    fn hvp_yy_g(
        &self,
        node: usize,
        x: &[f64],
        y: &[f64],
        ids: &[usize],
        v: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(node, x, y)?;
        check_len("v", v, self.dim_y())?;
        check_ids(node, ids, self.lower_sample_count(node))?;
        let mut out = self.ce_hvp(y, &self.nodes[node].train, ids, v);
        let c = self.classes;
        let r = 2.0 * self.reg_scale();
        for (q, xq) in x.iter().enumerate() {
            let e = r * xq.exp();
            for p in 0..c {
                out[q * c + p] += e * v[q * c + p];
            }
        }
        Ok(out)
    }

    fn jvp_xy_g(
        &self,
        node: usize,
        x: &[f64],
        y: &[f64],
        ids: &[usize],
        v: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(node, x, y)?;
        check_len("v", v, self.dim_y())?;
        check_ids(node, ids, self.lower_sample_count(node))?;
        let c = self.classes;
        let r = 2.0 * self.reg_scale();
        Ok(x.iter()
            .enumerate()
            .map(|(q, xq)| {
                let s: f64 = (0..c).map(|p| y[q * c + p] * v[q * c + p]).sum();
                r * xq.exp() * s
            })
            .collect())
    }

    fn upper_loss(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<f64> {
        self.check(node, x, y)?;
        check_ids(node, ids, self.upper_sample_count(node))?;
        Ok(self.ce_loss(y, &self.nodes[node].val, ids))
    }

    fn lower_loss(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<f64> {
        self.check(node, x, y)?;
        check_ids(node, ids, self.lower_sample_count(node))?;
        let c = self.classes;
        let mut reg = 0.0;
        for (q, xq) in x.iter().enumerate() {
            let s: f64 = (0..c).map(|p| y[q * c + p] * y[q * c + p]).sum();
            reg += xq.exp() * s;
        }
        Ok(self.ce_loss(y, &self.nodes[node].train, ids) + self.reg_scale() * reg)
    }

    fn full_upper_loss(&self, _x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for n in &self.nodes {
            let ids: Vec<usize> = (0..n.val.len()).collect();
            s += self.ce_loss(y, &n.val, &ids);
        }
        s / self.nodes.len() as f64
    }

    fn evaluate(&self, x: &[f64], y: &[f64]) -> Evaluation {
        Evaluation {
            upper_loss: self.full_upper_loss(x, y),
            accuracy: Some(self.accuracy(y)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_libsvm;

    fn toy() -> HyperLogReg {
        let text = "1 1:1 2:0.5\n-1 2:1 3:-1\n1 1:0.2 3:2\n-1 1:-1\n";
        let d = parse_libsvm(text.as_bytes(), None).unwrap();
        HyperLogReg::new(vec![NodeData {
            train: d.clone(),
            val: d,
        }])
        .unwrap()
    }

    #[test]
    fn zero_weights_give_ln2() {
        let p = toy();
        let y = vec![0.0; p.dim_y()];
        let x = vec![0.0; p.dim_x()];
        assert!((p.full_upper_loss(&x, &y) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_at_zero_has_half_structure() {
        let p = toy();
        let y = vec![0.0; p.dim_y()];
        let x = vec![0.0; p.dim_x()];
        // single sample 0: label class 0, features {0: 1, 1: 0.5}
        let g = p.grad_y_f(0, &x, &y, &[0]).unwrap();
        assert_eq!(g, vec![-0.5, 0.5, -0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn regularizer_hvp_at_origin() {
        let p = toy();
        let y = vec![0.0; p.dim_y()];
        let x = vec![0.0; p.dim_x()];
        let v: Vec<f64> = (0..p.dim_y()).map(|i| i as f64 + 1.0).collect();
        let h = p.hvp_yy_g(0, &x, &y, &[3], &v).unwrap();
        let ce = p.ce_hvp(&y, &p.nodes[0].train, &[3], &v);
        let scale = 2.0 / (p.classes() * p.feature_dim()) as f64;
        for i in 0..v.len() {
            assert!((h[i] - ce[i] - scale * v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn xy_product_formula() {
        let p = toy();
        let x = vec![0.1, -0.3, 0.7];
        let y: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
        let v: Vec<f64> = (0..6).map(|i| 1.0 - 0.3 * i as f64).collect();
        let j = p.jvp_xy_g(0, &x, &y, &[0, 1], &v).unwrap();
        let scale = 2.0 / 6.0;
        for q in 0..3 {
            let s = y[2 * q] * v[2 * q] + y[2 * q + 1] * v[2 * q + 1];
            assert!((j[q] - scale * x[q].exp() * s).abs() < 1e-15);
        }
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        // class of a sample is the sign of its single feature
        let text: String = (0..20)
            .map(|i| {
                let v = if i % 2 == 0 {
                    1.0 + i as f64
                } else {
                    -1.0 - i as f64
                };
                format!("{} 1:{}\n", if v > 0.0 { "+1" } else { "-1" }, v)
            })
            .collect();
        let d = parse_libsvm(text.as_bytes(), None).unwrap();
        let p = HyperLogReg::new(vec![NodeData {
            train: d.clone(),
            val: d,
        }])
        .unwrap();
        // class 0 is "+1": positive weight on class 0, negative on class 1
        let y = vec![50.0, -50.0];
        assert_eq!(p.accuracy(&y), 1.0);
        assert!(p.full_upper_loss(&[0.0], &y) < 1e-10);
    }
}
