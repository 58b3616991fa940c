//! Synthetic quadratic bilevel instance with closed-form solutions.
//!
//! Upper level: `f(x, y) = rho/2 |x|^2 + 1/2 |y - d|^2`.
//! Lower level on node `k`: `g_k(x, y) = 1/2 y'Ay - y'(Bx + c_k)`, with
//! `c_k = c + delta_k` and `sum_k delta_k = 0`, so the network problem has
//! `y*(x) = A^{-1}(Bx + c)` and `grad F(x) = rho x + B'A^{-1}(y*(x) - d)`.
//!
//! Stochasticity is a finite sum: each node owns `samples_per_node` samples,
//! and sample `i` perturbs every oracle by a fixed Gaussian draw scaled by
//! `noise_sigma` (gradients additively, the Hessian by a symmetric matrix,
//! the coupling by a dense matrix). Perturbations are centered per node, so
//! full-shard oracles are exact and replaying ids replays the noise.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_ids, check_len, check_node, BilevelProblem, Evaluation};
use crate::error::{Error, Result};

/// Parameters of a randomly generated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticConfig {
    pub dim_x: usize,
    pub dim_y: usize,
    pub nodes: usize,
    pub samples_per_node: usize,
    /// Smallest eigenvalue of `A`.
    pub mu: f64,
    /// Largest eigenvalue of `A`.
    pub l_max: f64,
    pub rho: f64,
    pub noise_sigma: f64,
    /// Scale of the per-node offsets `delta_k`.
    pub heterogeneity: f64,
    /// Spectral-norm target for the coupling `B` (0 keeps the raw Gaussian draw).
    pub coupling: f64,
    pub seed: u64,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        Self {
            dim_x: 5,
            dim_y: 5,
            nodes: 8,
            samples_per_node: 200,
            mu: 1.0,
            l_max: 4.0,
            rho: 0.1,
            noise_sigma: 0.0,
            heterogeneity: 0.5,
            coupling: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct SampleNoise {
    fx: DVector<f64>,
    fy: DVector<f64>,
    g: DVector<f64>,
    hess: DMatrix<f64>,
    coupling: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DVector<f64>,
    d_target: DVector<f64>,
    rho: f64,
    noise_sigma: f64,
    offsets: Vec<DVector<f64>>,
    noise: Vec<Vec<SampleNoise>>,
    samples_per_node: usize,
    a_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl QuadraticBilevel {
    /// Deterministic instance from explicit matrices; every node shares `c`.
    /// `samples_per_node` only sizes the id space since there is no noise.
    pub fn from_parts(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DVector<f64>,
        d_target: DVector<f64>,
        rho: f64,
        nodes: usize,
        samples_per_node: usize,
    ) -> Result<Self> {
        let dy = a.nrows();
        if a.ncols() != dy || b.nrows() != dy || c.len() != dy || d_target.len() != dy {
            return Err(Error::InvalidSize(
                "inconsistent quadratic dimensions".into(),
            ));
        }
        if nodes == 0 || samples_per_node == 0 {
            return Err(Error::InvalidSize(
                "need nodes >= 1 and samples >= 1".into(),
            ));
        }
        if rho <= 0.0 {
            return Err(Error::Config("rho must be positive".into()));
        }
        let a_chol = a.clone().cholesky().ok_or_else(|| {
            Error::Solver("lower-level Hessian A is not positive definite".into())
        })?;
        Ok(Self {
            offsets: vec![DVector::zeros(dy); nodes],
            noise: vec![Vec::new(); nodes],
            a,
            b,
            c,
            d_target,
            rho,
            noise_sigma: 0.0,
            samples_per_node,
            a_chol,
        })
    }

    /// Scalar instance `A = a, B = b, c, d, rho` on `nodes` identical nodes.
    pub fn scalar(a: f64, b: f64, c: f64, d: f64, rho: f64, nodes: usize) -> Result<Self> {
        Self::from_parts(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DVector::from_element(1, c),
            DVector::from_element(1, d),
            rho,
            nodes,
            1,
        )
    }

    /// Random instance: `A = Q diag(mu..l_max) Q'` with a random orthogonal `Q`.
    pub fn generate(cfg: &QuadraticConfig) -> Result<Self> {
        if cfg.dim_x == 0 || cfg.dim_y == 0 {
            return Err(Error::InvalidSize("dimensions must be positive".into()));
        }
        if !(cfg.mu > 0.0 && cfg.mu <= cfg.l_max) {
            return Err(Error::Config(format!(
                "need 0 < mu <= l_max, got mu={} l_max={}",
                cfg.mu, cfg.l_max
            )));
        }
        if cfg.noise_sigma < 0.0 || cfg.heterogeneity < 0.0 {
            return Err(Error::Config(
                "noise and heterogeneity must be non-negative".into(),
            ));
        }
        let (dx, dy) = (cfg.dim_x, cfg.dim_y);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gauss = |r: usize, c: usize| -> DMatrix<f64> {
            DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
        };

        let q = gauss(dy, dy).qr().q();
        let eig = DVector::from_fn(dy, |i, _| {
            if dy == 1 {
                cfg.mu
            } else {
                cfg.mu + (cfg.l_max - cfg.mu) * i as f64 / (dy - 1) as f64
            }
        });
        let mut a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        a = (&a + a.transpose()) * 0.5;

        let mut b = gauss(dy, dx);
        if cfg.coupling > 0.0 {
            let s = b.clone().svd(false, false).singular_values.max();
            if s > 0.0 {
                b *= cfg.coupling / s;
            }
        }
        let c = gauss(dy, 1).column(0).into_owned();
        let d_target = gauss(dy, 1).column(0).into_owned();

        let mut offsets: Vec<DVector<f64>> = (0..cfg.nodes)
            .map(|_| gauss(dy, 1).column(0).into_owned() * cfg.heterogeneity)
            .collect();
        center(&mut offsets);

        let mut base =
            Self::from_parts(a, b, c, d_target, cfg.rho, cfg.nodes, cfg.samples_per_node)?;
        base.offsets = offsets;
        base.noise_sigma = cfg.noise_sigma;
        if cfg.noise_sigma > 0.0 {
            let n = cfg.samples_per_node;
            base.noise = (0..cfg.nodes)
                .map(|_| {
                    let mut fx: Vec<DVector<f64>> = (0..n)
                        .map(|_| gauss(dx, 1).column(0).into_owned())
                        .collect();
                    let mut fy: Vec<DVector<f64>> = (0..n)
                        .map(|_| gauss(dy, 1).column(0).into_owned())
                        .collect();
                    let mut g: Vec<DVector<f64>> = (0..n)
                        .map(|_| gauss(dy, 1).column(0).into_owned())
                        .collect();
                    let mut hess: Vec<DMatrix<f64>> = (0..n)
                        .map(|_| {
                            let m = gauss(dy, dy);
                            (&m + m.transpose()) * (0.5 / (dy as f64).sqrt())
                        })
                        .collect();
                    let mut coupling: Vec<DMatrix<f64>> = (0..n)
                        .map(|_| gauss(dy, dx) * (1.0 / (dx as f64).sqrt()))
                        .collect();
                    center(&mut fx);
                    center(&mut fy);
                    center(&mut g);
                    center_mat(&mut hess);
                    center_mat(&mut coupling);
                    (0..n)
                        .map(|i| SampleNoise {
                            fx: fx[i].clone(),
                            fy: fy[i].clone(),
                            g: g[i].clone(),
                            hess: hess[i].clone(),
                            coupling: coupling[i].clone(),
                        })
                        .collect()
                })
                .collect();
        }
        Ok(base)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn d_target(&self) -> &DVector<f64> {
        &self.d_target
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// `A^{-1}(Bx + c)` by Cholesky solve.
    pub fn y_star(&self, x: &[f64]) -> Vec<f64> {
        let rhs = &self.b * DVector::from_column_slice(x) + &self.c;
        self.a_chol.solve(&rhs).as_slice().to_vec()
    }

    /// `rho x + B'A^{-1}(y*(x) - d)`.
    pub fn hypergrad(&self, x: &[f64]) -> Vec<f64> {
        let ys = DVector::from_vec(self.y_star(x));
        let w = self.a_chol.solve(&(ys - &self.d_target));
        let g = DVector::from_column_slice(x) * self.rho + self.b.transpose() * w;
        g.as_slice().to_vec()
    }

    /// `F(x) = f(x, y*(x))`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let ys = self.y_star(x);
        self.upper_value(x, &ys)
    }

    /// Stationary point of `F`: solves `(rho I + M'M) x = M'(d - A^{-1}c)`
    /// with `M = A^{-1}B`.
    pub fn minimizer(&self) -> Vec<f64> {
        let m = self.a_chol.solve(&self.b);
        let dx = self.b.ncols();
        let lhs = DMatrix::identity(dx, dx) * self.rho + m.transpose() * &m;
        let rhs = m.transpose() * (&self.d_target - self.a_chol.solve(&self.c));
        lhs.cholesky()
            .expect("rho > 0 makes the normal matrix positive definite")
            .solve(&rhs)
            .as_slice()
            .to_vec()
    }

    fn upper_value(&self, x: &[f64], y: &[f64]) -> f64 {
        let xs: f64 = x.iter().map(|v| v * v).sum();
        let yd: f64 = y
            .iter()
            .zip(self.d_target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        0.5 * self.rho * xs + 0.5 * yd
    }

    fn check(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<()> {
        check_node(node, self.offsets.len())?;
        check_len("x", x, self.dim_x())?;
        check_len("y", y, self.dim_y())?;
        check_ids(node, ids, self.samples_per_node)
    }

    /// Mean of a per-sample perturbation over `ids`, or `None` without noise.
    fn mean_noise_vec(
        &self,
        node: usize,
        ids: &[usize],
        pick: impl Fn(&SampleNoise) -> &DVector<f64>,
    ) -> Option<DVector<f64>> {
        if self.noise_sigma == 0.0 {
            return None;
        }
        let shard = &self.noise[node];
        let mut acc = DVector::zeros(pick(&shard[ids[0]]).len());
        for &i in ids {
            acc += pick(&shard[i]);
        }
        Some(acc * (self.noise_sigma / ids.len() as f64))
    }

    fn mean_noise_mat(
        &self,
        node: usize,
        ids: &[usize],
        pick: impl Fn(&SampleNoise) -> &DMatrix<f64>,
    ) -> Option<DMatrix<f64>> {
        if self.noise_sigma == 0.0 {
            return None;
        }
        let shard = &self.noise[node];
        let first = pick(&shard[ids[0]]);
        let mut acc = DMatrix::zeros(first.nrows(), first.ncols());
        for &i in ids {
            acc += pick(&shard[i]);
        }
        Some(acc * (self.noise_sigma / ids.len() as f64))
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn dim_x(&self) -> usize {
        self.b.ncols()
    }

    fn dim_y(&self) -> usize {
        self.a.nrows()
    }

    fn node_count(&self) -> usize {
        self.offsets.len()
    }

    fn upper_sample_count(&self, _node: usize) -> usize {
        self.samples_per_node
    }

    fn lower_sample_count(&self, _node: usize) -> usize {
        self.samples_per_node
    }

    fn grad_x_f(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<Vec<f64>> {
        self.check(node, x, y, ids)?;
        let mut g = DVector::from_column_slice(x) * self.rho;
        if let Some(n) = self.mean_noise_vec(node, ids, |s| &s.fx) {
            g += n;
        }
        Ok(g.as_slice().to_vec())
    }

    fn grad_y_f(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<Vec<f64>> {
        self.check(node, x, y, ids)?;
        let mut g = DVector::from_column_slice(y) - &self.d_target;
        if let Some(n) = self.mean_noise_vec(node, ids, |s| &s.fy) {
            g += n;
        }
        Ok(g.as_slice().to_vec())
    }

    fn grad_y_g(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<Vec<f64>> {
        self.check(node, x, y, ids)?;
        let xv = DVector::from_column_slice(x);
        let yv = DVector::from_column_slice(y);
        let mut g = &self.a * &yv - &self.b * &xv - &self.c - &self.offsets[node];
        if self.noise_sigma > 0.0 {
            let h = self
                .mean_noise_mat(node, ids, |s| &s.hess)
                .expect("noise on");
            let r = self
                .mean_noise_mat(node, ids, |s| &s.coupling)
                .expect("noise on");
            let e = self.mean_noise_vec(node, ids, |s| &s.g).expect("noise on");
            g += h * &yv - r * &xv - e;
        }
        Ok(g.as_slice().to_vec())
    }

    fn hvp_yy_g(
        &self,
        node: usize,
        x: &[f64],
        y: &[f64],
        ids: &[usize],
        v: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(node, x, y, ids)?;
        check_len("v", v, self.dim_y())?;
        let vv = DVector::from_column_slice(v);
        let mut out = &self.a * &vv;
        if let Some(h) = self.mean_noise_mat(node, ids, |s| &s.hess) {
            out += h * &vv;
        }
        Ok(out.as_slice().to_vec())
    }

    fn jvp_xy_g(
        &self,
        node: usize,
        x: &[f64],
        y: &[f64],
        ids: &[usize],
        v: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(node, x, y, ids)?;
        check_len("v", v, self.dim_y())?;
        let vv = DVector::from_column_slice(v);
        let mut out = -(self.b.transpose() * &vv);
        if let Some(r) = self.mean_noise_mat(node, ids, |s| &s.coupling) {
            out -= r.transpose() * &vv;
        }
        Ok(out.as_slice().to_vec())
    }

    fn upper_loss(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<f64> {
        self.check(node, x, y, ids)?;
        let mut val = self.upper_value(x, y);
        if let Some(n) = self.mean_noise_vec(node, ids, |s| &s.fx) {
            val += n.dot(&DVector::from_column_slice(x));
        }
        if let Some(n) = self.mean_noise_vec(node, ids, |s| &s.fy) {
            val += n.dot(&DVector::from_column_slice(y));
        }
        Ok(val)
    }

    fn lower_loss(&self, node: usize, x: &[f64], y: &[f64], ids: &[usize]) -> Result<f64> {
        self.check(node, x, y, ids)?;
        let xv = DVector::from_column_slice(x);
        let yv = DVector::from_column_slice(y);
        let mut a = self.a.clone();
        let mut lin = &self.b * &xv + &self.c + &self.offsets[node];
        if self.noise_sigma > 0.0 {
            a += self
                .mean_noise_mat(node, ids, |s| &s.hess)
                .expect("noise on");
            lin += self
                .mean_noise_mat(node, ids, |s| &s.coupling)
                .expect("noise on")
                * &xv;
            lin += self.mean_noise_vec(node, ids, |s| &s.g).expect("noise on");
        }
        Ok(0.5 * yv.dot(&(a * &yv)) - yv.dot(&lin))
    }

    fn full_upper_loss(&self, x: &[f64], y: &[f64]) -> f64 {
        self.upper_value(x, y)
    }

    fn evaluate(&self, x: &[f64], y: &[f64]) -> Evaluation {
        Evaluation {
            upper_loss: self.upper_value(x, y),
            accuracy: None,
        }
    }

    fn exact_inner_solution(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.y_star(x))
    }

    fn exact_hypergrad(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.hypergrad(x))
    }
}

fn center(vs: &mut [DVector<f64>]) {
    if vs.is_empty() {
        return;
    }
    let mut mean = DVector::zeros(vs[0].len());
    for v in vs.iter() {
        mean += v;
    }
    mean /= vs.len() as f64;
    for v in vs.iter_mut() {
        *v -= &mean;
    }
}

fn center_mat(ms: &mut [DMatrix<f64>]) {
    if ms.is_empty() {
        return;
    }
    let mut mean = DMatrix::zeros(ms[0].nrows(), ms[0].ncols());
    for m in ms.iter() {
        mean += m;
    }
    mean /= ms.len() as f64;
    for m in ms.iter_mut() {
        *m -= &mean;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::full_ids;

    #[test]
    fn scalar_y_star() {
        let p = QuadraticBilevel::scalar(2.0, 1.0, 0.0, 1.0, 0.1, 1).unwrap();
        assert!((p.y_star(&[1.0])[0] - 0.5).abs() < 1e-15);
        assert_eq!(p.y_star(&[0.0])[0], 0.0);
    }

    #[test]
    fn scalar_hypergrad_and_minimizer() {
        let p = QuadraticBilevel::scalar(2.0, 1.0, 0.0, 1.0, 0.1, 1).unwrap();
        // 0.1 * 1 + 0.5 * (0.5 - 1)
        assert!((p.hypergrad(&[1.0])[0] + 0.15).abs() < 1e-14);
        let xs = p.minimizer();
        assert!((xs[0] - 10.0 / 7.0).abs() < 1e-12);
        assert!(p.hypergrad(&xs)[0].abs() < 1e-12);
    }

    #[test]
    fn singular_a_is_solver_error() {
        let r = QuadraticBilevel::scalar(0.0, 1.0, 0.0, 1.0, 0.1, 1);
        assert!(matches!(r, Err(Error::Solver(_))));
    }

    #[test]
    fn noiseless_oracles_are_exact() {
        let cfg = QuadraticConfig {
            heterogeneity: 0.0,
            ..Default::default()
        };
        let p = QuadraticBilevel::generate(&cfg).unwrap();
        let x = vec![0.3, -0.2, 0.1, 0.5, -1.0];
        let y = vec![1.0, 0.0, -0.5, 0.25, 2.0];
        let g = p.grad_y_g(3, &x, &y, &[7, 9]).unwrap();
        let expect =
            p.a() * DVector::from_vec(y.clone()) - p.b() * DVector::from_vec(x.clone()) - p.c();
        for (a, b) in g.iter().zip(expect.iter()) {
            assert_eq!(a, b);
        }
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let j = p.jvp_xy_g(0, &x, &y, &[0], &v).unwrap();
        let expect = -(p.b().transpose() * DVector::from_vec(v));
        assert_eq!(j, expect.as_slice());
    }

    #[test]
    fn noisy_full_batch_is_exact_up_to_rounding() {
        let cfg = QuadraticConfig {
            noise_sigma: 0.5,
            samples_per_node: 20,
            ..Default::default()
        };
        let p = QuadraticBilevel::generate(&cfg).unwrap();
        let x = vec![0.1; 5];
        let y = vec![-0.2; 5];
        let full = full_ids(20);
        let noisy = p.grad_y_f(2, &x, &y, &[3]).unwrap();
        let exact = p.grad_y_f(2, &x, &y, &full).unwrap();
        let clean: Vec<f64> = y
            .iter()
            .zip(p.d_target().iter())
            .map(|(a, b)| a - b)
            .collect();
        assert!(crate::vecops::max_abs_diff(&exact, &clean) < 1e-12);
        assert!(crate::vecops::max_abs_diff(&noisy, &clean) > 1e-6);
    }

    #[test]
    fn offsets_average_out() {
        let p = QuadraticBilevel::generate(&QuadraticConfig::default()).unwrap();
        let x = vec![0.2; 5];
        let y = p.y_star(&x);
        let g = p.full_grad_y_g(&x, &y);
        assert!(crate::vecops::norm(&g) < 1e-12);
    }

    #[test]
    fn bad_batches() {
        let p = QuadraticBilevel::scalar(2.0, 1.0, 0.0, 1.0, 0.1, 2).unwrap();
        assert!(matches!(
            p.grad_y_g(0, &[0.0], &[0.0], &[]),
            Err(Error::InvalidBatch(_))
        ));
        assert!(matches!(
            p.grad_y_g(0, &[0.0], &[0.0], &[1]),
            Err(Error::ShardViolation { .. })
        ));
        assert!(matches!(
            p.hvp_yy_g(0, &[0.0], &[0.0], &[0], &[1.0, 2.0]),
            Err(Error::Shape { .. })
        ));
    }
}
