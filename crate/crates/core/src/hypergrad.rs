//! Stochastic hypergradients via a randomly truncated Neumann series.
//!
//! For a draw `(xi, zeta_0, zeta_1..zeta_J~)` the estimator is
//!
//! ```text
//! grad_x f(x,y; xi) - (J / L) * Jxy(zeta_0) * prod_{j=1..J~} (I - Hyy(zeta_j) / L) * grad_y f(x,y; xi)
//! ```
//!
//! with the product applied to the vector one factor at a time in ascending
//! `j` and equal to the identity when `J~ = 0`. The truncation depth `J~` is
//! uniform on `{0, .., J-1}`, which makes
//! `E[(J/L) prod] = (1/L) sum_{j<J} (I - H/L)^j`, the order-`J` Neumann
//! approximation of `H^{-1}`. `J = 0` always draws `J~ = 0`, and the zero
//! prefactor reduces the estimator to `grad_x f`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::BilevelProblem;
use crate::vecops;

/// Neumann truncation depth `J`, the smoothness constant `L` of `grad_y g`
/// and optionally the strong-convexity constant `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypergradParams {
    pub depth: usize,
    pub l_gy: f64,
    pub mu: Option<f64>,
}

impl HypergradParams {
    pub fn new(depth: usize, l_gy: f64) -> Result<Self> {
        let p = Self {
            depth,
            l_gy,
            mu: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_mu(mut self, mu: f64) -> Result<Self> {
        self.mu = Some(mu);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l_gy > 0.0 && self.l_gy.is_finite()) {
            return Err(Error::Config(format!(
                "l_gy must be positive, got {}",
                self.l_gy
            )));
        }
        if let Some(mu) = self.mu {
            if !(mu > 0.0 && mu <= self.l_gy) {
                return Err(Error::Config(format!(
                    "need 0 < mu <= l_gy, got mu={mu} l_gy={}",
                    self.l_gy
                )));
            }
        }
        Ok(())
    }
}

/// Oracle-call bookkeeping for one node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    /// First-order oracle calls (one per mini-batch gradient).
    pub grad_evals: u64,
    /// Per-sample gradients behind `grad_evals`.
    pub grad_samples: u64,
    pub jvp_evals: u64,
    pub hvp_evals: u64,
    pub comm_rounds: u64,
}

impl std::ops::AddAssign for OpCounters {
    fn add_assign(&mut self, o: Self) {
        self.grad_evals += o.grad_evals;
        self.grad_samples += o.grad_samples;
        self.jvp_evals += o.jvp_evals;
        self.hvp_evals += o.hvp_evals;
        self.comm_rounds += o.comm_rounds;
    }
}

/// Draws `J~` uniformly from `{0, .., J-1}` (`0` when `J = 0`).
pub fn sample_truncation<R: Rng + ?Sized>(depth: usize, rng: &mut R) -> usize {
    if depth == 0 {
        0
    } else {
        rng.random_range(0..depth)
    }
}

/// `b` distinct ids from `0..n` in ascending order; the whole shard if `b >= n`.
pub fn sample_ids<R: Rng + ?Sized>(rng: &mut R, n: usize, b: usize) -> Vec<usize> {
    if b >= n {
        return (0..n).collect();
    }
    let mut ids = rand::seq::index::sample(rng, n, b).into_vec();
    ids.sort_unstable();
    ids
}

/// The sample ids behind one stochastic hypergradient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypergradSample {
    /// `xi`: upper-level batch for both `grad_x f` and `grad_y f`.
    pub upper_ids: Vec<usize>,
    /// `zeta_0`: lower-level batch for the mixed product.
    pub jacobian_ids: Vec<usize>,
    /// `zeta_1..zeta_J~`; its length is the truncation depth `J~`.
    pub hessian_ids: Vec<Vec<usize>>,
}

impl HypergradSample {
    pub fn truncation(&self) -> usize {
        self.hessian_ids.len()
    }

    /// Full-shard sample with a given truncation.
    pub fn full<P: BilevelProblem + ?Sized>(problem: &P, node: usize, truncation: usize) -> Self {
        let upper: Vec<usize> = (0..problem.upper_sample_count(node)).collect();
        let lower: Vec<usize> = (0..problem.lower_sample_count(node)).collect();
        Self {
            upper_ids: upper,
            jacobian_ids: lower.clone(),
            hessian_ids: vec![lower; truncation],
        }
    }
}

/// Draws `J~` first, then independent batches for `xi`, `zeta_0` and the
/// `J~` Hessian factors.
pub fn draw_hypergrad_sample<P, R>(
    problem: &P,
    node: usize,
    params: &HypergradParams,
    batch_size: usize,
    rng: &mut R,
) -> HypergradSample
where
    P: BilevelProblem + ?Sized,
    R: Rng + ?Sized,
{
    let truncation = sample_truncation(params.depth, rng);
    let nu = problem.upper_sample_count(node);
    let nl = problem.lower_sample_count(node);
    let upper_ids = sample_ids(rng, nu, batch_size);
    let jacobian_ids = sample_ids(rng, nl, batch_size);
    let hessian_ids = (0..truncation)
        .map(|_| sample_ids(rng, nl, batch_size))
        .collect();
    HypergradSample {
        upper_ids,
        jacobian_ids,
        hessian_ids,
    }
}

/// Evaluates the stochastic hypergradient on a fixed sample. Costs exactly
/// two first-order calls, one mixed product and `J~` Hessian products, which
/// are added to `counters`.
pub fn estimate_hypergrad<P: BilevelProblem + ?Sized>(
    problem: &P,
    node: usize,
    x: &[f64],
    y: &[f64],
    sample: &HypergradSample,
    params: &HypergradParams,
    counters: &mut OpCounters,
) -> Result<Vec<f64>> {
    params.validate()?;
    if sample.truncation() > params.depth {
        return Err(Error::Contract(format!(
            "truncation {} exceeds depth {}",
            sample.truncation(),
            params.depth
        )));
    }
    let l = params.l_gy;
    let mut out = problem.grad_x_f(node, x, y, &sample.upper_ids)?;
    let mut v = problem.grad_y_f(node, x, y, &sample.upper_ids)?;
    for ids in &sample.hessian_ids {
        let hv = problem.hvp_yy_g(node, x, y, ids, &v)?;
        vecops::axpy(-1.0 / l, &hv, &mut v);
    }
    let w = problem.jvp_xy_g(node, x, y, &sample.jacobian_ids, &v)?;
    vecops::axpy(-(params.depth as f64) / l, &w, &mut out);

    counters.grad_evals += 2;
    counters.grad_samples += 2 * sample.upper_ids.len() as u64;
    counters.jvp_evals += 1;
    counters.hvp_evals += sample.truncation() as u64;
    Ok(out)
}

/// Draws a sample from `rng` and evaluates it.
#[allow(clippy::too_many_arguments)]
pub fn estimate_hypergrad_sampled<P, R>(
    problem: &P,
    node: usize,
    x: &[f64],
    y: &[f64],
    params: &HypergradParams,
    batch_size: usize,
    rng: &mut R,
    counters: &mut OpCounters,
) -> Result<Vec<f64>>
where
    P: BilevelProblem + ?Sized,
    R: Rng + ?Sized,
{
    let sample = draw_hypergrad_sample(problem, node, params, batch_size, rng);
    estimate_hypergrad(problem, node, x, y, &sample, params, counters)
}

/// `(1/L) sum_{j=0}^{J-1} (I - H/L)^j v` by Horner accumulation
/// `s <- v + (I - H/L) s`, using `J - 1` applications of `hvp`.
pub fn exact_neumann_apply(
    hvp: impl Fn(&[f64]) -> Vec<f64>,
    v: &[f64],
    params: &HypergradParams,
) -> Vec<f64> {
    let l = params.l_gy;
    if params.depth == 0 {
        return vec![0.0; v.len()];
    }
    let mut s = v.to_vec();
    for _ in 1..params.depth {
        let hs = hvp(&s);
        let mut next = v.to_vec();
        for ((n, si), hi) in next.iter_mut().zip(&s).zip(&hs) {
            *n += si - hi / l;
        }
        s = next;
    }
    vecops::scale(1.0 / l, &mut s);
    s
}

/// Exact expectation of the estimator over `J~` on full shards of one node,
/// obtained by enumerating every truncation and averaging the products
/// `(J/L) prod_{j<=J~} (I - H/L)` applied to `grad_y f`.
pub fn expected_hypergrad<P: BilevelProblem + ?Sized>(
    problem: &P,
    node: usize,
    x: &[f64],
    y: &[f64],
    params: &HypergradParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    let upper: Vec<usize> = (0..problem.upper_sample_count(node)).collect();
    let lower: Vec<usize> = (0..problem.lower_sample_count(node)).collect();
    let mut out = problem.grad_x_f(node, x, y, &upper)?;
    if params.depth == 0 {
        return Ok(out);
    }
    let l = params.l_gy;
    let gy = problem.grad_y_f(node, x, y, &upper)?;
    // mean over J~ in {0..J-1} of the J~-fold product applied to grad_y f
    let mut power = gy;
    let mut mean = vec![0.0; power.len()];
    for t in 0..params.depth {
        if t > 0 {
            let hv = problem.hvp_yy_g(node, x, y, &lower, &power)?;
            vecops::axpy(-1.0 / l, &hv, &mut power);
        }
        vecops::axpy(1.0 / params.depth as f64, &power, &mut mean);
    }
    let w = problem.jvp_xy_g(node, x, y, &lower, &mean)?;
    vecops::axpy(-(params.depth as f64) / l, &w, &mut out);
    Ok(out)
}

/// Upper bound `(C_gxy C_fy / mu) (1 - mu/L)^J` on the truncation bias.
pub fn bias_bound(c_gxy: f64, c_fy: f64, mu: f64, l_gy: f64, depth: usize) -> f64 {
    c_gxy * c_fy / mu * (1.0 - mu / l_gy).powi(depth as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::QuadraticBilevel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_depth_always_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| sample_truncation(0, &mut rng) == 0));
    }

    #[test]
    fn depth_one_is_identity_term_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..1000).all(|_| sample_truncation(1, &mut rng) == 0));
    }

    #[test]
    fn truncation_frequencies_are_uniform() {
        let depth = 10;
        let draws = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![0usize; depth + 1];
        for _ in 0..draws {
            counts[sample_truncation(depth, &mut rng)] += 1;
        }
        assert_eq!(counts[depth], 0);
        let p = 1.0 / depth as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for &c in &counts[..depth] {
            let f = c as f64 / draws as f64;
            assert!((f - p).abs() <= 3.0 * se, "freq {f} vs {p} +- {}", 3.0 * se);
        }
    }

    #[test]
    fn zero_depth_returns_grad_x_f() {
        let p = QuadraticBilevel::scalar(2.0, 1.0, 0.0, 1.0, 0.1, 1).unwrap();
        let params = HypergradParams::new(0, 2.0).unwrap();
        let mut c = OpCounters::default();
        let s = HypergradSample::full(&p, 0, 0);
        let g = estimate_hypergrad(&p, 0, &[1.0], &[0.3], &s, &params, &mut c).unwrap();
        assert_eq!(g, vec![0.1]);
    }

    #[test]
    fn truncation_beyond_depth_is_contract_violation() {
        let p = QuadraticBilevel::scalar(2.0, 1.0, 0.0, 1.0, 0.1, 1).unwrap();
        let params = HypergradParams::new(2, 2.0).unwrap();
        let s = HypergradSample::full(&p, 0, 3);
        let r = estimate_hypergrad(
            &p,
            0,
            &[1.0],
            &[0.3],
            &s,
            &params,
            &mut OpCounters::default(),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn bad_params() {
        assert!(HypergradParams::new(3, 0.0).is_err());
        assert!(HypergradParams::new(3, 1.0).unwrap().with_mu(2.0).is_err());
    }

    #[test]
    fn cost_accounting() {
        let p = QuadraticBilevel::scalar(2.0, 1.0, 0.0, 1.0, 0.1, 1).unwrap();
        let params = HypergradParams::new(10, 4.0).unwrap();
        let mut c = OpCounters::default();
        let s = HypergradSample::full(&p, 0, 7);
        estimate_hypergrad(&p, 0, &[1.0], &[0.3], &s, &params, &mut c).unwrap();
        assert_eq!(
            c,
            OpCounters {
                grad_evals: 2,
                grad_samples: 2,
                jvp_evals: 1,
                hvp_evals: 7,
                comm_rounds: 0
            }
        );
    }

    #[test]
    fn neumann_ratio_zero() {
        let params = HypergradParams::new(5, 3.0).unwrap();
        let v = [1.0, -2.0];
        let out = exact_neumann_apply(|s| s.iter().map(|x| 3.0 * x).collect(), &v, &params);
        assert_eq!(out, vec![1.0 / 3.0, -2.0 / 3.0]);
        let empty = exact_neumann_apply(|s| s.to_vec(), &v, &HypergradParams::new(0, 3.0).unwrap());
        assert_eq!(empty, vec![0.0, 0.0]);
    }

    #[test]
    fn neumann_scalar_geometric_sum() {
        let (mu, l, j) = (0.5, 2.0, 7);
        let params = HypergradParams::new(j, l).unwrap();
        let out = exact_neumann_apply(|s| vec![mu * s[0]], &[3.0], &params);
        let expect = 3.0 / mu * (1.0 - (1.0 - mu / l).powi(j as i32));
        assert!((out[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn bias_bound_values() {
        assert_eq!(bias_bound(1.0, 1.0, 1.0, 1.0, 5), 0.0);
        assert_eq!(bias_bound(2.0, 3.0, 0.5, 1.0, 0), 12.0);
        assert!((bias_bound(1.0, 1.0, 0.5, 1.0, 10) - 2f64.powi(-9)).abs() < 1e-18);
    }
}
