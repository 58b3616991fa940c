//! Decentralized bilevel optimizers over a simulated synchronous network.
//!
//! Node `k` holds column `k` of every state matrix. One iteration runs the
//! per-node oracle work (in parallel, reading only the previous snapshot) and
//! then a communication barrier in which tracked directions and parameters
//! are mixed with `W`.
//!
//! * MDBO: momentum estimators `U, V` with coefficients `alpha * eta`,
//!   gradient tracking `Z <- Z W + U - U_prev`, and the update
//!   `X <- X - eta X (I - W) - beta eta Z`.
//! * VRDBO: same communication, STORM estimators with coefficients
//!   `alpha * eta^2` whose correction term replays the current sample at the
//!   previous iterate.
//! * DSBO: plain gossip `X <- X W - beta eta Delta` on raw stochastic estimates.
//! * GDSBO: plain gossip on momentum estimators.
//!
//! Randomness comes from one stream per `(seed, node, iteration)`, so a run is
//! bitwise reproducible for any worker-thread count.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrad::{
    draw_hypergrad_sample, estimate_hypergrad, sample_ids, HypergradParams, HypergradSample,
    OpCounters,
};
use crate::problems::BilevelProblem;
use crate::topology::MixingMatrix;
use crate::vecops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Mdbo,
    Vrdbo,
    Dsbo,
    Gdsbo,
}

impl Algorithm {
    fn tracks(self) -> bool {
        matches!(self, Self::Mdbo | Self::Vrdbo)
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdbo" => Ok(Self::Mdbo),
            "vrdbo" => Ok(Self::Vrdbo),
            "dsbo" => Ok(Self::Dsbo),
            "gdsbo" => Ok(Self::Gdsbo),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mdbo => "mdbo",
            Self::Vrdbo => "vrdbo",
            Self::Dsbo => "dsbo",
            Self::Gdsbo => "gdsbo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub algo: Algorithm,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub batch_size: usize,
    /// Mini-batch for the initial VRDBO estimators.
    pub init_batch: usize,
    pub hypergrad: HypergradParams,
}

impl AlgoConfig {
    /// MDBO with the hyperparameters of the logistic-regression study.
    pub fn mdbo_default(batch_size: usize, l_gy: f64) -> Self {
        Self {
            algo: Algorithm::Mdbo,
            eta: 0.1,
            beta1: 1.0,
            beta2: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            batch_size,
            init_batch: batch_size,
            hypergrad: HypergradParams {
                depth: 10,
                l_gy,
                mu: None,
            },
        }
    }

    /// Hyperparameters of the logistic-regression study for `algo`.
    pub fn study_default(algo: Algorithm, batch_size: usize, l_gy: f64) -> Self {
        let base = Self::mdbo_default(batch_size, l_gy);
        match algo {
            Algorithm::Vrdbo => Self {
                algo,
                eta: 0.33,
                alpha1: 5.0,
                alpha2: 5.0,
                ..base
            },
            _ => Self { algo, ..base },
        }
    }

    /// Coefficient multiplying the fresh estimate in the `U` recursion.
    pub fn upper_coeff(&self) -> f64 {
        match self.algo {
            Algorithm::Vrdbo => self.alpha1 * self.eta * self.eta,
            _ => self.alpha1 * self.eta,
        }
    }

    pub fn lower_coeff(&self) -> f64 {
        match self.algo {
            Algorithm::Vrdbo => self.alpha2 * self.eta * self.eta,
            _ => self.alpha2 * self.eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hypergrad.validate()?;
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!(
                "eta must lie in (0, 1], got {}",
                self.eta
            )));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.init_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if matches!(
            self.algo,
            Algorithm::Mdbo | Algorithm::Vrdbo | Algorithm::Gdsbo
        ) {
            let (a, b) = (self.upper_coeff(), self.lower_coeff());
            if a > 1.0 || b > 1.0 {
                let rule = if self.algo == Algorithm::Vrdbo {
                    "alpha * eta^2 <= 1"
                } else {
                    "alpha * eta <= 1"
                };
                return Err(Error::Config(format!(
                    "{} needs {rule}, got {a} and {b}",
                    self.algo
                )));
            }
        }
        Ok(())
    }
}

/// Seed of the random stream owned by `node` at iteration `t`.
pub fn stream_seed(seed: u64, node: usize, t: usize) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ (node as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    splitmix64(h ^ (t as u64).wrapping_mul(0x9FB2_1C65_1E98_DF25))
}

pub fn stream_rng(seed: u64, node: usize, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, node, t))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The random draw behind one node's estimators in one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDraw {
    pub hypergrad: HypergradSample,
    pub lower_ids: Vec<usize>,
}

/// Draws the hypergradient sample and then the lower-level batch from the
/// node's stream for iteration `t`.
pub fn draw_node<P: BilevelProblem + ?Sized>(
    problem: &P,
    node: usize,
    params: &HypergradParams,
    batch_size: usize,
    seed: u64,
    t: usize,
) -> NodeDraw {
    let mut rng = stream_rng(seed, node, t);
    let hypergrad = draw_hypergrad_sample(problem, node, params, batch_size, &mut rng);
    let lower_ids = sample_ids(&mut rng, problem.lower_sample_count(node), batch_size);
    NodeDraw {
        hypergrad,
        lower_ids,
    }
}

/// Per-node state of the whole network; column `k` of each matrix is node `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmState {
    /// Completed iterations.
    pub t: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub zf: Vec<Vec<f64>>,
    pub zg: Vec<Vec<f64>>,
    /// Parameters before the last update, replayed by VRDBO.
    pub prev_x: Option<Vec<Vec<f64>>>,
    pub prev_y: Option<Vec<Vec<f64>>>,
    pub counters: Vec<OpCounters>,
    /// Sum over iterations of the drawn truncation depth, per node.
    pub truncation_sum: Vec<u64>,
    pub seed: u64,
}

impl SwarmState {
    pub fn nodes(&self) -> usize {
        self.x.len()
    }
}

struct LocalEstimates {
    delta_f: Vec<f64>,
    delta_g: Vec<f64>,
    prev_f: Option<Vec<f64>>,
    prev_g: Option<Vec<f64>>,
    counters: OpCounters,
    truncation: usize,
}

fn local_estimates<P: BilevelProblem + ?Sized>(
    problem: &P,
    node: usize,
    state: &SwarmState,
    cfg: &AlgoConfig,
    batch: usize,
    replay: bool,
) -> Result<LocalEstimates> {
    let draw = draw_node(problem, node, &cfg.hypergrad, batch, state.seed, state.t);
    let mut counters = OpCounters::default();
    let (x, y) = (&state.x[node], &state.y[node]);
    let delta_f = estimate_hypergrad(
        problem,
        node,
        x,
        y,
        &draw.hypergrad,
        &cfg.hypergrad,
        &mut counters,
    )?;
    let delta_g = problem.grad_y_g(node, x, y, &draw.lower_ids)?;
    counters.grad_evals += 1;
    counters.grad_samples += draw.lower_ids.len() as u64;

    let (prev_f, prev_g) = if replay {
        let (Some(px), Some(py)) = (&state.prev_x, &state.prev_y) else {
            return Err(Error::State("VRDBO step needs the previous iterate".into()));
        };
        let (px, py) = (&px[node], &py[node]);
        let pf = estimate_hypergrad(
            problem,
            node,
            px,
            py,
            &draw.hypergrad,
            &cfg.hypergrad,
            &mut counters,
        )?;
        let pg = problem.grad_y_g(node, px, py, &draw.lower_ids)?;
        counters.grad_evals += 1;
        counters.grad_samples += draw.lower_ids.len() as u64;
        (Some(pf), Some(pg))
    } else {
        (None, None)
    };
    Ok(LocalEstimates {
        delta_f,
        delta_g,
        prev_f,
        prev_g,
        counters,
        truncation: draw.hypergrad.truncation(),
    })
}

fn compute_locals<P: BilevelProblem + ?Sized>(
    problem: &P,
    state: &SwarmState,
    cfg: &AlgoConfig,
    batch: usize,
    replay: bool,
) -> Result<Vec<LocalEstimates>> {
    (0..state.nodes())
        .into_par_iter()
        .map(|k| local_estimates(problem, k, state, cfg, batch, replay))
        .collect()
}

fn absorb(state: &mut SwarmState, locals: &[LocalEstimates]) {
    for (k, l) in locals.iter().enumerate() {
        state.counters[k] += l.counters;
        state.truncation_sum[k] += l.truncation as u64;
    }
}

/// Iteration-0 estimators at identical starting points: `U = Z^F = Delta^F`,
/// `V = Z^g = Delta^g`. VRDBO uses the `init_batch` mini-batch.
pub fn init_state<P: BilevelProblem + ?Sized>(
    problem: &P,
    w: &MixingMatrix,
    cfg: &AlgoConfig,
    x0: &[f64],
    y0: &[f64],
    seed: u64,
) -> Result<SwarmState> {
    cfg.validate()?;
    let k = problem.node_count();
    if w.size() != k {
        return Err(Error::InvalidSize(format!(
            "mixing matrix is {}x{} but the problem has {k} nodes",
            w.size(),
            w.size()
        )));
    }
    if x0.len() != problem.dim_x() || y0.len() != problem.dim_y() {
        return Err(Error::Shape {
            what: "initial point",
            expected: problem.dim_x() + problem.dim_y(),
            got: x0.len() + y0.len(),
        });
    }
    let mut state = SwarmState {
        t: 0,
        x: vec![x0.to_vec(); k],
        y: vec![y0.to_vec(); k],
        u: Vec::new(),
        v: Vec::new(),
        zf: Vec::new(),
        zg: Vec::new(),
        prev_x: None,
        prev_y: None,
        counters: vec![OpCounters::default(); k],
        truncation_sum: vec![0; k],
        seed,
    };
    let batch = if cfg.algo == Algorithm::Vrdbo {
        cfg.init_batch
    } else {
        cfg.batch_size
    };
    let locals = compute_locals(problem, &state, cfg, batch, false)?;
    absorb(&mut state, &locals);
    state.u = locals.iter().map(|l| l.delta_f.clone()).collect();
    state.v = locals.iter().map(|l| l.delta_g.clone()).collect();
    state.zf = state.u.clone();
    state.zg = state.v.clone();
    check_finite(&state, 0)?;
    Ok(state)
}

/// Advances one iteration of the configured algorithm.
pub fn step<P: BilevelProblem + ?Sized>(
    state: &mut SwarmState,
    problem: &P,
    w: &MixingMatrix,
    cfg: &AlgoConfig,
) -> Result<()> {
    if state.t > 0 {
        update_estimators(state, problem, w, cfg)?;
    }
    update_parameters(state, w, cfg);
    state.t += 1;
    check_finite(state, state.t)
}

/// MDBO iteration; `state` must come from [`init_state`] with an MDBO config.
pub fn mdbo_step<P: BilevelProblem + ?Sized>(
    state: &mut SwarmState,
    problem: &P,
    w: &MixingMatrix,
    cfg: &AlgoConfig,
) -> Result<()> {
    expect_algo(cfg, Algorithm::Mdbo)?;
    step(state, problem, w, cfg)
}

pub fn vrdbo_step<P: BilevelProblem + ?Sized>(
    state: &mut SwarmState,
    problem: &P,
    w: &MixingMatrix,
    cfg: &AlgoConfig,
) -> Result<()> {
    expect_algo(cfg, Algorithm::Vrdbo)?;
    step(state, problem, w, cfg)
}

pub fn dsbo_step<P: BilevelProblem + ?Sized>(
    state: &mut SwarmState,
    problem: &P,
    w: &MixingMatrix,
    cfg: &AlgoConfig,
) -> Result<()> {
    expect_algo(cfg, Algorithm::Dsbo)?;
    step(state, problem, w, cfg)
}

pub fn gdsbo_step<P: BilevelProblem + ?Sized>(
    state: &mut SwarmState,
    problem: &P,
    w: &MixingMatrix,
    cfg: &AlgoConfig,
) -> Result<()> {
    expect_algo(cfg, Algorithm::Gdsbo)?;
    step(state, problem, w, cfg)
}

fn expect_algo(cfg: &AlgoConfig, algo: Algorithm) -> Result<()> {
    if cfg.algo != algo {
        return Err(Error::Config(format!(
            "{algo} step called with a {} config",
            cfg.algo
        )));
    }
    Ok(())
}

fn update_estimators<P: BilevelProblem + ?Sized>(
    state: &mut SwarmState,
    problem: &P,
    w: &MixingMatrix,
    cfg: &AlgoConfig,
) -> Result<()> {
    let replay = cfg.algo == Algorithm::Vrdbo;
    let locals = compute_locals(problem, state, cfg, cfg.batch_size, replay)?;
    absorb(state, &locals);

    let (a1, a2) = (cfg.upper_coeff(), cfg.lower_coeff());
    let new_u: Vec<Vec<f64>>;
    let new_v: Vec<Vec<f64>>;
    match cfg.algo {
        Algorithm::Mdbo | Algorithm::Gdsbo => {
            new_u = momentum(&state.u, locals.iter().map(|l| &l.delta_f), a1);
            new_v = momentum(&state.v, locals.iter().map(|l| &l.delta_g), a2);
        }
        Algorithm::Vrdbo => {
            new_u = storm(
                &state.u,
                locals
                    .iter()
                    .map(|l| (&l.delta_f, l.prev_f.as_ref().expect("replayed"))),
                a1,
            );
            new_v = storm(
                &state.v,
                locals
                    .iter()
                    .map(|l| (&l.delta_g, l.prev_g.as_ref().expect("replayed"))),
                a2,
            );
        }
        Algorithm::Dsbo => {
            new_u = locals.iter().map(|l| l.delta_f.clone()).collect();
            new_v = locals.iter().map(|l| l.delta_g.clone()).collect();
        }
    }

    if cfg.algo.tracks() {
        state.zf = track(w, &state.zf, &new_u, &state.u);
        state.zg = track(w, &state.zg, &new_v, &state.v);
    } else {
        state.zf = new_u.clone();
        state.zg = new_v.clone();
    }
    state.u = new_u;
    state.v = new_v;
    Ok(())
}

fn momentum<'a>(
    prev: &[Vec<f64>],
    fresh: impl Iterator<Item = &'a Vec<f64>>,
    coeff: f64,
) -> Vec<Vec<f64>> {
    prev.iter()
        .zip(fresh)
        .map(|(p, d)| {
            p.iter()
                .zip(d)
                .map(|(pi, di)| (1.0 - coeff) * pi + coeff * di)
                .collect()
        })
        .collect()
}

fn storm<'a>(
    prev: &[Vec<f64>],
    fresh: impl Iterator<Item = (&'a Vec<f64>, &'a Vec<f64>)>,
    coeff: f64,
) -> Vec<Vec<f64>> {
    prev.iter()
        .zip(fresh)
        .map(|(p, (d, dp))| {
            p.iter()
                .zip(d)
                .zip(dp)
                .map(|((pi, di), dpi)| (1.0 - coeff) * (pi + di - dpi) + coeff * di)
                .collect()
        })
        .collect()
}

/// `Z W + U_new - U_old`, column by column.
fn track(
    w: &MixingMatrix,
    z: &[Vec<f64>],
    u_new: &[Vec<f64>],
    u_old: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut mixed = w.mix(z);
    for ((m, un), uo) in mixed.iter_mut().zip(u_new).zip(u_old) {
        for ((mi, a), b) in m.iter_mut().zip(un).zip(uo) {
            *mi += a - b;
        }
    }
    mixed
}

fn update_parameters(state: &mut SwarmState, w: &MixingMatrix, cfg: &AlgoConfig) {
    let xw = w.mix(&state.x);
    let yw = w.mix(&state.y);
    let (sx, sy) = (cfg.beta1 * cfg.eta, cfg.beta2 * cfg.eta);
    let (new_x, new_y) = if cfg.algo.tracks() {
        (
            tracked_update(&state.x, &xw, &state.zf, cfg.eta, sx),
            tracked_update(&state.y, &yw, &state.zg, cfg.eta, sy),
        )
    } else {
        (
            gossip_update(&xw, &state.zf, sx),
            gossip_update(&yw, &state.zg, sy),
        )
    };
    state.prev_x = Some(std::mem::replace(&mut state.x, new_x));
    state.prev_y = Some(std::mem::replace(&mut state.y, new_y));
    for c in state.counters.iter_mut() {
        c.comm_rounds += 1;
    }
}

/// `X - eta (X - X W) - step Z`
fn tracked_update(
    x: &[Vec<f64>],
    xw: &[Vec<f64>],
    z: &[Vec<f64>],
    eta: f64,
    step: f64,
) -> Vec<Vec<f64>> {
    x.iter()
        .zip(xw)
        .zip(z)
        .map(|((xk, xwk), zk)| {
            xk.iter()
                .zip(xwk)
                .zip(zk)
                .map(|((a, b), c)| a - eta * (a - b) - step * c)
                .collect()
        })
        .collect()
}

/// `X W - step D`
fn gossip_update(xw: &[Vec<f64>], d: &[Vec<f64>], step: f64) -> Vec<Vec<f64>> {
    xw.iter()
        .zip(d)
        .map(|(a, b)| a.iter().zip(b).map(|(ai, bi)| ai - step * bi).collect())
        .collect()
}

fn check_finite(state: &SwarmState, iteration: usize) -> Result<()> {
    let groups: [(&'static str, &Vec<Vec<f64>>); 6] = [
        ("x", &state.x),
        ("y", &state.y),
        ("u", &state.u),
        ("v", &state.v),
        ("zf", &state.zf),
        ("zg", &state.zg),
    ];
    for (what, cols) in groups {
        if !cols.iter().all(|c| vecops::all_finite(c)) {
            return Err(Error::Divergence { iteration, what });
        }
    }
    Ok(())
}

/// Network averages `(x_bar, y_bar)` with fixed-order summation.
pub fn mean_iterate(state: &SwarmState) -> (Vec<f64>, Vec<f64>) {
    (vecops::column_mean(&state.x), vecops::column_mean(&state.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{QuadraticBilevel, QuadraticConfig};
    use crate::topology::{build_mixing, build_topology, MixingScheme, TopologyKind};

    fn ring(k: usize) -> MixingMatrix {
        build_mixing(
            &build_topology(TopologyKind::Ring, k).unwrap(),
            MixingScheme::UniformNeighbor,
        )
        .unwrap()
    }

    fn noisy() -> QuadraticBilevel {
        QuadraticBilevel::generate(&QuadraticConfig {
            noise_sigma: 0.3,
            samples_per_node: 50,
            dim_x: 3,
            dim_y: 4,
            nodes: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn cfg(algo: Algorithm) -> AlgoConfig {
        AlgoConfig {
            algo,
            eta: 0.5,
            beta1: 0.2,
            beta2: 0.2,
            alpha1: 1.0,
            alpha2: 1.0,
            batch_size: 5,
            init_batch: 10,
            hypergrad: HypergradParams::new(5, 4.0).unwrap(),
        }
    }

    #[test]
    fn config_rules() {
        let mut c = cfg(Algorithm::Mdbo);
        c.alpha1 = 2.0;
        assert!(c.validate().is_ok()); // alpha * eta = 1 is allowed
        c.alpha1 = 2.5;
        assert!(c.validate().is_err());
        let mut v = cfg(Algorithm::Vrdbo);
        v.alpha1 = 4.0;
        assert!(v.validate().is_ok());
        v.alpha1 = 4.5;
        assert!(v.validate().is_err());
        let mut e = cfg(Algorithm::Dsbo);
        e.eta = 1.5;
        assert!(e.validate().is_err());
    }

    #[test]
    fn init_is_consensual() {
        let p = noisy();
        let w = ring(4);
        let s = init_state(&p, &w, &cfg(Algorithm::Mdbo), &[0.0; 3], &[0.0; 4], 1).unwrap();
        assert_eq!(vecops::consensus_error(&s.x), 0.0);
        assert_eq!(s.zf, s.u);
        assert_eq!(s.zg, s.v);
    }

    #[test]
    fn single_node_tracks_local_estimator() {
        let p = QuadraticBilevel::scalar(2.0, 1.0, 0.0, 1.0, 0.1, 1).unwrap();
        let w = MixingMatrix::single();
        let c = cfg(Algorithm::Mdbo);
        let mut s = init_state(&p, &w, &c, &[0.0], &[0.0], 3).unwrap();
        for _ in 0..20 {
            step(&mut s, &p, &w, &c).unwrap();
            assert!((s.zf[0][0] - s.u[0][0]).abs() < 1e-14);
            assert!((s.zg[0][0] - s.v[0][0]).abs() < 1e-14);
        }
    }

    #[test]
    fn momentum_boundary_disables_averaging() {
        let p = noisy();
        let w = ring(4);
        let mut c = cfg(Algorithm::Mdbo);
        c.alpha1 = 2.0;
        c.alpha2 = 2.0;
        let mut s = init_state(&p, &w, &c, &[0.1; 3], &[0.0; 4], 5).unwrap();
        step(&mut s, &p, &w, &c).unwrap();
        step(&mut s, &p, &w, &c).unwrap();
        // recompute iteration-1 estimates directly from the same draw
        let prev = s.prev_x.clone().unwrap();
        let prev_y = s.prev_y.clone().unwrap();
        for k in 0..4 {
            let d = draw_node(&p, k, &c.hypergrad, c.batch_size, 5, 1);
            let mut cnt = OpCounters::default();
            let df = estimate_hypergrad(
                &p,
                k,
                &prev[k],
                &prev_y[k],
                &d.hypergrad,
                &c.hypergrad,
                &mut cnt,
            )
            .unwrap();
            assert_eq!(s.u[k], df);
        }
    }

    #[test]
    fn vrdbo_without_previous_iterate_is_state_error() {
        let p = noisy();
        let w = ring(4);
        let c = cfg(Algorithm::Vrdbo);
        let mut s = init_state(&p, &w, &c, &[0.0; 3], &[0.0; 4], 1).unwrap();
        step(&mut s, &p, &w, &c).unwrap();
        s.prev_x = None;
        assert!(matches!(step(&mut s, &p, &w, &c), Err(Error::State(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let p = QuadraticBilevel::scalar(2.0, 1.0, 0.0, 1.0, 0.1, 1).unwrap();
        let w = MixingMatrix::single();
        let c = cfg(Algorithm::Dsbo);
        let mut s = init_state(&p, &w, &c, &[0.0], &[0.0], 1).unwrap();
        s.x[0][0] = f64::NAN;
        match step(&mut s, &p, &w, &c) {
            Err(Error::Divergence { iteration, what }) => {
                assert_eq!(iteration, 1);
                assert_eq!(what, "x");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_step_function() {
        let p = noisy();
        let w = ring(4);
        let c = cfg(Algorithm::Mdbo);
        let mut s = init_state(&p, &w, &c, &[0.0; 3], &[0.0; 4], 1).unwrap();
        assert!(vrdbo_step(&mut s, &p, &w, &c).is_err());
        assert!(mdbo_step(&mut s, &p, &w, &c).is_ok());
    }

    #[test]
    fn mean_iterate_pair() {
        let p = noisy();
        let w = ring(4);
        let c = cfg(Algorithm::Mdbo);
        let mut s = init_state(&p, &w, &c, &[0.0; 3], &[0.0; 4], 1).unwrap();
        s.x = vec![
            vec![1.0, 2.0, 3.0],
            vec![3.0, 2.0, 1.0],
            vec![1.0, 2.0, 3.0],
            vec![3.0, 2.0, 1.0],
        ];
        let (xb, _) = mean_iterate(&s);
        assert_eq!(xb, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn streams_differ_across_nodes_and_iterations() {
        assert_ne!(stream_seed(1, 0, 0), stream_seed(1, 1, 0));
        assert_ne!(stream_seed(1, 0, 0), stream_seed(1, 0, 1));
        assert_eq!(stream_seed(9, 3, 4), stream_seed(9, 3, 4));
    }
}
