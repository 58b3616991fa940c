//! Experiment orchestration: build the network, problem and optimizer from a
//! [`RunConfig`], iterate, evaluate at the mean iterate on a schedule and
//! stream [`RunRecord`]s.

mod config;
mod oracle;
mod output;

use std::fs::File;
use std::io::BufReader;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{OutputFormat, ProblemKind, RunConfig};
pub use oracle::{conjugate_gradient, grad_norm_oracle, hypergradient, inner_solution};
pub use output::{
    emit, inspect, read_jsonl, summarize, CounterSnapshot, RecordSummary, RecordWriter, RunRecord,
    CSV_HEADER,
};

use crate::error::{Error, Result};
use crate::ingest::{parse_libsvm, shard_iid, split_train_val, Dataset};
use crate::optim::{self, init_state, mean_iterate, SwarmState};
use crate::problems::{BilevelProblem, HyperLogReg, NodeData, QuadraticBilevel};
use crate::theory::{self, ProblemConstants, StepBounds};
use crate::topology::{build_mixing, build_topology, MixingMatrix};
use crate::vecops;

/// Lower-level smoothness assumed for the logistic-regression instance when
/// the config does not set one.
pub const DEFAULT_LOGREG_L_GY: f64 = 10.0;

/// A constructed problem instance.
pub enum Instance {
    Quadratic(QuadraticBilevel),
    Logistic(HyperLogReg),
}

impl Instance {
    pub fn problem(&self) -> &dyn BilevelProblem {
        match self {
            Self::Quadratic(p) => p,
            Self::Logistic(p) => p,
        }
    }
}

pub fn build_network(cfg: &RunConfig) -> Result<MixingMatrix> {
    if cfg.nodes == 1 {
        return Ok(MixingMatrix::single());
    }
    build_mixing(&build_topology(cfg.topology, cfg.nodes)?, cfg.mixing)
}

/// Loads, subsamples, splits and shards a LIBSVM file into per-node
/// training and validation shards.
pub fn load_logistic(cfg: &RunConfig) -> Result<HyperLogReg> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("hyperlogreg needs a dataset path".into()))?;
    let data = parse_libsvm(BufReader::new(File::open(path)?), cfg.dataset_dim)?;
    logistic_from_dataset(cfg, &data)
}

pub fn logistic_from_dataset(cfg: &RunConfig, data: &Dataset) -> Result<HyperLogReg> {
    let data = match cfg.max_samples {
        Some(n) => data.subsample(n, cfg.seed),
        None => data.clone(),
    };
    let (train, val) = split_train_val(&data, cfg.val_frac, cfg.seed)?;
    let train_shards = shard_iid(&train, cfg.nodes, cfg.seed)?.apply(&train);
    let val_shards = shard_iid(&val, cfg.nodes, cfg.seed.wrapping_add(1))?.apply(&val);
    HyperLogReg::new(
        train_shards
            .into_iter()
            .zip(val_shards)
            .map(|(train, val)| NodeData { train, val })
            .collect(),
    )
}

pub fn build_instance(cfg: &RunConfig) -> Result<Instance> {
    match cfg.problem {
        ProblemKind::Quadratic => Ok(Instance::Quadratic(QuadraticBilevel::generate(
            &cfg.quadratic_config(),
        )?)),
        ProblemKind::Hyperlogreg => Ok(Instance::Logistic(load_logistic(cfg)?)),
    }
}

/// `l_gy` from the config, else the instance default.
pub fn resolve_l_gy(cfg: &RunConfig, instance: &Instance) -> f64 {
    cfg.l_gy.unwrap_or_else(|| match instance {
        Instance::Quadratic(q) => nalgebra::SymmetricEigen::new(q.a().clone())
            .eigenvalues
            .max(),
        Instance::Logistic(_) => DEFAULT_LOGREG_L_GY,
    })
}

/// Evaluation of the swarm at its mean iterate.
pub fn record_for<P: BilevelProblem + ?Sized>(
    problem: &P,
    state: &SwarmState,
    started: Instant,
) -> RunRecord {
    let (xb, yb) = mean_iterate(state);
    let eval = problem.evaluate(&xb, &yb);
    let y_gap_sq = problem
        .exact_inner_solution(&xb)
        .map(|ys| vecops::norm_sq(&vecops::sub(&yb, &ys)));
    RunRecord {
        t: state.t,
        upper_loss: eval.upper_loss,
        val_accuracy: eval.accuracy,
        grad_norm_sq: grad_norm_oracle(problem, &xb, &yb),
        y_gap_sq,
        consensus_x: vecops::consensus_error(&state.x),
        consensus_y: vecops::consensus_error(&state.y),
        counters: CounterSnapshot::from_nodes(&state.counters),
        wall_clock_s: started.elapsed().as_secs_f64(),
    }
}

/// Runs `cfg.iters` iterations of `problem`, handing each record to `sink`
/// as soon as it exists. Records are taken at `t = 0`, every `eval_every`
/// iterations and at the end. A divergence error is returned after the
/// records preceding it have been delivered.
pub fn run_problem<P: BilevelProblem + ?Sized>(
    cfg: &RunConfig,
    problem: &P,
    w: &MixingMatrix,
    l_gy: f64,
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<SwarmState> {
    cfg.validate()?;
    let algo = cfg.algo_config(l_gy);
    let started = Instant::now();
    let x0 = vec![0.0; problem.dim_x()];
    let y0 = vec![0.0; problem.dim_y()];
    let mut state = init_state(problem, w, &algo, &x0, &y0, cfg.seed)?;
    sink(&record_for(problem, &state, started))?;
    for _ in 0..cfg.iters {
        optim::step(&mut state, problem, w, &algo)?;
        if state.t % cfg.eval_every == 0 || state.t == cfg.iters {
            sink(&record_for(problem, &state, started))?;
        }
    }
    Ok(state)
}

/// Builds everything from `cfg`, runs it and returns the records. When
/// `output_path` is set the records are also streamed to it, and the
/// resolved configuration is written next to it as `<output>.meta.toml`.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let w = build_network(cfg)?;
    let instance = build_instance(cfg)?;
    let l_gy = resolve_l_gy(cfg, &instance);
    let mut records = Vec::new();
    let mut writer = match &cfg.output_path {
        Some(path) => {
            let mut meta = cfg.clone();
            meta.l_gy = Some(l_gy);
            let mut meta_path = path.clone().into_os_string();
            meta_path.push(".meta.toml");
            std::fs::write(meta_path, meta.to_toml_string()?)?;
            Some(RecordWriter::create(path, cfg.output_format)?)
        }
        None => None,
    };
    let mut sink = |r: &RunRecord| -> Result<()> {
        if let Some(w) = writer.as_mut() {
            w.write(r)?;
        }
        records.push(r.clone());
        Ok(())
    };
    run_problem(cfg, instance.problem(), &w, l_gy, &mut sink)?;
    Ok(records)
}

/// Constants for the step-size calculators: computed for quadratic instances,
/// user-supplied (`const_*` keys) otherwise. Supplied keys always win.
pub fn problem_constants(cfg: &RunConfig, instance: Option<&Instance>) -> Result<ProblemConstants> {
    let base = match instance {
        Some(Instance::Quadratic(q)) => {
            Some(theory::constants_quadratic(q, cfg.y_radius, cfg.neumann_j)?)
        }
        _ => None,
    };
    let pick = |name: &str, given: Option<f64>, computed: Option<f64>| {
        given.or(computed).ok_or_else(|| {
            Error::Config(format!(
                "constant `const_{name}` is required for this problem"
            ))
        })
    };
    let c = ProblemConstants {
        mu: pick("mu", cfg.const_mu, base.map(|b| b.mu))?,
        l_gy: pick("l_gy", cfg.const_l_gy, base.map(|b| b.l_gy))?,
        l_fx: pick("l_fx", cfg.const_l_fx, base.map(|b| b.l_fx))?,
        l_fy: pick("l_fy", cfg.const_l_fy, base.map(|b| b.l_fy))?,
        c_fy: pick("c_fy", cfg.const_c_fy, base.map(|b| b.c_fy))?,
        c_gxy: pick("c_gxy", cfg.const_c_gxy, base.map(|b| b.c_gxy))?,
        l_gxy: pick(
            "l_gxy",
            cfg.const_l_gxy,
            base.map(|b| b.l_gxy).or(Some(0.0)),
        )?,
        l_gyy: pick(
            "l_gyy",
            cfg.const_l_gyy,
            base.map(|b| b.l_gyy).or(Some(0.0)),
        )?,
        depth: cfg.neumann_j,
        sigma: pick(
            "sigma",
            cfg.const_sigma,
            base.map(|b| b.sigma).or(Some(0.0)),
        )?,
    };
    c.validate()?;
    Ok(c)
}

/// Output of the `bounds` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub nodes: usize,
    pub lambda: f64,
    pub spectral_gap: f64,
    pub constants: ProblemConstants,
    pub l_f: f64,
    pub l_f_star: f64,
    pub l_y: f64,
    pub l_ftilde: f64,
    pub sigma_ftilde: f64,
    pub mdbo: StepBounds,
    pub vrdbo: StepBounds,
}

pub fn bounds_report(cfg: &RunConfig) -> Result<BoundsReport> {
    let w = build_network(cfg)?;
    let instance = match cfg.problem {
        ProblemKind::Quadratic => Some(build_instance(cfg)?),
        ProblemKind::Hyperlogreg => None,
    };
    let c = problem_constants(cfg, instance.as_ref())?;
    let d = c.derived();
    Ok(BoundsReport {
        nodes: cfg.nodes,
        lambda: w.lambda(),
        spectral_gap: w.spectral_gap(),
        constants: c,
        l_f: d.l_f,
        l_f_star: d.l_f_star,
        l_y: d.l_y,
        l_ftilde: d.l_ftilde,
        sigma_ftilde: d.sigma_ftilde,
        mdbo: theory::mdbo_bounds(&c, cfg.alpha1, cfg.alpha2, w.lambda())?,
        vrdbo: theory::vrdbo_bounds(&c, cfg.alpha1, cfg.alpha2, w.lambda(), cfg.nodes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            nodes: 4,
            dim_x: 3,
            dim_y: 3,
            samples_per_node: 20,
            noise_sigma: 0.2,
            batch_size: 5,
            iters: 10,
            eval_every: 5,
            ..Default::default()
        }
    }

    #[test]
    fn schedule() {
        let r = run_experiment(&small()).unwrap();
        let ts: Vec<usize> = r.iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![0, 5, 10]);
        let mut c = small();
        c.iters = 7;
        let ts: Vec<usize> = run_experiment(&c).unwrap().iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![0, 5, 7]);
    }

    #[test]
    fn first_record_is_consensual() {
        let r = run_experiment(&small()).unwrap();
        assert_eq!(r[0].consensus_x, 0.0);
        assert_eq!(r[0].consensus_y, 0.0);
        assert!(r[0].y_gap_sq.is_some());
        assert_eq!(r[2].counters.comm_rounds, 10);
    }

    #[test]
    fn divergence_flushes_earlier_records() {
        let mut c = small();
        c.eta = 1.0;
        c.beta1 = 1e6;
        c.beta2 = 1e6;
        c.iters = 400;
        c.eval_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.jsonl");
        c.output_path = Some(out.clone());
        let err = run_experiment(&c).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        let written = read_jsonl(&out).unwrap();
        assert!(!written.is_empty());
        assert!(dir.path().join("r.jsonl.meta.toml").exists());
    }

    #[test]
    fn bounds_for_quadratic() {
        let rep = bounds_report(&small()).unwrap();
        assert!(rep.mdbo.beta1_max > 0.0 && rep.vrdbo.beta2_max > 0.0);
        assert!((rep.mdbo.beta2_c - 1.0 / (6.0 * rep.constants.l_gy)).abs() < 1e-15);
    }

    #[test]
    fn bounds_for_logistic_need_constants() {
        let mut c = small();
        c.problem = ProblemKind::Hyperlogreg;
        c.dataset = Some("unused".into());
        assert!(bounds_report(&c).is_err());
        for (k, v) in [
            ("const_mu", "0.1"),
            ("const_l_gy", "10.0"),
            ("const_l_fx", "1.0"),
            ("const_l_fy", "1.0"),
            ("const_c_fy", "1.0"),
            ("const_c_gxy", "1.0"),
        ] {
            c.set(k, v).unwrap();
        }
        assert!(bounds_report(&c).is_ok());
    }
}
