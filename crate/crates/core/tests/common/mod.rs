#![allow(dead_code)]

use netbilevel::ingest::{Dataset, SparseRow};
use netbilevel::problems::{HyperLogReg, NodeData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Binary dataset with sparse 0/1 features and labels from a noisy linear
/// rule, shaped like the adult census benchmark (few active features per row).
pub fn synthetic_binary(n: usize, dim: usize, active: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut idx: Vec<u32> = (0..active.min(dim))
            .map(|_| rng.random_range(0..dim as u32))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        let score: f64 =
            idx.iter().map(|&i| w[i as usize]).sum::<f64>() + rng.random_range(-0.5..0.5);
        labels.push(usize::from(score < 0.0));
        rows.push(SparseRow {
            values: vec![1.0; idx.len()],
            indices: idx,
        });
    }
    // make sure both classes appear, with "+1" first
    labels[0] = 0;
    labels[1] = 1;
    Dataset {
        dim,
        rows,
        labels,
        label_names: vec!["+1".into(), "-1".into()],
    }
}

/// Dataset with dense Gaussian features.
pub fn synthetic_dense(n: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let values: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = values[0] + 0.5 * values[1] + rng.random_range(-0.3..0.3);
        labels.push(if i < 2 { i } else { usize::from(s < 0.0) });
        rows.push(SparseRow {
            indices: (0..dim as u32).collect(),
            values,
        });
    }
    Dataset {
        dim,
        rows,
        labels,
        label_names: vec!["1".into(), "0".into()],
    }
}

/// Splits `data` round-robin into `nodes` training/validation shards.
pub fn logistic_problem(data: &Dataset, nodes: usize) -> HyperLogReg {
    let n = data.len();
    let n_val = n * 3 / 10;
    let mut shards = Vec::new();
    for k in 0..nodes {
        let val: Vec<usize> = (0..n_val).filter(|i| i % nodes == k).collect();
        let train: Vec<usize> = (n_val..n).filter(|i| i % nodes == k).collect();
        shards.push(NodeData {
            train: data.select(&train),
            val: data.select(&val),
        });
    }
    HyperLogReg::new(shards).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Central finite-difference gradient of `f`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}
