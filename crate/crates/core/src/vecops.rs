//! Small dense-vector helpers shared by the oracles and the optimizers.
//!
//! Every reduction runs in index order so results are reproducible bit for bit.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= alpha;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Column mean of a set of equally sized columns, summed in column order.
pub fn column_mean(cols: &[Vec<f64>]) -> Vec<f64> {
    let k = cols.len();
    assert!(k > 0, "column_mean of an empty set");
    let mut out = vec![0.0; cols[0].len()];
    for c in cols {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    let kf = k as f64;
    for o in out.iter_mut() {
        *o /= kf;
    }
    out
}

/// `(1/K) * sum_k ||col_k - mean||^2`, evaluated through the pairwise identity
/// `(1/(2K^2)) * sum_{i,j} ||col_i - col_j||^2` so identical columns give exactly zero.
pub fn consensus_error(cols: &[Vec<f64>]) -> f64 {
    let k = cols.len();
    let mut s = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            for (a, b) in cols[i].iter().zip(&cols[j]) {
                let d = a - b;
                s += d * d;
            }
        }
    }
    // each unordered pair appears twice in the full double sum
    s / (k * k) as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
