//! Reference hypergradients used for evaluation (never by the optimizers).

use crate::problems::BilevelProblem;
use crate::vecops;

/// Conjugate gradient for `H w = b` with `H` symmetric positive definite,
/// stopping when `||b - H w|| <= tol * ||b||`. Returns `None` when
/// `max_iter` iterations do not suffice.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Option<Vec<f64>> {
    let n = b.len();
    let target = tol * vecops::norm(b);
    let mut w = vec![0.0; n];
    let mut r = b.to_vec();
    let mut rr = vecops::norm_sq(&r);
    if rr.sqrt() <= target {
        return Some(w);
    }
    let mut p = r.clone();
    for _ in 0..max_iter {
        let hp = apply(&p);
        let php = vecops::dot(&p, &hp);
        if !(php > 0.0) {
            return None;
        }
        let a = rr / php;
        vecops::axpy(a, &p, &mut w);
        vecops::axpy(-a, &hp, &mut r);
        let rr_next = vecops::norm_sq(&r);
        if rr_next.sqrt() <= target {
            return Some(w);
        }
        let beta = rr_next / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_next;
    }
    None
}

/// Full-batch minimizer of the network lower objective at `x` by Newton's
/// method with CG inner solves, started from `y0`.
pub fn inner_solution<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    y0: &[f64],
    tol: f64,
) -> Option<Vec<f64>> {
    if let Some(y) = problem.exact_inner_solution(x) {
        return Some(y);
    }
    let dy = problem.dim_y();
    let mut y = y0.to_vec();
    for _ in 0..50 {
        let g = problem.full_grad_y_g(x, &y);
        if vecops::norm(&g) <= tol {
            return Some(y);
        }
        let step = conjugate_gradient(|v| problem.full_hvp_yy_g(x, &y, v), &g, 1e-6, 10 * dy)?;
        // backtracking keeps far-away starts from overshooting
        let current = problem.full_lower_loss(x, &y);
        let slope = vecops::dot(&g, &step);
        let mut t = 1.0;
        let mut trial;
        loop {
            trial = y.clone();
            vecops::axpy(-t, &step, &mut trial);
            let value = problem.full_lower_loss(x, &trial);
            if value <= current - 1e-4 * t * slope || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        y = trial;
        if !vecops::all_finite(&y) {
            return None;
        }
    }
    let g = problem.full_grad_y_g(x, &y);
    (vecops::norm(&g) <= tol).then_some(y)
}

/// Hypergradient of the network objective at `x`: the closed form when the
/// problem has one, otherwise the implicit-function formula at a Newton-CG
/// inner solution with a CG solve to relative residual `1e-8` capped at `10 d_y`
/// iterations. `None` signals that an inner solve did not converge.
pub fn hypergradient<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    y_hint: &[f64],
) -> Option<Vec<f64>> {
    if let Some(g) = problem.exact_hypergrad(x) {
        return Some(g);
    }
    let y = inner_solution(problem, x, y_hint, 1e-9)?;
    let b = problem.full_grad_y_f(x, &y);
    let w = conjugate_gradient(
        |v| problem.full_hvp_yy_g(x, &y, v),
        &b,
        1e-8,
        10 * problem.dim_y(),
    )?;
    let mut g = problem.full_grad_x_f(x, &y);
    let j = problem.full_jvp_xy_g(x, &y, &w);
    vecops::axpy(-1.0, &j, &mut g);
    Some(g)
}

/// `||grad F(x)||^2`, or `None` on oracle failure.
pub fn grad_norm_oracle<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    y_hint: &[f64],
) -> Option<f64> {
    hypergradient(problem, x, y_hint).map(|g| vecops::norm_sq(&g))
}
