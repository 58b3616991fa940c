//! Problem constants and the admissible step sizes of the MDBO and VRDBO
//! convergence theorems.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::QuadraticBilevel;

/// Smoothness and boundedness constants of a bilevel instance.
///
/// `l_gxy` and `l_gyy` may be zero (quadratic lower levels have constant
/// second derivatives). `depth` is the Neumann depth `J` entering the
/// hypergradient-estimator smoothness, `sigma` the per-sample noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub mu: f64,
    pub l_gy: f64,
    pub l_fx: f64,
    pub l_fy: f64,
    pub c_fy: f64,
    pub c_gxy: f64,
    pub l_gxy: f64,
    pub l_gyy: f64,
    pub depth: usize,
    pub sigma: f64,
}

/// Constants assembled from the primitive ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub l_f: f64,
    pub l_f_star: f64,
    pub l_y: f64,
    pub l_ftilde: f64,
    pub sigma_ftilde: f64,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mu", self.mu),
            ("l_gy", self.l_gy),
            ("l_fx", self.l_fx),
            ("l_fy", self.l_fy),
            ("c_fy", self.c_fy),
            ("c_gxy", self.c_gxy),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("l_gxy", self.l_gxy),
            ("l_gyy", self.l_gyy),
            ("sigma", self.sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.mu > self.l_gy {
            return Err(Error::Config(format!(
                "mu = {} exceeds l_gy = {}",
                self.mu, self.l_gy
            )));
        }
        Ok(())
    }

    pub fn l_f(&self) -> f64 {
        let mu = self.mu;
        self.l_fx
            + self.l_fy * self.c_gxy / mu
            + self.c_fy * self.l_gxy / mu
            + self.l_gyy * self.c_fy * self.c_gxy / (mu * mu)
    }

    pub fn l_f_star(&self) -> f64 {
        let l_f = self.l_f();
        l_f + l_f * self.c_gxy / self.mu
    }

    pub fn l_y(&self) -> f64 {
        self.c_gxy / self.mu
    }

    pub fn l_ftilde_sq(&self) -> f64 {
        let mu2 = self.mu * self.mu;
        let j = self.depth as f64;
        4.0 * self.l_fx.powi(2)
            + 4.0 * self.c_gxy.powi(2) * self.c_fy.powi(2) * j * j * self.l_gyy.powi(2)
                / (mu2 * self.l_gy.powi(2))
            + 4.0 * self.c_gxy.powi(2) * self.l_fy.powi(2) / mu2
            + self.l_gxy.powi(2) * self.c_fy.powi(2) / mu2
    }

    pub fn sigma_ftilde_sq(&self) -> f64 {
        let s2 = self.sigma * self.sigma;
        let mu2 = self.mu * self.mu;
        let (cg2, cf2) = (self.c_gxy.powi(2), self.c_fy.powi(2));
        4.0 * s2
            + 4.0 * cf2 * s2 / mu2
            + 4.0 * s2 * (s2 + cg2) / mu2
            + 16.0 * (s2 + cg2) * (s2 + cf2) / mu2
    }

    pub fn derived(&self) -> DerivedConstants {
        DerivedConstants {
            l_f: self.l_f(),
            l_f_star: self.l_f_star(),
            l_y: self.l_y(),
            l_ftilde: self.l_ftilde_sq().sqrt(),
            sigma_ftilde: self.sigma_ftilde_sq().sqrt(),
        }
    }
}

/// Constants of a quadratic instance. `C_fy` is the bound of `y - d` over the
/// ball `||y - d|| <= y_radius`, since the upper gradient is unbounded globally.
pub fn constants_quadratic(
    problem: &QuadraticBilevel,
    y_radius: f64,
    depth: usize,
) -> Result<ProblemConstants> {
    if !(y_radius > 0.0) {
        return Err(Error::Config(format!(
            "y_radius must be positive, got {y_radius}"
        )));
    }
    let eig = SymmetricEigen::new(problem.a().clone()).eigenvalues;
    let mu = eig.min();
    let l_gy = eig.max();
    if !(mu > 0.0) {
        return Err(Error::AssumptionViolation(format!(
            "lower-level matrix is not positive definite (min eigenvalue {mu})"
        )));
    }
    let b = problem.b();
    let c_gxy = if b.nrows() == 0 || b.ncols() == 0 {
        0.0
    } else {
        let sv = b.clone().singular_values();
        sv.max()
    };
    let c = ProblemConstants {
        mu,
        l_gy,
        l_fx: problem.rho(),
        l_fy: 1.0,
        c_fy: y_radius,
        c_gxy,
        l_gxy: 0.0,
        l_gyy: 0.0,
        depth,
        sigma: problem.noise_sigma(),
    };
    c.validate()?;
    Ok(c)
}

/// The six step-size expressions of a theorem, their minima and the
/// resulting bound on `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepBounds {
    pub beta1_a: f64,
    pub beta1_b: f64,
    pub beta1_c: f64,
    pub beta2_a: f64,
    pub beta2_b: f64,
    pub beta2_c: f64,
    pub beta1_max: f64,
    pub beta2_max: f64,
    pub eta_max: f64,
}

fn check_common(c: &ProblemConstants, alpha1: f64, alpha2: f64, lambda: f64) -> Result<()> {
    c.validate()?;
    if !(alpha1 > 0.0 && alpha2 > 0.0) {
        return Err(Error::Config(format!(
            "alpha values must be positive, got {alpha1} and {alpha2}"
        )));
    }
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::AssumptionViolation(format!(
            "second-largest eigenvalue magnitude must lie in [0, 1), got {lambda}"
        )));
    }
    Ok(())
}

/// Step-size bounds for MDBO.
pub fn mdbo_bounds(
    c: &ProblemConstants,
    alpha1: f64,
    alpha2: f64,
    lambda: f64,
) -> Result<StepBounds> {
    check_common(c, alpha1, alpha2, lambda)?;
    let (mu, lgy) = (c.mu, c.l_gy);
    let lf = c.l_f();
    let lf2 = lf * lf;
    let lt2 = c.l_ftilde_sq();
    let (a1s, a2s) = (alpha1 * alpha1, alpha2 * alpha2);
    let gap2 = (1.0 - lambda).powi(2);

    let beta2_a = 9.0 * mu * lf2
        / (2.0 * ((4.0 + 16.0 / a1s) * lt2 + (200.0 + 400.0 / a2s) * lf2) * lgy * lgy);
    let beta2_b = 5.0 * gap2 * lf
        / (2.0 * lgy * ((12.0 + 36.0 / a1s) * lt2 + (500.0 + 900.0 / a2s) * lf2).sqrt());
    let beta2_c = 1.0 / (6.0 * lgy);
    let beta2_max = beta2_a.min(beta2_b).min(beta2_c);

    let beta1_a = beta2_max * mu / (15.0 * c.l_y() * lf);
    let beta1_b = mu / (4.0 * lgy * ((2.0 + 8.0 / a1s) * lt2 + (100.0 + 200.0 / a2s) * lf2).sqrt());
    let beta1_c =
        mu * gap2 / (4.0 * lgy * ((6.0 + 18.0 / a1s) * lt2 + (250.0 + 450.0 / a2s) * lf2).sqrt());
    let beta1_max = beta1_a.min(beta1_b).min(beta1_c);

    let eta_max = 1.0f64
        .min(1.0 / (2.0 * beta1_max * c.l_f_star()))
        .min(1.0 / alpha1)
        .min(1.0 / alpha2);
    Ok(StepBounds {
        beta1_a,
        beta1_b,
        beta1_c,
        beta2_a,
        beta2_b,
        beta2_c,
        beta1_max,
        beta2_max,
        eta_max,
    })
}

/// Step-size bounds for VRDBO on `k` nodes; `c.l_gy` plays the role of the
/// mean-squared smoothness constant of the lower level.
pub fn vrdbo_bounds(
    c: &ProblemConstants,
    alpha1: f64,
    alpha2: f64,
    lambda: f64,
    k: usize,
) -> Result<StepBounds> {
    check_common(c, alpha1, alpha2, lambda)?;
    if k == 0 {
        return Err(Error::Config("node count must be at least 1".into()));
    }
    let kf = k as f64;
    let (mu, ell) = (c.mu, c.l_gy);
    let lf = c.l_f();
    let lf2 = lf * lf;
    let lt2 = c.l_ftilde_sq();
    let (a1k, a2k) = (alpha1 * kf, alpha2 * kf);
    let gap2 = (1.0 - lambda).powi(2);
    let shared = ((57.0 + 54.0 / a1k) * lt2 + (104.0 + 900.0 / a2k) * lf2).sqrt();

    let beta2_a = (gap2 * lf / ell) / (2.0 * shared);
    let beta2_b =
        9.0 * mu * lf2 / (8.0 * ell * ell * ((6.0 + 6.0 / a1k) * lt2 + (6.0 + 100.0 / a2k) * lf2));
    let beta2_c = 1.0 / (6.0 * ell);
    let beta2_max = beta2_a.min(beta2_b).min(beta2_c);

    let beta1_a = beta2_max * mu / (15.0 * c.l_y() * lf);
    let beta1_b = mu / (8.0 * ell * ((3.0 + 3.0 / a1k) * lt2 + (3.0 + 50.0 / a2k) * lf2).sqrt());
    let beta1_c = (mu * gap2 / ell) / (2.0 * shared);
    let beta1_max = beta1_a.min(beta1_b).min(beta1_c);

    let eta_max = 1.0f64
        .min(1.0 / (2.0 * beta1_max * c.l_f_star()))
        .min(1.0 / alpha1.sqrt())
        .min(1.0 / alpha2.sqrt());
    Ok(StepBounds {
        beta1_a,
        beta1_b,
        beta1_c,
        beta2_a,
        beta2_b,
        beta2_c,
        beta1_max,
        beta2_max,
        eta_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fixture() -> ProblemConstants {
        ProblemConstants {
            mu: 0.5,
            l_gy: 4.0,
            l_fx: 1.0,
            l_fy: 1.0,
            c_fy: 2.0,
            c_gxy: 1.5,
            l_gxy: 0.3,
            l_gyy: 0.2,
            depth: 10,
            sigma: 0.1,
        }
    }

    #[test]
    fn derived_by_hand() {
        let c = fixture();
        // 1 + 1*1.5/0.5 + 2*0.3/0.5 + 0.2*2*1.5/0.25
        assert!((c.l_f() - (1.0 + 3.0 + 1.2 + 2.4)).abs() < 1e-12);
        assert!((c.l_f_star() - 7.6 * 4.0).abs() < 1e-12);
        assert!((c.l_y() - 3.0).abs() < 1e-15);
        // 4 + 4*2.25*4*100*0.04/(0.25*16) + 4*2.25/0.25 + 0.09*4/0.25
        let lt2 = 4.0 + 36.0 + 36.0 + 1.44;
        assert!((c.l_ftilde_sq() - lt2).abs() < 1e-10);
    }

    #[test]
    fn identity_quadratic() {
        use nalgebra::{DMatrix, DVector};
        let p = QuadraticBilevel::from_parts(
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3),
            DVector::zeros(3),
            DVector::zeros(3),
            1.0,
            2,
            1,
        )
        .unwrap();
        let c = constants_quadratic(&p, 10.0, 5).unwrap();
        assert!((c.mu - 1.0).abs() < 1e-12);
        assert!((c.l_gy - 1.0).abs() < 1e-12);
        assert!((c.l_y() - 1.0).abs() < 1e-12);
        assert!((1.0 - c.mu / c.l_gy).abs() < 1e-12);
    }

    #[test]
    fn scalar_instance_by_hand() {
        let p = QuadraticBilevel::scalar(2.0, 1.0, 0.0, 1.0, 0.1, 1).unwrap();
        let c = constants_quadratic(&p, 10.0, 10).unwrap();
        assert_eq!((c.mu, c.l_gy, c.c_gxy, c.l_fx), (2.0, 2.0, 1.0, 0.1));
        assert!((c.l_f() - 0.6).abs() < 1e-15);
        assert!((c.l_f_star() - 0.9).abs() < 1e-15);
        assert!((c.l_ftilde_sq() - (0.04 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn lambda_out_of_range() {
        let c = fixture();
        assert!(mdbo_bounds(&c, 1.0, 1.0, 1.0).is_err());
        assert!(vrdbo_bounds(&c, 1.0, 1.0, 1.2, 8).is_err());
        assert!(vrdbo_bounds(&c, 1.0, 1.0, 0.5, 0).is_err());
    }

    #[test]
    fn vrdbo_large_k_limit() {
        let c = fixture();
        let b = vrdbo_bounds(&c, 5.0, 5.0, 0.3, 1 << 40).unwrap();
        let lim = c.mu / (8.0 * c.l_gy * (3.0 * c.l_ftilde_sq() + 3.0 * c.l_f().powi(2)).sqrt());
        assert!((b.beta1_b / lim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vrdbo_zero_lambda_uses_unit_gap() {
        let c = fixture();
        let b0 = vrdbo_bounds(&c, 5.0, 5.0, 0.0, 8).unwrap();
        let lt2 = c.l_ftilde_sq();
        let lf2 = c.l_f().powi(2);
        let shared = ((57.0 + 54.0 / 40.0) * lt2 + (104.0 + 900.0 / 40.0) * lf2).sqrt();
        assert!((b0.beta1_c - c.mu / c.l_gy / (2.0 * shared)).abs() < 1e-15);
    }

    #[test]
    fn monotone_in_each_argument() {
        let base = fixture();
        let b = mdbo_bounds(&base, 1.0, 1.0, 0.5).unwrap();
        let mut harder = base;
        harder.l_gy *= 1.1;
        let bh = mdbo_bounds(&harder, 1.0, 1.0, 0.5).unwrap();
        assert!(bh.beta1_max <= b.beta1_max && bh.beta2_max <= b.beta2_max);
        let bl = mdbo_bounds(&base, 1.0, 1.0, 0.6).unwrap();
        assert!(bl.beta1_c <= b.beta1_c && bl.beta2_b <= b.beta2_b);
        let v = vrdbo_bounds(&base, 5.0, 5.0, 0.5, 8).unwrap();
        let vh = vrdbo_bounds(&harder, 5.0, 5.0, 0.5, 8).unwrap();
        assert!(vh.beta1_max <= v.beta1_max && vh.beta2_max <= v.beta2_max);
    }
}
