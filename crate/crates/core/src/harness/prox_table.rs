//! Closed-form proximal operators against a brute-force grid search.

use super::io::{fmt_f64, Table};
use crate::prox::{hard_threshold_for_l0_weight, hard_threshold_scalar, soft_threshold_scalar};

/// Minimizer of `0.5 (z - x)^2 + penalty(z)` over the grid `k * step`,
/// scanned outward from 0 so ties resolve toward 0.
pub fn grid_argmin(x: f64, step: f64, penalty: impl Fn(f64) -> f64) -> f64 {
    let n = ((x.abs() + 1.0) / step).ceil() as i64;
    let objective = |z: f64| 0.5 * (z - x) * (z - x) + penalty(z);
    let mut best = (objective(0.0), 0.0);
    for k in 1..=n {
        for z in [k as f64 * step, -(k as f64) * step] {
            let v = objective(z);
            if v < best.0 {
                best = (v, z);
            }
        }
    }
    best.1
}

/// Rows `lambda, x, soft, soft_grid, hard, hard_grid` for every pair. The
/// hard threshold is evaluated with the L0 weight `lambda^2 / 2`, whose
/// closed-form threshold is `lambda`.
pub fn prox_table(lambdas: &[f64], xs: &[f64], step: f64) -> (Table, f64) {
    let mut t = Table::new(&["lambda", "x", "soft", "soft_grid", "hard", "hard_grid"]);
    let mut worst: f64 = 0.0;
    for &lam in lambdas {
        let mu = 0.5 * lam * lam;
        let tau = hard_threshold_for_l0_weight(mu);
        for &x in xs {
            let soft = soft_threshold_scalar(x, lam);
            let soft_g = grid_argmin(x, step, |z| lam * z.abs());
            let hard = hard_threshold_scalar(x, tau);
            let hard_g = grid_argmin(x, step, |z| if z == 0.0 { 0.0 } else { mu });
            worst = worst.max((soft - soft_g).abs()).max((hard - hard_g).abs());
            t.push([lam, x, soft, soft_g, hard, hard_g].map(fmt_f64).to_vec());
        }
    }
    (t, worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_match_grid() {
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.0537).collect();
        let (t, worst) = prox_table(&[0.01, 0.1, 1.0], &xs, 1e-4);
        assert_eq!(t.rows.len(), 3 * xs.len());
        assert!(worst <= 1e-4, "{worst}");
    }
}
