//! The ε-predictor contract and its desk-scale realizations.

mod attention;
mod condition;
mod mixture;

pub use attention::{
    AttentionFeatures, DenoiserConfig, InjectionMode, LayerFeatures, TokenDenoiser,
};
pub use condition::Condition;
pub use mixture::{MixtureComponent, MixtureOracle};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::Timestep;

/// A pure noise predictor `ε(z, t, C)`.
///
/// Implementations hold no state between calls, so they can be shared across
/// threads and evaluated in any order.
pub trait EpsilonPredictor: Sync {
    fn latent_len(&self) -> usize;

    fn predict(&self, z: &Latent, ts: Timestep, cond: &Condition) -> Result<Latent>;

    /// Jacobian of ε with respect to the condition coordinates. Defaults to
    /// central differences with step `h`; predictors with a closed form
    /// override it and ignore `h`.
    fn condition_gradient(&self, z: &Latent, ts: Timestep, cond: &Condition, h: f64) -> Result<ConditionJacobian> {
        epsilon_grad_condition(self, z, ts, cond, h)
    }
}

impl<P: EpsilonPredictor + ?Sized> EpsilonPredictor for &P {
    fn latent_len(&self) -> usize {
        (**self).latent_len()
    }

    fn predict(&self, z: &Latent, ts: Timestep, cond: &Condition) -> Result<Latent> {
        (**self).predict(z, ts, cond)
    }

    fn condition_gradient(&self, z: &Latent, ts: Timestep, cond: &Condition, h: f64) -> Result<ConditionJacobian> {
        (**self).condition_gradient(z, ts, cond, h)
    }
}

/// Jacobian of ε with respect to the flattened condition coordinates
/// (logits, then shift). One column per coordinate, each of latent shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionJacobian {
    pub columns: Vec<Latent>,
}

impl ConditionJacobian {
    /// `J^T v`: the gradient of `<v, ε>` with respect to the coordinates.
    pub fn transpose_apply(&self, v: &Latent) -> Result<Vec<f64>> {
        self.columns
            .iter()
            .map(|col| {
                col.check_same_shape(v)?;
                Ok(col.as_slice().iter().zip(v.as_slice()).map(|(a, b)| a * b).sum())
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.columns.iter().map(Latent::norm_inf).fold(0.0, f64::max)
    }
}

/// Central finite differences of ε per condition coordinate.
pub fn epsilon_grad_condition<P: EpsilonPredictor + ?Sized>(
    predictor: &P,
    z: &Latent,
    ts: Timestep,
    cond: &Condition,
    h: f64,
) -> Result<ConditionJacobian> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let base = cond.coords();
    let mut columns = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let ep = predictor.predict(z, ts, &cond.with_coords(&plus)?)?;
        let em = predictor.predict(z, ts, &cond.with_coords(&minus)?)?;
        columns.push(ep.zip_map(&em, |a, b| (a - b) / (2.0 * h))?);
    }
    Ok(ConditionJacobian { columns })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear;

    impl EpsilonPredictor for Linear {
        fn latent_len(&self) -> usize {
            2
        }

        fn predict(&self, z: &Latent, _ts: Timestep, cond: &Condition) -> Result<Latent> {
            let l = cond.logits();
            Ok(Latent::from_vec(vec![
                z.as_slice()[0] + 2.0 * l[0],
                z.as_slice()[1] - l[0] + 3.0 * l[1],
            ]))
        }
    }

    #[test]
    fn finite_differences_recover_linear_jacobian() {
        let z = Latent::from_vec(vec![0.3, -0.2]);
        let c = Condition::new(vec![0.1, 0.2]);
        let j = epsilon_grad_condition(&Linear, &z, Timestep::new(1, 0.5), &c, 1e-3).unwrap();
        assert!((j.columns[0].as_slice()[0] - 2.0).abs() < 1e-9);
        assert!((j.columns[0].as_slice()[1] + 1.0).abs() < 1e-9);
        assert!(j.columns[1].as_slice()[0].abs() < 1e-9);
        assert!((j.columns[1].as_slice()[1] - 3.0).abs() < 1e-9);
        let g = j.transpose_apply(&Latent::from_vec(vec![1.0, 1.0])).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9 && (g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_step() {
        let z = Latent::from_vec(vec![0.0, 0.0]);
        let c = Condition::new(vec![0.0]);
        assert!(epsilon_grad_condition(&Linear, &z, Timestep::new(1, 0.5), &c, 0.0).is_err());
    }
}
