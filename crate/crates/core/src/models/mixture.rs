use serde::{Deserialize, Serialize};

use super::{Condition, ConditionJacobian, EpsilonPredictor};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::Timestep;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub scale: f64,
}

/// Isotropic Gaussian mixture data distribution with an exact noise
/// predictor.
///
/// At time `t` each component's marginal is
/// `N(sqrt(ab) (mu_k + shift), (ab s_k^2 + 1 - ab) I)` and the optimal noise
/// prediction is `-sqrt(1 - ab) * grad log p_t(z)`, which is a
/// responsibility-weighted sum of per-component terms. The condition's
/// logits reweight the components multiplicatively (softmax times the base
/// weights, renormalized), so all-zero logits leave the mixture unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureOracle {
    components: Vec<MixtureComponent>,
    latent_len: usize,
}

/// Per-evaluation quantities shared by ε and its condition derivatives.
struct Evaluation {
    resp: Vec<f64>,
    /// Per-component ε terms.
    terms: Vec<Vec<f64>>,
    /// Marginal variances.
    var: Vec<f64>,
    centers: Vec<Vec<f64>>,
}

impl MixtureOracle {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        let latent_len = first.mean.len();
        if latent_len == 0 {
            return Err(Error::invalid("component means must be non-empty"));
        }
        for c in &components {
            if c.mean.len() != latent_len {
                return Err(Error::ShapeMismatch {
                    expected: vec![latent_len],
                    got: vec![c.mean.len()],
                });
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid(format!("component weight must be positive, got {}", c.weight)));
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return Err(Error::invalid(format!("component scale must be positive, got {}", c.scale)));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("component mean"));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        let components = components
            .into_iter()
            .map(|c| MixtureComponent {
                weight: c.weight / total,
                ..c
            })
            .collect();
        Ok(Self {
            components,
            latent_len,
        })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    fn check_inputs(&self, z: &Latent, cond: &Condition) -> Result<()> {
        if z.len() != self.latent_len {
            return Err(Error::ShapeMismatch {
                expected: vec![self.latent_len],
                got: z.shape().to_vec(),
            });
        }
        if cond.logits().len() != self.components.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.components.len()],
                got: vec![cond.logits().len()],
            });
        }
        if let Some(s) = cond.shift() {
            if s.len() != self.latent_len {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.latent_len],
                    got: vec![s.len()],
                });
            }
        }
        z.ensure_finite("z")?;
        cond.validate()
    }

    fn evaluate(&self, z: &Latent, ts: Timestep, cond: &Condition) -> Result<Evaluation> {
        self.check_inputs(z, cond)?;
        let ab = ts.alpha_bar;
        let sa = ab.sqrt();
        let sn = (1.0 - ab).max(0.0).sqrt();
        let d = self.latent_len as f64;
        let z = z.as_slice();

        let mut log_w = Vec::with_capacity(self.components.len());
        let mut terms = Vec::with_capacity(self.components.len());
        let mut var = Vec::with_capacity(self.components.len());
        let mut centers = Vec::with_capacity(self.components.len());
        for (k, c) in self.components.iter().enumerate() {
            let v = ab * c.scale * c.scale + (1.0 - ab);
            let center: Vec<f64> = match cond.shift() {
                Some(s) => c.mean.iter().zip(s).map(|(m, s)| sa * (m + s)).collect(),
                None => c.mean.iter().map(|m| sa * m).collect(),
            };
            let diff: Vec<f64> = z.iter().zip(&center).map(|(z, m)| z - m).collect();
            let sq: f64 = diff.iter().map(|x| x * x).sum();
            // softmax(logits) * weight, renormalized: the softmax normalizer
            // cancels, so the logit enters additively.
            log_w.push(cond.logits()[k] + c.weight.ln() - 0.5 * d * v.ln() - 0.5 * sq / v);
            terms.push(diff.iter().map(|x| sn * x / v).collect());
            var.push(v);
            centers.push(center);
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        let resp = unnorm.iter().map(|u| u / total).collect();
        Ok(Evaluation {
            resp,
            terms,
            var,
            centers,
        })
    }

    /// Posterior component responsibilities under the time-`t` marginals.
    pub fn responsibilities(&self, z: &Latent, ts: Timestep, cond: &Condition) -> Result<Vec<f64>> {
        Ok(self.evaluate(z, ts, cond)?.resp)
    }

    pub fn epsilon(&self, z: &Latent, ts: Timestep, cond: &Condition) -> Result<Latent> {
        let ev = self.evaluate(z, ts, cond)?;
        let mut out = vec![0.0; self.latent_len];
        for (r, term) in ev.resp.iter().zip(&ev.terms) {
            for (o, t) in out.iter_mut().zip(term) {
                *o += r * t;
            }
        }
        Latent::new(z.shape().to_vec(), out)
    }

    /// Closed-form Jacobian of ε with respect to the condition coordinates.
    ///
    /// For a logit `j`: `r_j (e_j - eps)`. For a shift coordinate `l`:
    /// `sum_k r_k (g_kl - gbar_l) e_k - delta_l sum_k r_k sqrt(ab (1 - ab)) / v_k`
    /// with `g_k = sqrt(ab) (z - center_k) / v_k` the shift-gradient of the
    /// component log-density.
    pub fn condition_jacobian(&self, z: &Latent, ts: Timestep, cond: &Condition) -> Result<ConditionJacobian> {
        let ev = self.evaluate(z, ts, cond)?;
        let n = self.latent_len;
        let eps: Vec<f64> = (0..n)
            .map(|i| ev.resp.iter().zip(&ev.terms).map(|(r, t)| r * t[i]).sum())
            .collect();
        let mut columns = Vec::with_capacity(cond.num_coords());
        for (r, term) in ev.resp.iter().zip(&ev.terms) {
            let col = term.iter().zip(&eps).map(|(e, m)| r * (e - m)).collect();
            columns.push(Latent::new(z.shape().to_vec(), col)?);
        }
        if cond.shift().is_some() {
            let ab = ts.alpha_bar;
            let sa = ab.sqrt();
            let zs = z.as_slice();
            let g: Vec<Vec<f64>> = ev
                .centers
                .iter()
                .zip(&ev.var)
                .map(|(c, v)| zs.iter().zip(c).map(|(z, m)| sa * (z - m) / v).collect())
                .collect();
            let gbar: Vec<f64> = (0..n)
                .map(|l| ev.resp.iter().zip(&g).map(|(r, g)| r * g[l]).sum())
                .collect();
            let diag: f64 = ev
                .resp
                .iter()
                .zip(&ev.var)
                .map(|(r, v)| r * (ab * (1.0 - ab)).sqrt() / v)
                .sum();
            for l in 0..n {
                let mut col = vec![0.0; n];
                for k in 0..ev.resp.len() {
                    let coef = ev.resp[k] * (g[k][l] - gbar[l]);
                    if coef != 0.0 {
                        for (c, e) in col.iter_mut().zip(&ev.terms[k]) {
                            *c += coef * e;
                        }
                    }
                }
                col[l] -= diag;
                columns.push(Latent::new(z.shape().to_vec(), col)?);
            }
        }
        Ok(ConditionJacobian { columns })
    }
}

impl EpsilonPredictor for MixtureOracle {
    fn latent_len(&self) -> usize {
        self.latent_len
    }

    fn predict(&self, z: &Latent, ts: Timestep, cond: &Condition) -> Result<Latent> {
        self.epsilon(z, ts, cond)
    }

    fn condition_gradient(&self, z: &Latent, ts: Timestep, cond: &Condition, _h: f64) -> Result<ConditionJacobian> {
        self.condition_jacobian(z, ts, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::epsilon_grad_condition;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit(dim: usize) -> MixtureOracle {
        MixtureOracle::new(vec![MixtureComponent {
            weight: 1.0,
            mean: vec![0.0; dim],
            scale: 1.0,
        }])
        .unwrap()
    }

    fn symmetric(mu: f64) -> MixtureOracle {
        MixtureOracle::new(vec![
            MixtureComponent { weight: 1.0, mean: vec![mu, -mu], scale: 0.5 },
            MixtureComponent { weight: 1.0, mean: vec![-mu, mu], scale: 0.5 },
        ])
        .unwrap()
    }

    #[test]
    fn standard_normal_data_closed_form() {
        let eps = unit(1)
            .epsilon(&Latent::from_vec(vec![2.0]), Timestep::new(10, 0.36), &Condition::null(1))
            .unwrap();
        assert!((eps.as_slice()[0] - 1.6).abs() < 1e-14);
    }

    #[test]
    fn standard_normal_data_matches_monte_carlo_regression() {
        // Independent oracle: E[eps | z] estimated from forward-noised unit
        // Gaussian samples falling in a window around z = 2.
        let ab: f64 = 0.36;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut sum, mut count) = (0.0, 0usize);
        for _ in 0..2_000_000 {
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let z = ab.sqrt() * x + (1.0 - ab).sqrt() * e;
            if (z - 2.0).abs() < 0.01 {
                sum += e;
                count += 1;
            }
        }
        let mc = sum / count as f64;
        // Standard error with ~2000 samples and conditional std 0.6 is ~0.013.
        assert!(count > 1000);
        assert!((mc - 1.6).abs() < 0.05, "mc={mc} n={count}");
    }

    #[test]
    fn vanishes_at_marginal_mean() {
        let o = MixtureOracle::new(vec![MixtureComponent { weight: 2.0, mean: vec![0.7, -1.2, 3.0], scale: 0.3 }])
            .unwrap();
        let shift = vec![0.1, 0.2, -0.3];
        let ab: f64 = 0.42;
        let z: Vec<f64> = o.components()[0].mean.iter().zip(&shift).map(|(m, s)| ab.sqrt() * (m + s)).collect();
        let eps = o
            .epsilon(&Latent::from_vec(z), Timestep::new(5, ab), &Condition::with_shift(vec![0.3], shift))
            .unwrap();
        assert!(eps.norm_inf() < 1e-15);
    }

    #[test]
    fn symmetric_pair_vanishes_at_origin() {
        let eps = symmetric(1.5)
            .epsilon(&Latent::from_vec(vec![0.0, 0.0]), Timestep::new(5, 0.5), &Condition::null(2))
            .unwrap();
        assert!(eps.norm_inf() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        let o = symmetric(1.0);
        let ts = Timestep::new(1, 0.5);
        assert!(o.epsilon(&Latent::from_vec(vec![0.0; 3]), ts, &Condition::null(2)).is_err());
        assert!(o.epsilon(&Latent::from_vec(vec![0.0; 2]), ts, &Condition::null(3)).is_err());
        assert!(MixtureOracle::new(vec![MixtureComponent { weight: 1.0, mean: vec![0.0], scale: 0.0 }]).is_err());
        assert!(MixtureOracle::new(vec![]).is_err());
    }

    #[test]
    fn logit_gradient_antisymmetric_under_swap() {
        let o = symmetric(1.0);
        let z = Latent::from_vec(vec![0.0, 0.0]);
        let j = o.condition_jacobian(&z, Timestep::new(5, 0.5), &Condition::null(2)).unwrap();
        for (a, b) in j.columns[0].as_slice().iter().zip(j.columns[1].as_slice()) {
            assert!((a + b).abs() < 1e-15);
        }
        assert!(j.columns[0].norm_inf() > 1e-3);
    }

    #[test]
    fn single_component_ignores_logits() {
        let o = unit(4);
        let z = Latent::from_vec(vec![0.3, -0.1, 2.0, 0.5]);
        let ts = Timestep::new(3, 0.7);
        let c = Condition::new(vec![1.3]);
        let fd = epsilon_grad_condition(&o, &z, ts, &c, 1e-4).unwrap();
        let an = o.condition_jacobian(&z, ts, &c).unwrap();
        assert_eq!(fd.max_abs(), 0.0);
        assert_eq!(an.max_abs(), 0.0);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 5;
        let comps = (0..3)
            .map(|_| MixtureComponent {
                weight: rng.random_range(0.5..2.0),
                mean: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                scale: rng.random_range(0.3..1.0),
            })
            .collect();
        let o = MixtureOracle::new(comps).unwrap();
        let z = Latent::from_vec((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let c = Condition::with_shift(vec![0.2, -0.4, 0.9], (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect());
        let ts = Timestep::new(7, 0.6);
        let an = o.condition_jacobian(&z, ts, &c).unwrap();
        let fd = epsilon_grad_condition(&o, &z, ts, &c, 1e-5).unwrap();
        assert_eq!(an.columns.len(), 3 + dim);
        for (a, f) in an.columns.iter().zip(&fd.columns) {
            assert!(a.max_abs_diff(f).unwrap() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn responsibilities_sum_to_one(
            z in proptest::collection::vec(-3.0f64..3.0, 2),
            l0 in -5.0f64..5.0, l1 in -5.0f64..5.0, ab in 0.01f64..0.99,
        ) {
            let r = symmetric(1.0)
                .responsibilities(&Latent::from_vec(z), Timestep::new(1, ab), &Condition::new(vec![l0, l1]))
                .unwrap();
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn translation_equivariant(
            z in proptest::collection::vec(-2.0f64..2.0, 2),
            v in proptest::collection::vec(-2.0f64..2.0, 2),
            ab in 0.05f64..0.95,
        ) {
            let o = symmetric(1.0);
            let moved = MixtureOracle::new(
                o.components()
                    .iter()
                    .map(|c| MixtureComponent {
                        mean: c.mean.iter().zip(&v).map(|(m, v)| m + v).collect(),
                        ..c.clone()
                    })
                    .collect(),
            )
            .unwrap();
            let ts = Timestep::new(1, ab);
            let c = Condition::new(vec![0.3, -0.2]);
            let zs: Vec<f64> = z.iter().zip(&v).map(|(z, v)| z + ab.sqrt() * v).collect();
            let a = o.epsilon(&Latent::from_vec(z), ts, &c).unwrap();
            let b = moved.epsilon(&Latent::from_vec(zs), ts, &c).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        }
    }
}
