//! Null-condition optimization baseline.
//!
//! Walking down the schedule, each step optimizes its own unconditional
//! condition so that the guided DDIM step from the tracked latent lands on
//! the scale-1 inversion latent of the previous timestep. Gradients come from
//! the predictor's condition Jacobian (closed form for the mixture oracle,
//! finite differences otherwise), chained through the linear DDIM update.
//! Besides the logits, the null condition can carry a per-component shift,
//! giving the optimizer one free coordinate per latent component.

use serde::{Deserialize, Serialize};

use crate::ddim::{ddim_step, invert_trajectory, InversionMode};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::models::{Condition, EpsilonPredictor};
use crate::proxnpi::cfg_combine;
use crate::schedule::{NoiseSchedule, Timestep};
use crate::trajectory::{Direction, StepDiagnostics, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NtiConfig {
    pub w: f64,
    pub inner_iters: usize,
    pub lr: f64,
    pub max_halvings: usize,
    /// Stop optimizing a step once its loss falls below this.
    pub early_stop: f64,
    pub fd_step: f64,
    /// Optimize a per-component shift alongside the logits.
    pub optimize_shift: bool,
    /// Steps ending above this loss are reported, not rejected.
    pub loss_tolerance: f64,
}

impl Default for NtiConfig {
    fn default() -> Self {
        Self {
            w: 7.5,
            inner_iters: 10,
            lr: 0.1,
            max_halvings: 10,
            early_stop: 1e-8,
            fd_step: 1e-5,
            optimize_shift: true,
            loss_tolerance: 1e-2,
        }
    }
}

impl NtiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 1.0 && self.w.is_finite()) {
            return Err(Error::invalid(format!("null optimization needs w >= 1, got {}", self.w)));
        }
        if self.inner_iters == 0 {
            return Err(Error::invalid("inner_iters must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::invalid("fd_step must be positive"));
        }
        Ok(())
    }
}

/// One optimized null condition per sampling step, ordered from the noisiest
/// step down.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSchedule {
    /// Timestep each condition is used at.
    pub timesteps: Vec<usize>,
    pub conditions: Vec<Condition>,
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
    /// Accepted loss values per step, starting with the initial loss.
    pub loss_histories: Vec<Vec<f64>>,
}

impl NullSchedule {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtiResult {
    pub inversion: Trajectory,
    pub nulls: NullSchedule,
    /// The tracked latents produced with the optimized conditions.
    pub tracked: Trajectory,
    /// Timesteps whose final loss exceeded the configured tolerance.
    pub flagged: Vec<usize>,
}

/// One guided DDIM step with an explicit unconditional condition.
fn guided_step<P: EpsilonPredictor + ?Sized>(
    predictor: &P,
    z: &Latent,
    eps_cond: &Latent,
    uncond: &Condition,
    w: f64,
    cur: Timestep,
    prev: Timestep,
) -> Result<(Latent, Latent)> {
    let eps_uncond = predictor.predict(z, cur, uncond)?;
    let eps = cfg_combine(&eps_uncond, eps_cond, w)?;
    Ok((ddim_step(z, &eps, cur, prev)?, eps))
}

fn sq_dist(a: &Latent, b: &Latent) -> Result<f64> {
    let d = a.dist_l2(b)?;
    Ok(d * d)
}

pub fn nti_optimize<P: EpsilonPredictor + ?Sized>(
    z0: &Latent,
    cond: &Condition,
    cfg: &NtiConfig,
    predictor: &P,
    schedule: &NoiseSchedule,
    mode: InversionMode,
) -> Result<NtiResult> {
    let inversion = invert_trajectory(z0, cond, predictor, schedule, mode)?;
    nti_optimize_from(inversion, cond, cfg, predictor, schedule)
}

/// Optimize the null schedule against an existing scale-1 inversion.
pub fn nti_optimize_from<P: EpsilonPredictor + ?Sized>(
    inversion: Trajectory,
    cond: &Condition,
    cfg: &NtiConfig,
    predictor: &P,
    schedule: &NoiseSchedule,
) -> Result<NtiResult> {
    cfg.validate()?;
    let n = schedule.num_steps();
    if inversion.len() != n + 1 || inversion.direction() != Direction::Inversion {
        return Err(Error::invalid("inversion does not match the schedule"));
    }
    let pivots: Vec<&Latent> = inversion.latents().collect();
    let mut tracked = Trajectory::new(Direction::Synthesis, schedule.at(n).t, pivots[n].clone());
    let mut nulls = NullSchedule {
        timesteps: Vec::with_capacity(n),
        conditions: Vec::with_capacity(n),
        initial_losses: Vec::with_capacity(n),
        final_losses: Vec::with_capacity(n),
        loss_histories: Vec::with_capacity(n),
    };
    let mut flagged = Vec::new();
    let mut z = pivots[n].clone();
    let mut null = Condition::null_like(cond);
    if cfg.optimize_shift && null.shift().is_none() {
        null = Condition::with_shift(null.logits().to_vec(), vec![0.0; z.len()]);
    }

    for i in (1..=n).rev() {
        let (cur, prev) = (schedule.at(i), schedule.at(i - 1));
        let target = pivots[i - 1];
        let eps_cond = predictor.predict(&z, cur, cond)?;
        // d z_prev / d eps for the DDIM update.
        let c_eps = ddim_step(&Latent::zeros(&[1]), &Latent::filled(&[1], 1.0), cur, prev)?.as_slice()[0];

        let loss_of = |c: &Condition| -> Result<f64> {
            let (next, _) = guided_step(predictor, &z, &eps_cond, c, cfg.w, cur, prev)?;
            sq_dist(&next, target)
        };
        let mut loss = loss_of(&null)?;
        let mut history = vec![loss];
        for _ in 0..cfg.inner_iters {
            if loss < cfg.early_stop {
                break;
            }
            let (next, _) = guided_step(predictor, &z, &eps_cond, &null, cfg.w, cur, prev)?;
            let residual = next.sub(target)?;
            let jac = predictor.condition_gradient(&z, cur, &null, cfg.fd_step)?;
            let scale = 2.0 * c_eps * (1.0 - cfg.w);
            let grad: Vec<f64> = jac.transpose_apply(&residual)?.into_iter().map(|g| scale * g).collect();
            if grad.iter().all(|g| *g == 0.0) {
                break;
            }
            let base = null.coords();
            let mut step = cfg.lr;
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let cand_coords: Vec<f64> = base.iter().zip(&grad).map(|(c, g)| c - step * g).collect();
                let cand = null.with_coords(&cand_coords)?;
                let l = loss_of(&cand)?;
                if l < loss {
                    accepted = Some((cand, l));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((c, l)) => {
                    null = c;
                    loss = l;
                    history.push(l);
                }
                None => break,
            }
        }
        if loss > cfg.loss_tolerance {
            flagged.push(cur.t);
        }

        let (next, eps) = guided_step(predictor, &z, &eps_cond, &null, cfg.w, cur, prev)?;
        next.ensure_finite("tracked latent")?;
        tracked.push(
            prev.t,
            next.clone(),
            StepDiagnostics {
                eps: Some(eps),
                ..Default::default()
            },
        )?;
        nulls.timesteps.push(cur.t);
        nulls.conditions.push(null.clone());
        nulls.initial_losses.push(history[0]);
        nulls.final_losses.push(loss);
        nulls.loss_histories.push(history);
        z = next;
    }

    Ok(NtiResult {
        inversion,
        nulls,
        tracked,
        flagged,
    })
}

/// Guided sampling with a per-step unconditional condition.
pub fn nti_edit<P: EpsilonPredictor + ?Sized>(
    z_t: &Latent,
    c_tar: &Condition,
    nulls: &NullSchedule,
    w: f64,
    predictor: &P,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    let n = schedule.num_steps();
    if nulls.len() != n {
        return Err(Error::invalid(format!(
            "null schedule has {} entries, sampling schedule has {n} steps",
            nulls.len()
        )));
    }
    let expected: Vec<usize> = (1..=n).rev().map(|i| schedule.timesteps()[i]).collect();
    if nulls.timesteps != expected {
        return Err(Error::invalid("null schedule timesteps do not match the sampling schedule"));
    }
    let mut traj = Trajectory::new(Direction::Synthesis, schedule.at(n).t, z_t.clone());
    let mut z = z_t.clone();
    for (k, i) in (1..=n).rev().enumerate() {
        let (cur, prev) = (schedule.at(i), schedule.at(i - 1));
        let eps_cond = predictor.predict(&z, cur, c_tar)?;
        let (next, eps) = guided_step(predictor, &z, &eps_cond, &nulls.conditions[k], w, cur, prev)?;
        next.ensure_finite("edited latent")?;
        traj.push(
            prev.t,
            next.clone(),
            StepDiagnostics {
                eps: Some(eps),
                ..Default::default()
            },
        )?;
        z = next;
    }
    Ok(traj)
}

/// Classifier-free guided sampling with one fixed unconditional condition.
pub fn cfg_sample<P: EpsilonPredictor + ?Sized>(
    z_t: &Latent,
    uncond: &Condition,
    cond: &Condition,
    w: f64,
    predictor: &P,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    let n = schedule.num_steps();
    let fixed = NullSchedule {
        timesteps: (1..=n).rev().map(|i| schedule.timesteps()[i]).collect(),
        conditions: vec![uncond.clone(); n],
        initial_losses: vec![],
        final_losses: vec![],
        loss_histories: vec![],
    };
    nti_edit(z_t, cond, &fixed, w, predictor, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{MixtureComponent, MixtureOracle};
    use crate::proxnpi::npi_edit;

    fn scenario() -> (MixtureOracle, Latent, Condition, Condition) {
        let dim = 8;
        let a: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.9).sin()).collect();
        let b: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.4).cos()).collect();
        let o = MixtureOracle::new(vec![
            MixtureComponent { weight: 1.0, mean: a.clone(), scale: 0.5 },
            MixtureComponent { weight: 1.0, mean: b, scale: 0.5 },
        ])
        .unwrap();
        let z0 = Latent::from_vec(a.iter().enumerate().map(|(i, m)| m + 0.2 * (i as f64 * 1.3).cos()).collect());
        (o, z0, Condition::new(vec![3.0, 0.0]), Condition::new(vec![0.0, 3.0]))
    }

    fn schedule() -> NoiseSchedule {
        crate::schedule::linear_beta_schedule(1000, 1e-4, 0.02).unwrap().subsample(20).unwrap()
    }

    #[test]
    fn unit_scale_is_a_no_op() {
        let (o, z0, c, _) = scenario();
        let s = schedule();
        let cfg = NtiConfig { w: 1.0, ..Default::default() };
        let res = nti_optimize(&z0, &c, &cfg, &o, &s, InversionMode::Exact).unwrap();
        for (k, cond) in res.nulls.conditions.iter().enumerate() {
            assert!(cond.coords().iter().all(|c| *c == 0.0));
            assert!(res.nulls.initial_losses[k] < 1e-15);
        }
        assert!(res.tracked.max_gap(&res.inversion).unwrap() < 1e-9);
    }

    #[test]
    fn losses_never_increase_and_tracking_improves() {
        let (o, z0, c, _) = scenario();
        let s = schedule();
        let cfg = NtiConfig::default();
        let res = nti_optimize(&z0, &c, &cfg, &o, &s, InversionMode::Naive).unwrap();
        for h in &res.nulls.loss_histories {
            assert!(h.windows(2).all(|w| w[1] <= w[0]));
        }
        for (a, b) in res.nulls.final_losses.iter().zip(&res.nulls.initial_losses) {
            assert!(a <= b);
        }
        let plain = cfg_sample(&res.inversion.terminal().latent, &Condition::null(2), &c, cfg.w, &o, &s).unwrap();
        let nti_mse = res.tracked.terminal().latent.mse(&z0).unwrap();
        let plain_mse = plain.terminal().latent.mse(&z0).unwrap();
        assert!(nti_mse < plain_mse, "nti {nti_mse} plain {plain_mse}");
    }

    #[test]
    fn edit_with_source_reproduces_tracking() {
        let (o, z0, c, _) = scenario();
        let s = schedule();
        let cfg = NtiConfig { inner_iters: 3, ..Default::default() };
        let res = nti_optimize(&z0, &c, &cfg, &o, &s, InversionMode::Naive).unwrap();
        let edit = nti_edit(&res.inversion.terminal().latent, &c, &res.nulls, cfg.w, &o, &s).unwrap();
        assert_eq!(edit, res.tracked);
    }

    #[test]
    fn source_as_null_matches_npi() {
        let (o, z0, c, c2) = scenario();
        let s = schedule();
        let npi = npi_edit(&z0, &c, &c2, 7.5, &o, &s, InversionMode::Naive).unwrap();
        let nulls = NullSchedule {
            timesteps: (1..=s.num_steps()).rev().map(|i| s.timesteps()[i]).collect(),
            conditions: vec![c.clone(); s.num_steps()],
            initial_losses: vec![],
            final_losses: vec![],
            loss_histories: vec![],
        };
        let edit = nti_edit(&npi.inversion.terminal().latent, &c2, &nulls, 7.5, &o, &s).unwrap();
        assert_eq!(edit.max_gap(&npi.synthesis).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (o, z0, c, _) = scenario();
        let s = schedule();
        for cfg in [
            NtiConfig { w: 0.5, ..Default::default() },
            NtiConfig { inner_iters: 0, ..Default::default() },
            NtiConfig { lr: 0.0, ..Default::default() },
        ] {
            assert!(nti_optimize(&z0, &c, &cfg, &o, &s, InversionMode::Naive).is_err());
        }
        let res = nti_optimize(&z0, &c, &NtiConfig { inner_iters: 1, ..Default::default() }, &o, &s, InversionMode::Naive)
            .unwrap();
        let other = crate::schedule::linear_beta_schedule(1000, 1e-4, 0.02).unwrap().subsample(10).unwrap();
        assert!(nti_edit(&z0, &c, &res.nulls, 7.5, &o, &other).is_err());
    }
}
