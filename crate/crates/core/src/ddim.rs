//! Deterministic DDIM sampling and inversion.
//!
//! One synthesis step maps `z_t` to
//! `sqrt(ab_prev / ab_t) z_t + sqrt(ab_prev) (sqrt(1/ab_prev - 1) - sqrt(1/ab_t - 1)) eps`
//! and the inversion step is its algebraic inverse for the same `eps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::models::{Condition, EpsilonPredictor};
use crate::schedule::{NoiseSchedule, Timestep};
use crate::trajectory::{Direction, StepDiagnostics, Trajectory};

/// How the implicit inversion step is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InversionMode {
    /// Evaluate ε at the previous (less noisy) latent.
    #[default]
    Naive,
    /// Solve `z_t = invert(z_{t-1}, eps(z_t, t))` by fixed-point iteration.
    Exact,
}

impl std::str::FromStr for InversionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "exact" => Ok(Self::Exact),
            other => Err(Error::Config(format!("unknown inversion mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            max_iters: 20,
            tol: 1e-10,
        }
    }
}

fn check_pair(from: Timestep, to: Timestep) -> Result<()> {
    if from.t <= to.t {
        return Err(Error::invalid(format!(
            "synthesis step needs t > t_prev, got {} -> {}",
            from.t, to.t
        )));
    }
    Ok(())
}

/// Synthesis step `z_t -> z_{t_prev}`.
pub fn ddim_step(z_t: &Latent, eps: &Latent, t: Timestep, t_prev: Timestep) -> Result<Latent> {
    check_pair(t, t_prev)?;
    z_t.ensure_finite("z_t")?;
    eps.ensure_finite("eps")?;
    let (a, p) = (t.alpha_bar, t_prev.alpha_bar);
    let c_z = (p / a).sqrt();
    let c_eps = p.sqrt() * ((1.0 / p - 1.0).max(0.0).sqrt() - (1.0 / a - 1.0).max(0.0).sqrt());
    z_t.lin_comb(c_z, eps, c_eps)
}

/// Inversion step `z_{t_prev} -> z_t`; exact inverse of [`ddim_step`] for a
/// shared `eps`.
pub fn ddim_invert_step(z_prev: &Latent, eps: &Latent, t: Timestep, t_prev: Timestep) -> Result<Latent> {
    check_pair(t, t_prev)?;
    z_prev.ensure_finite("z_prev")?;
    eps.ensure_finite("eps")?;
    let (a, p) = (t.alpha_bar, t_prev.alpha_bar);
    let c_z = (a / p).sqrt();
    let c_eps = a.sqrt() * ((1.0 / a - 1.0).max(0.0).sqrt() - (1.0 / p - 1.0).max(0.0).sqrt());
    z_prev.lin_comb(c_z, eps, c_eps)
}

/// Predicted clean sample `(z_t - sqrt(1 - ab) eps) / sqrt(ab)`.
pub fn predict_z0(z_t: &Latent, eps: &Latent, t: Timestep) -> Result<Latent> {
    z_t.ensure_finite("z_t")?;
    eps.ensure_finite("eps")?;
    let a = t.alpha_bar;
    z_t.lin_comb(1.0 / a.sqrt(), eps, -(1.0 / a - 1.0).max(0.0).sqrt())
}

/// Forward reparametrization `sqrt(ab) z0 + sqrt(1 - ab) eps`.
pub fn renoise(z0: &Latent, eps: &Latent, t: Timestep) -> Result<Latent> {
    let a = t.alpha_bar;
    z0.lin_comb(a.sqrt(), eps, (1.0 - a).max(0.0).sqrt())
}

pub fn invert_trajectory<P: EpsilonPredictor + ?Sized>(
    z0: &Latent,
    cond: &Condition,
    predictor: &P,
    schedule: &NoiseSchedule,
    mode: InversionMode,
) -> Result<Trajectory> {
    invert_trajectory_with(z0, cond, predictor, schedule, mode, FixedPointOptions::default())
}

/// DDIM inversion at guidance scale 1. Exact mode caches the ε of every
/// transition in the step diagnostics.
pub fn invert_trajectory_with<P: EpsilonPredictor + ?Sized>(
    z0: &Latent,
    cond: &Condition,
    predictor: &P,
    schedule: &NoiseSchedule,
    mode: InversionMode,
    opts: FixedPointOptions,
) -> Result<Trajectory> {
    z0.ensure_finite("z0")?;
    let mut traj = Trajectory::new(Direction::Inversion, schedule.at(0).t, z0.clone());
    let mut z = z0.clone();
    for i in 1..=schedule.num_steps() {
        let (prev, cur) = (schedule.at(i - 1), schedule.at(i));
        let eps_prev = predictor.predict(&z, prev, cond)?;
        let guess = ddim_invert_step(&z, &eps_prev, cur, prev)?;
        let (next, diag) = match mode {
            InversionMode::Naive => (guess, StepDiagnostics::default()),
            InversionMode::Exact => {
                let mut cand = guess;
                let mut residual = f64::INFINITY;
                let mut iters = 0;
                let mut eps = eps_prev;
                while iters < opts.max_iters {
                    iters += 1;
                    eps = predictor.predict(&cand, cur, cond)?;
                    let updated = ddim_invert_step(&z, &eps, cur, prev)?;
                    residual = updated.max_abs_diff(&cand)?;
                    cand = updated;
                    if residual <= opts.tol {
                        break;
                    }
                }
                if residual > opts.tol {
                    return Err(Error::NotConverged { t: cur.t, residual });
                }
                let diag = StepDiagnostics {
                    eps: Some(eps),
                    fixed_point_iters: Some(iters),
                    ..Default::default()
                };
                (cand, diag)
            }
        };
        traj.push(cur.t, next.clone(), diag)?;
        z = next;
    }
    Ok(traj)
}

/// Plain DDIM synthesis from `zT` under `cond`. With `cached_eps` (one per
/// transition, in inversion order) the stored noise is reused instead of
/// calling the predictor.
pub fn reconstruct<P: EpsilonPredictor + ?Sized>(
    z_t: &Latent,
    cond: &Condition,
    predictor: &P,
    schedule: &NoiseSchedule,
    cached_eps: Option<&[Latent]>,
) -> Result<Trajectory> {
    let n = schedule.num_steps();
    if let Some(c) = cached_eps {
        if c.len() != n {
            return Err(Error::invalid(format!(
                "cached eps has {} entries, schedule has {n} steps",
                c.len()
            )));
        }
    }
    let mut traj = Trajectory::new(Direction::Synthesis, schedule.at(n).t, z_t.clone());
    let mut z = z_t.clone();
    for i in (1..=n).rev() {
        let (cur, prev) = (schedule.at(i), schedule.at(i - 1));
        let eps = match cached_eps {
            Some(c) => c[i - 1].clone(),
            None => predictor.predict(&z, cur, cond)?,
        };
        let next = ddim_step(&z, &eps, cur, prev)?;
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
