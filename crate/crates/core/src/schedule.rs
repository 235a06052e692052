//! Noise schedules.
//!
//! Index convention: position 0 is the data (`alpha_bar[0]` close to 1) and
//! the last position is the most-noised latent. A sub-sampled schedule keeps
//! the original training timestep labels so predictors always see the true
//! `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

/// A single point of a schedule: the training timestep label and its
/// cumulative signal coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestep {
    pub t: usize,
    pub alpha_bar: f64,
}

impl Timestep {
    pub fn new(t: usize, alpha_bar: f64) -> Self {
        Self { t, alpha_bar }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    timesteps: Vec<usize>,
    alpha_bar: Vec<f64>,
}

/// `alpha_bar[t] = prod_{s <= t} (1 - beta_s)` with `alpha_bar[0] = 1`.
pub fn cumulative_alpha_bar(betas: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(betas.len() + 1);
    let mut acc = 1.0;
    out.push(acc);
    for b in betas {
        acc *= 1.0 - b;
        out.push(acc);
    }
    out
}

/// Standard DDPM linear-β schedule over `train_steps` steps.
pub fn linear_beta_schedule(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if train_steps < 2 {
        return Err(Error::invalid(format!("schedule needs T >= 2, got {train_steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got start={beta_start}, end={beta_end}"
        )));
    }
    let span = (train_steps - 1) as f64;
    let betas: Vec<f64> = (0..train_steps)
        .map(|s| beta_start + (beta_end - beta_start) * s as f64 / span)
        .collect();
    NoiseSchedule::from_alpha_bar(cumulative_alpha_bar(&betas))
}

impl NoiseSchedule {
    /// Schedule over timesteps `0..=T` with the given coefficients.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let timesteps = (0..alpha_bar.len()).collect();
        Self::with_timesteps(timesteps, alpha_bar)
    }

    pub fn with_timesteps(timesteps: Vec<usize>, alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || timesteps.len() != alpha_bar.len() {
            return Err(Error::invalid(
                "schedule needs at least two entries and one timestep label per entry",
            ));
        }
        if alpha_bar.iter().any(|a| !a.is_finite() || *a <= 0.0 || *a > 1.0) {
            return Err(Error::invalid("alpha_bar entries must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing"));
        }
        if timesteps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("timestep labels must be strictly increasing"));
        }
        Ok(Self {
            timesteps,
            alpha_bar,
        })
    }

    /// Number of transitions (entries minus one).
    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn alpha_bar(&self, index: usize) -> f64 {
        self.alpha_bar[index]
    }

    pub fn at(&self, index: usize) -> Timestep {
        Timestep::new(self.timesteps[index], self.alpha_bar[index])
    }

    /// Largest timestep label in the schedule.
    pub fn max_timestep(&self) -> usize {
        *self.timesteps.last().expect("non-empty schedule")
    }

    /// Evenly strided selection of `num_steps + 1` entries, always keeping the
    /// first and last positions.
    pub fn subsample(&self, num_steps: usize) -> Result<Self> {
        let total = self.num_steps();
        if num_steps < 2 || num_steps > total {
            return Err(Error::invalid(format!(
                "inference steps must be in [2, {total}], got {num_steps}"
            )));
        }
        let positions: Vec<usize> = (0..=num_steps)
            .map(|i| ((i as f64) * total as f64 / num_steps as f64).round() as usize)
            .collect();
        Self::with_timesteps(
            positions.iter().map(|&p| self.timesteps[p]).collect(),
            positions.iter().map(|&p| self.alpha_bar[p]).collect(),
        )
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        linear_beta_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .and_then(|s| s.subsample(DEFAULT_INFERENCE_STEPS))
            .expect("default schedule is valid")
    }
}
