use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::prox::EditMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Increasing timesteps, data to noise.
    Inversion,
    /// Decreasing timesteps, noise to data.
    Synthesis,
}

/// Per-step diagnostics. Fields that a given sampler does not produce stay
/// `None`. They are attached to the entry a step produced; the first entry
/// of a trajectory carries none.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepDiagnostics {
    /// ε used for the transition that produced this entry.
    pub eps: Option<Latent>,
    /// Anchor noise of the guided combination (ε_src, or ε_null for the
    /// dual-branch synthesis).
    pub eps_anchor: Option<Latent>,
    pub effective_lambda: Option<f64>,
    pub clamp_fraction: Option<f64>,
    pub mask: Option<EditMask>,
    /// `||eps_tar - eps_anchor||_2`.
    pub guidance_norm: Option<f64>,
    /// `||prox(eps_tar - eps_anchor)||_2`.
    pub prox_norm: Option<f64>,
    /// Predicted clean sample, after reconstruction guidance when applied.
    pub z0_pred: Option<Latent>,
    pub recon_applied: bool,
    /// Fixed-point iterations used by exact inversion.
    pub fixed_point_iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub latent: Latent,
    pub diag: StepDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    direction: Direction,
    steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn new(direction: Direction, t: usize, start: Latent) -> Self {
        Self {
            direction,
            steps: vec![TrajectoryStep {
                t,
                latent: start,
                diag: StepDiagnostics::default(),
            }],
        }
    }

    pub fn push(&mut self, t: usize, latent: Latent, diag: StepDiagnostics) -> Result<()> {
        let last = self.steps.last().expect("trajectory is never empty").t;
        let ok = match self.direction {
            Direction::Inversion => t > last,
            Direction::Synthesis => t < last,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "timestep {t} breaks the {:?} ordering after {last}",
                self.direction
            )));
        }
        self.steps.push(TrajectoryStep { t, latent, diag });
        Ok(())
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn steps(&self) -> &[TrajectoryStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn first(&self) -> &TrajectoryStep {
        &self.steps[0]
    }

    pub fn terminal(&self) -> &TrajectoryStep {
        self.steps.last().expect("trajectory is never empty")
    }

    pub fn latents(&self) -> impl Iterator<Item = &Latent> {
        self.steps.iter().map(|s| &s.latent)
    }

    /// Cached ε per transition in step order, if every transition stored one.
    pub fn cached_eps(&self) -> Option<Vec<Latent>> {
        self.steps[1..].iter().map(|s| s.diag.eps.clone()).collect()
    }

    /// Same timesteps, any direction: entries are matched by timestep.
    fn aligned<'a>(&'a self, other: &'a Trajectory) -> Result<Vec<(&'a TrajectoryStep, &'a TrajectoryStep)>> {
        if self.len() != other.len() {
            return Err(Error::invalid(format!(
                "trajectory lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let flip = self.direction != other.direction;
        self.steps
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let b = if flip { &other.steps[other.len() - 1 - i] } else { &other.steps[i] };
                if a.t != b.t {
                    return Err(Error::invalid(format!("timesteps differ: {} vs {}", a.t, b.t)));
                }
                Ok((a, b))
            })
            .collect()
    }

    /// Per-entry Euclidean distance to another trajectory over the same
    /// timesteps, in this trajectory's order.
    pub fn divergence(&self, other: &Trajectory) -> Result<Vec<f64>> {
        self.aligned(other)?
            .into_iter()
            .map(|(a, b)| a.latent.dist_l2(&b.latent))
            .collect()
    }

    /// Largest componentwise gap over all entries.
    pub fn max_gap(&self, other: &Trajectory) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (a, b) in self.aligned(other)? {
            worst = worst.max(a.latent.max_abs_diff(&b.latent)?);
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enforces_ordering() {
        let mut tr = Trajectory::new(Direction::Synthesis, 10, Latent::from_vec(vec![0.0]));
        tr.push(5, Latent::from_vec(vec![1.0]), StepDiagnostics::default()).unwrap();
        assert!(tr.push(5, Latent::from_vec(vec![1.0]), StepDiagnostics::default()).is_err());
        let mut inv = Trajectory::new(Direction::Inversion, 0, Latent::from_vec(vec![0.0]));
        assert!(inv.push(0, Latent::from_vec(vec![1.0]), StepDiagnostics::default()).is_err());
    }

    #[test]
    fn divergence_aligns_directions() {
        let mut inv = Trajectory::new(Direction::Inversion, 0, Latent::from_vec(vec![0.0]));
        inv.push(5, Latent::from_vec(vec![2.0]), StepDiagnostics::default()).unwrap();
        let mut syn = Trajectory::new(Direction::Synthesis, 5, Latent::from_vec(vec![2.0]));
        syn.push(0, Latent::from_vec(vec![0.5]), StepDiagnostics::default()).unwrap();
        assert_eq!(syn.divergence(&inv).unwrap(), vec![0.0, 0.5]);
        assert_eq!(syn.max_gap(&inv).unwrap(), 0.5);
    }
}
