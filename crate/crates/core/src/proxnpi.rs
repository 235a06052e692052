//! Classifier-free guidance, negative-prompt inversion and proximal
//! negative-prompt inversion with reconstruction guidance.
//!
//! Every editor first inverts the source latent with the source condition at
//! guidance scale 1, then samples back down with
//! `eps = eps_src + w * prox(eps_tar - eps_src)`. Negative-prompt inversion is
//! the identity prox. When reconstruction guidance is active for a step the
//! predicted clean sample is pulled toward the source latent on the
//! unedited mask before re-noising; otherwise the step is the plain DDIM
//! update, which equals predict-then-renoise algebraically.

use serde::{Deserialize, Serialize};

use crate::ddim::{ddim_step, invert_trajectory, predict_z0, renoise, InversionMode};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::models::{Condition, EpsilonPredictor};
use crate::prox::{prox_apply, EditMask, Penalty, ThresholdSpec};
use crate::schedule::NoiseSchedule;
use crate::trajectory::{Direction, StepDiagnostics, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub threshold: ThresholdSpec,
    pub recon_enabled: bool,
    pub eta: f64,
    /// Guidance is applied at steps whose timestep is below this value.
    pub t_rec: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 7.5,
            threshold: ThresholdSpec::default(),
            recon_enabled: false,
            eta: 0.1,
            t_rec: 400,
        }
    }
}

impl GuidanceConfig {
    /// Plain negative-prompt inversion at scale `w`.
    pub fn npi(w: f64) -> Self {
        Self {
            w,
            threshold: ThresholdSpec::fixed(0.0, Penalty::None),
            recon_enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::invalid(format!("guidance scale must be >= 0, got {}", self.w)));
        }
        self.threshold.validate()?;
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.recon_enabled && (self.t_rec == 0 || self.t_rec > schedule.max_timestep()) {
            return Err(Error::invalid(format!(
                "t_rec must lie in [1, {}], got {}",
                schedule.max_timestep(),
                self.t_rec
            )));
        }
        Ok(())
    }
}

/// `eps_uncond + w (eps_cond - eps_uncond)`. Returns `eps_cond` exactly at
/// `w = 1`.
pub fn cfg_combine(eps_uncond: &Latent, eps_cond: &Latent, w: f64) -> Result<Latent> {
    eps_uncond.check_same_shape(eps_cond)?;
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| u + w * (c - u))
}

/// `z0_hat - eta M (z0_hat - z0)`, evaluated as a convex combination so that
/// `eta = 1` returns `z0` and unmasked components are untouched bit-for-bit.
pub fn reconstruction_guidance(z0_hat: &Latent, z0: &Latent, mask: &EditMask, eta: f64) -> Result<Latent> {
    z0_hat.check_same_shape(z0)?;
    mask.check_matches(z0_hat)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
    }
    let data = z0_hat
        .as_slice()
        .iter()
        .zip(z0.as_slice())
        .zip(mask.as_slice())
        .map(|((&a, &b), &m)| if m { (1.0 - eta) * a + eta * b } else { a })
        .collect();
    Latent::new(z0_hat.shape().to_vec(), data)
}

/// Inversion plus the editing trajectory that starts from its terminal
/// latent.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRun {
    pub inversion: Trajectory,
    pub synthesis: Trajectory,
}

/// Combined noise `anchor + w prox(target - anchor)` with its diagnostics.
pub(crate) struct Guided {
    pub eps: Latent,
    pub diag: StepDiagnostics,
    pub mask: EditMask,
}

pub(crate) fn guided_noise(anchor: &Latent, target: &Latent, w: f64, spec: &ThresholdSpec) -> Result<Guided> {
    let diff = target.sub(anchor)?;
    let prox = prox_apply(&diff, spec)?;
    let eps = match spec.penalty {
        Penalty::None => cfg_combine(anchor, target, w)?,
        _ => anchor.lin_comb(1.0, &prox.value, w)?,
    };
    let diag = StepDiagnostics {
        eps_anchor: Some(anchor.clone()),
        effective_lambda: Some(prox.lambda),
        clamp_fraction: Some(prox.clamp_fraction),
        mask: Some(prox.mask.clone()),
        guidance_norm: Some(diff.norm_l2()),
        prox_norm: Some(prox.value.norm_l2()),
        ..Default::default()
    };
    Ok(Guided {
        eps,
        diag,
        mask: prox.mask,
    })
}

pub fn npi_edit<P: EpsilonPredictor + ?Sized>(
    z0: &Latent,
    c_src: &Condition,
    c_tar: &Condition,
    w: f64,
    predictor: &P,
    schedule: &NoiseSchedule,
    mode: InversionMode,
) -> Result<EditRun> {
    proxnpi_edit(z0, c_src, c_tar, &GuidanceConfig::npi(w), predictor, schedule, mode)
}

pub fn proxnpi_edit<P: EpsilonPredictor + ?Sized>(
    z0: &Latent,
    c_src: &Condition,
    c_tar: &Condition,
    cfg: &GuidanceConfig,
    predictor: &P,
    schedule: &NoiseSchedule,
    mode: InversionMode,
) -> Result<EditRun> {
    cfg.validate(schedule)?;
    let inversion = invert_trajectory(z0, c_src, predictor, schedule, mode)?;
    let synthesis = proxnpi_sample(&inversion.terminal().latent, z0, c_src, c_tar, cfg, predictor, schedule)?;
    Ok(EditRun {
        inversion,
        synthesis,
    })
}

/// The sampling half of the proximal editor, starting from an already
/// inverted latent `z_t`.
pub fn proxnpi_sample<P: EpsilonPredictor + ?Sized>(
    z_t: &Latent,
    z0: &Latent,
    c_src: &Condition,
    c_tar: &Condition,
    cfg: &GuidanceConfig,
    predictor: &P,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    cfg.validate(schedule)?;
    z_t.check_same_shape(z0)?;
    let n = schedule.num_steps();
    let mut traj = Trajectory::new(Direction::Synthesis, schedule.at(n).t, z_t.clone());
    let mut z = z_t.clone();
    for i in (1..=n).rev() {
        let (cur, prev) = (schedule.at(i), schedule.at(i - 1));
        let eps_src = predictor.predict(&z, cur, c_src)?;
        let eps_tar = predictor.predict(&z, cur, c_tar)?;
        let Guided { eps, mut diag, mask } = guided_noise(&eps_src, &eps_tar, cfg.w, &cfg.threshold)?;
        let z0_hat = predict_z0(&z, &eps, cur)?;
        let apply = cfg.recon_enabled && cur.t < cfg.t_rec;
        let (next, z0_pred) = if apply {
            let guided = reconstruction_guidance(&z0_hat, z0, &mask, cfg.eta)?;
            (renoise(&guided, &eps, prev)?, guided)
        } else {
            (ddim_step(&z, &eps, cur, prev)?, z0_hat)
        };
        next.ensure_finite("edited latent")?;
        diag.eps = Some(eps);
        diag.z0_pred = Some(z0_pred);
        diag.recon_applied = apply;
        traj.push(prev.t, next.clone(), diag)?;
        z = next;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddim::reconstruct;
    use crate::models::{MixtureComponent, MixtureOracle};
    use crate::prox::Threshold;

    fn lat(v: &[f64]) -> Latent {
        Latent::from_vec(v.to_vec())
    }

    fn scenario() -> (MixtureOracle, Latent, Condition, Condition) {
        let dim = 16;
        let a: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..dim).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let o = MixtureOracle::new(vec![
            MixtureComponent { weight: 1.0, mean: a.clone(), scale: 0.4 },
            MixtureComponent { weight: 1.0, mean: b, scale: 0.4 },
        ])
        .unwrap();
        let z0 = Latent::from_vec(a.iter().enumerate().map(|(i, m)| m + 0.1 * (i as f64).cos()).collect());
        (o, z0, Condition::new(vec![4.0, 0.0]), Condition::new(vec![0.0, 4.0]))
    }

    #[test]
    fn cfg_combine_cases() {
        assert_eq!(cfg_combine(&lat(&[0.0, 0.0]), &lat(&[1.0, -1.0]), 2.0).unwrap().as_slice(), &[2.0, -2.0]);
        let c = lat(&[0.1, 0.7]);
        assert_eq!(cfg_combine(&lat(&[9.0, -3.3]), &c, 1.0).unwrap(), c);
        for w in [0.0, 2.0, 7.5, 15.0] {
            assert_eq!(cfg_combine(&c, &c, w).unwrap(), c);
        }
        assert!(cfg_combine(&lat(&[0.0]), &c, 2.0).is_err());
    }

    #[test]
    fn reconstruction_guidance_cases() {
        let z0 = lat(&[0.3, -0.2]);
        let hat = lat(&[1.0, 2.0]);
        let all = EditMask::all(&[2], true);
        assert_eq!(reconstruction_guidance(&hat, &z0, &all, 1.0).unwrap(), z0);
        assert_eq!(reconstruction_guidance(&hat, &z0, &all, 0.0).unwrap(), hat);
        let m = EditMask::new(vec![2], vec![true, false]).unwrap();
        let out = reconstruction_guidance(&hat, &lat(&[0.0, 0.0]), &m, 0.5).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 2.0]);
        let once = reconstruction_guidance(&hat, &z0, &m, 1.0).unwrap();
        assert_eq!(reconstruction_guidance(&once, &z0, &m, 1.0).unwrap(), once);
        assert!(reconstruction_guidance(&hat, &z0, &m, 1.5).is_err());
        assert!(reconstruction_guidance(&hat, &lat(&[0.0]), &m, 0.5).is_err());
    }

    #[test]
    fn identical_prompts_reduce_to_reconstruction() {
        let (o, z0, c, _) = scenario();
        let s = NoiseSchedule::default();
        for w in [1.0, 2.0, 7.5, 15.0] {
            let run = npi_edit(&z0, &c, &c, w, &o, &s, InversionMode::Naive).unwrap();
            let rec = reconstruct(&run.inversion.terminal().latent, &c, &o, &s, None).unwrap();
            assert_eq!(run.synthesis.max_gap(&rec).unwrap(), 0.0);
            let cfg = GuidanceConfig { w, ..Default::default() };
            let prox = proxnpi_edit(&z0, &c, &c, &cfg, &o, &s, InversionMode::Naive).unwrap();
            assert_eq!(prox.synthesis.max_gap(&rec).unwrap(), 0.0);
        }
    }

    #[test]
    fn unit_scale_npi_is_conditional_sampling() {
        let (o, z0, c, c2) = scenario();
        let s = NoiseSchedule::default();
        let run = npi_edit(&z0, &c, &c2, 1.0, &o, &s, InversionMode::Naive).unwrap();
        let plain = reconstruct(&run.inversion.terminal().latent, &c2, &o, &s, None).unwrap();
        assert_eq!(run.synthesis.max_gap(&plain).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_thresholds() {
        let (o, z0, c, c2) = scenario();
        let s = NoiseSchedule::default();
        let full = GuidanceConfig { threshold: ThresholdSpec::quantile(1.0, Penalty::L0), ..Default::default() };
        let run = proxnpi_edit(&z0, &c, &c2, &full, &o, &s, InversionMode::Naive).unwrap();
        let rec = reconstruct(&run.inversion.terminal().latent, &c, &o, &s, None).unwrap();
        assert!(run.synthesis.max_gap(&rec).unwrap() <= 1e-12);

        let zero = GuidanceConfig { threshold: ThresholdSpec::fixed(0.0, Penalty::L0), ..Default::default() };
        let run = proxnpi_edit(&z0, &c, &c2, &zero, &o, &s, InversionMode::Naive).unwrap();
        let npi = npi_edit(&z0, &c, &c2, 7.5, &o, &s, InversionMode::Naive).unwrap();
        assert!(run.synthesis.max_gap(&npi.synthesis).unwrap() <= 1e-12);
    }

    #[test]
    fn stronger_guidance_moves_toward_target() {
        // Target with neutral logits in 256 dimensions: at w = 1 the inverted
        // latent still carries enough of the source to stay with component A,
        // so the edit needs guidance amplification to reach B.
        let dim = 256;
        let a: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..dim).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let o = MixtureOracle::new(vec![
            MixtureComponent { weight: 1.0, mean: a.clone(), scale: 0.4 },
            MixtureComponent { weight: 1.0, mean: b.clone(), scale: 0.4 },
        ])
        .unwrap();
        let z0 = Latent::from_vec(a.iter().enumerate().map(|(i, m)| m + 0.1 * (i as f64).cos()).collect());
        let (c, c2) = (Condition::new(vec![4.0, 0.0]), Condition::new(vec![0.0, 0.0]));
        let s = NoiseSchedule::default();
        let target = Latent::from_vec(b);
        let weak = npi_edit(&z0, &c, &c2, 1.0, &o, &s, InversionMode::Naive).unwrap();
        let strong = npi_edit(&z0, &c, &c2, 7.5, &o, &s, InversionMode::Naive).unwrap();
        let dw = weak.synthesis.terminal().latent.dist_l2(&target).unwrap();
        let ds = strong.synthesis.terminal().latent.dist_l2(&target).unwrap();
        assert!(ds < dw, "strong {ds} weak {dw}");
    }

    #[test]
    fn full_replacement_restores_source() {
        let (o, z0, c, c2) = scenario();
        let s = NoiseSchedule::default();
        let cfg = GuidanceConfig {
            threshold: ThresholdSpec::quantile(1.0, Penalty::L0),
            recon_enabled: true,
            eta: 1.0,
            t_rec: 1000,
            ..Default::default()
        };
        let run = proxnpi_edit(&z0, &c, &c2, &cfg, &o, &s, InversionMode::Exact).unwrap();
        for step in run.synthesis.steps().iter().skip(1) {
            if step.diag.recon_applied {
                assert_eq!(step.diag.z0_pred.as_ref().unwrap(), &z0);
            }
        }
        assert!(run.synthesis.terminal().latent.max_abs_diff(&z0).unwrap() <= 1e-10);
    }

    #[test]
    fn rejects_bad_configs() {
        let s = NoiseSchedule::default();
        let bad = [
            GuidanceConfig { eta: 1.5, ..Default::default() },
            GuidanceConfig { w: -1.0, ..Default::default() },
            GuidanceConfig { recon_enabled: true, t_rec: 5000, ..Default::default() },
            GuidanceConfig { threshold: ThresholdSpec { threshold: Threshold::Quantile(2.0), penalty: Penalty::L1 }, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate(&s).is_err(), "{cfg:?}");
        }
    }
}
