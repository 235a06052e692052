//! Dual-branch proximal mutual self-attention control.
//!
//! A reconstruction branch denoises the inverted latent under the source
//! condition and captures its attention keys/values at every step. A
//! synthesis branch starts from the same latent and combines
//! `eps_null + w prox(eps_tar - eps_null)`, where both of its forward passes
//! attend over the captured features according to the configured injection
//! modes. `eps_null` is evaluated at `interp(alpha, C_src, C_null)`; `alpha = 1`
//! selects the plain null condition.

use serde::{Deserialize, Serialize};

use crate::ddim::{ddim_step, invert_trajectory, InversionMode};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::models::{AttentionFeatures, Condition, InjectionMode, TokenDenoiser};
use crate::prox::{Penalty, ThresholdSpec};
use crate::proxnpi::{guided_noise, Guided};
use crate::schedule::{NoiseSchedule, Timestep};
use crate::trajectory::{Direction, StepDiagnostics, Trajectory};

/// Which reconstruction-side pass the unconditional synthesis term reads
/// features from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CaptureCondition {
    /// Both synthesis terms query the source-conditioned reconstruction pass.
    #[default]
    Src,
    /// The unconditional term queries an extra null-conditioned pass over the
    /// reconstruction latent.
    Null,
}

impl std::str::FromStr for CaptureCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "src" => Ok(Self::Src),
            "null" => Ok(Self::Null),
            other => Err(Error::Config(format!("unknown capture condition '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchConfig {
    pub alpha: f64,
    pub injection_uncond: InjectionMode,
    pub injection_cond: InjectionMode,
    /// Injection is active from this sampling step index on (0 = first step).
    pub inject_start_step: usize,
    pub capture: CaptureCondition,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            injection_uncond: InjectionMode::Source,
            injection_cond: InjectionMode::Source,
            inject_start_step: 0,
            capture: CaptureCondition::Src,
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `(1 - alpha) C_src + alpha C_null`.
pub fn interp_condition(alpha: f64, c_src: &Condition, c_null: &Condition) -> Result<Condition> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    c_src.lerp(c_null, alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualRun {
    pub inversion: Trajectory,
    pub recon: Trajectory,
    pub synth: Trajectory,
}

#[derive(Debug, Clone, Copy)]
enum Combiner {
    /// `eps_null + w prox(eps_tar - eps_null)`.
    NullAnchored(ThresholdSpec),
    /// `eps_src + w (eps_tar - eps_src)` in both branches' synthesis.
    SourceAnchored,
}

struct ReconStep {
    next: Latent,
    eps: Latent,
    features: AttentionFeatures,
}

fn recon_step(
    denoiser: &TokenDenoiser,
    z: &Latent,
    c_src: &Condition,
    cur: Timestep,
    prev: Timestep,
) -> Result<ReconStep> {
    let (eps, features) = denoiser.forward(z, cur, c_src, InjectionMode::None, None)?;
    let next = ddim_step(z, &eps, cur, prev)?;
    Ok(ReconStep { next, eps, features })
}

/// The reconstruction branch on its own, with no consumer attached.
pub fn reconstruction_branch(
    z_t: &Latent,
    c_src: &Condition,
    denoiser: &TokenDenoiser,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    let n = schedule.num_steps();
    let mut traj = Trajectory::new(Direction::Synthesis, schedule.at(n).t, z_t.clone());
    let mut z = z_t.clone();
    for i in (1..=n).rev() {
        let step = recon_step(denoiser, &z, c_src, schedule.at(i), schedule.at(i - 1))?;
        traj.push(
            schedule.at(i - 1).t,
            step.next.clone(),
            StepDiagnostics {
                eps: Some(step.eps),
                ..Default::default()
            },
        )?;
        z = step.next;
    }
    Ok(traj)
}

#[allow(clippy::too_many_arguments)]
fn dual_branch(
    z0: &Latent,
    c_src: &Condition,
    c_tar: &Condition,
    w: f64,
    branch: &BranchConfig,
    combiner: Combiner,
    denoiser: &TokenDenoiser,
    schedule: &NoiseSchedule,
    mode: InversionMode,
) -> Result<DualRun> {
    branch.validate()?;
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::invalid(format!("guidance scale must be >= 0, got {w}")));
    }
    let c_null = Condition::null_like(c_src);
    let anchor_cond = match combiner {
        Combiner::NullAnchored(spec) => {
            spec.validate()?;
            interp_condition(branch.alpha, c_src, &c_null)?
        }
        Combiner::SourceAnchored => c_src.clone(),
    };
    let spec = match combiner {
        Combiner::NullAnchored(spec) => spec,
        Combiner::SourceAnchored => ThresholdSpec::fixed(0.0, Penalty::None),
    };

    let inversion = invert_trajectory(z0, c_src, denoiser, schedule, mode)?;
    let n = schedule.num_steps();
    let z_t = inversion.terminal().latent.clone();
    let mut recon = Trajectory::new(Direction::Synthesis, schedule.at(n).t, z_t.clone());
    let mut synth = recon.clone();
    let (mut zr, mut zs) = (z_t.clone(), z_t);

    for (k, i) in (1..=n).rev().enumerate() {
        let (cur, prev) = (schedule.at(i), schedule.at(i - 1));
        let rs = recon_step(denoiser, &zr, c_src, cur, prev)?;
        let null_features = match branch.capture {
            CaptureCondition::Src => None,
            CaptureCondition::Null => Some(denoiser.forward(&zr, cur, &c_null, InjectionMode::None, None)?.1),
        };
        let uncond_features = null_features.as_ref().unwrap_or(&rs.features);

        let active = k >= branch.inject_start_step;
        let (mode_u, mode_c) = if active {
            (branch.injection_uncond, branch.injection_cond)
        } else {
            (InjectionMode::None, InjectionMode::None)
        };
        let (eps_anchor, _) = denoiser.forward(&zs, cur, &anchor_cond, mode_u, Some(uncond_features))?;
        let (eps_tar, _) = denoiser.forward(&zs, cur, c_tar, mode_c, Some(&rs.features))?;
        let Guided { eps, mut diag, .. } = guided_noise(&eps_anchor, &eps_tar, w, &spec)?;
        let next = ddim_step(&zs, &eps, cur, prev)?;
        next.ensure_finite("synthesis latent")?;
        diag.eps = Some(eps);

        recon.push(
            prev.t,
            rs.next.clone(),
            StepDiagnostics {
                eps: Some(rs.eps),
                ..Default::default()
            },
        )?;
        synth.push(prev.t, next.clone(), diag)?;
        zr = rs.next;
        zs = next;
    }
    Ok(DualRun {
        inversion,
        recon,
        synth,
    })
}

/// Reconstruction branch under the source condition, synthesis branch
/// anchored on the (interpolated) null condition with proximal guidance.
#[allow(clippy::too_many_arguments)]
pub fn proxmasactrl_edit(
    z0: &Latent,
    c_src: &Condition,
    c_tar: &Condition,
    w: f64,
    branch: &BranchConfig,
    threshold: &ThresholdSpec,
    denoiser: &TokenDenoiser,
    schedule: &NoiseSchedule,
    mode: InversionMode,
) -> Result<DualRun> {
    dual_branch(
        z0,
        c_src,
        c_tar,
        w,
        branch,
        Combiner::NullAnchored(*threshold),
        denoiser,
        schedule,
        mode,
    )
}

/// Diagnostic variant that uses the source condition as the negative prompt
/// in the synthesis branch under feature injection.
#[allow(clippy::too_many_arguments)]
pub fn npi_with_masactrl_edit(
    z0: &Latent,
    c_src: &Condition,
    c_tar: &Condition,
    w: f64,
    branch: &BranchConfig,
    denoiser: &TokenDenoiser,
    schedule: &NoiseSchedule,
    mode: InversionMode,
) -> Result<DualRun> {
    dual_branch(
        z0,
        c_src,
        c_tar,
        w,
        branch,
        Combiner::SourceAnchored,
        denoiser,
        schedule,
        mode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DenoiserConfig;
    use crate::proxnpi::{proxnpi_edit, GuidanceConfig};

    fn setup() -> (TokenDenoiser, Latent, Condition, Condition, NoiseSchedule) {
        let model = TokenDenoiser::new(DenoiserConfig { seed: 9, ..Default::default() }).unwrap();
        let z0 = Latent::grid(16, 16, (0..256).map(|i| ((i as f64) * 0.37).sin()).collect()).unwrap();
        let s = crate::schedule::linear_beta_schedule(1000, 1e-4, 0.02).unwrap().subsample(10).unwrap();
        (model, z0, Condition::new(vec![2.0, 0.0, 0.0, 0.0]), Condition::new(vec![0.0, 2.0, 0.0, 0.0]), s)
    }

    #[test]
    fn interp_endpoints() {
        let src = Condition::with_shift(vec![2.0, -4.0], vec![1.0]);
        let null = Condition::null_like(&src);
        assert_eq!(interp_condition(1.0, &src, &null).unwrap(), null);
        assert_eq!(interp_condition(0.0, &src, &null).unwrap(), src);
        let half = interp_condition(0.5, &src, &null).unwrap();
        assert_eq!(half.coords(), vec![1.0, -2.0, 0.5]);
        assert!(interp_condition(1.5, &src, &null).is_err());
        assert!(interp_condition(0.5, &src, &Condition::null(3)).is_err());
    }

    #[test]
    fn full_quantile_collapses_to_anchor() {
        let (m, z0, c, c2, s) = setup();
        let spec = ThresholdSpec::quantile(1.0, Penalty::L0);
        let run = proxmasactrl_edit(&z0, &c, &c2, 7.5, &BranchConfig::default(), &spec, &m, &s, InversionMode::Naive)
            .unwrap();
        for step in run.synth.steps().iter().skip(1) {
            assert_eq!(step.diag.eps, step.diag.eps_anchor);
        }
    }

    #[test]
    fn identical_prompts_with_source_anchor_match_reconstruction() {
        let (m, z0, c, _, s) = setup();
        let branch = BranchConfig { alpha: 0.0, ..Default::default() };
        let spec = ThresholdSpec::default();
        let run = proxmasactrl_edit(&z0, &c, &c, 7.5, &branch, &spec, &m, &s, InversionMode::Naive).unwrap();
        assert_eq!(run.synth.max_gap(&run.recon).unwrap(), 0.0);
        let npi = npi_with_masactrl_edit(&z0, &c, &c, 7.5, &branch, &m, &s, InversionMode::Naive).unwrap();
        assert_eq!(npi.synth.max_gap(&npi.recon).unwrap(), 0.0);
    }

    #[test]
    fn no_injection_source_anchor_is_proxnpi() {
        let (m, z0, c, c2, s) = setup();
        let branch = BranchConfig {
            alpha: 0.0,
            injection_uncond: InjectionMode::None,
            injection_cond: InjectionMode::None,
            ..Default::default()
        };
        let spec = ThresholdSpec::default();
        let run = proxmasactrl_edit(&z0, &c, &c2, 7.5, &branch, &spec, &m, &s, InversionMode::Naive).unwrap();
        let cfg = GuidanceConfig { w: 7.5, threshold: spec, ..Default::default() };
        let prox = proxnpi_edit(&z0, &c, &c2, &cfg, &m, &s, InversionMode::Naive).unwrap();
        assert_eq!(run.synth.max_gap(&prox.synthesis).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_branch_is_isolated() {
        let (m, z0, c, c2, s) = setup();
        let run = proxmasactrl_edit(
            &z0,
            &c,
            &c2,
            7.5,
            &BranchConfig { capture: CaptureCondition::Null, ..Default::default() },
            &ThresholdSpec::default(),
            &m,
            &s,
            InversionMode::Naive,
        )
        .unwrap();
        let alone = reconstruction_branch(&run.inversion.terminal().latent, &c, &m, &s).unwrap();
        assert_eq!(alone, run.recon);
    }

    #[test]
    fn variants_coincide_at_unit_scale() {
        let (m, z0, c, c2, s) = setup();
        let b = BranchConfig::default();
        let a = proxmasactrl_edit(&z0, &c, &c2, 1.0, &b, &ThresholdSpec::fixed(0.0, Penalty::None), &m, &s, InversionMode::Naive)
            .unwrap();
        let n = npi_with_masactrl_edit(&z0, &c, &c2, 1.0, &b, &m, &s, InversionMode::Naive).unwrap();
        assert_eq!(a.synth.max_gap(&n.synth).unwrap(), 0.0);
    }

    #[test]
    fn injection_mode_matters_and_runs_are_deterministic() {
        let (m, z0, c, c2, s) = setup();
        let spec = ThresholdSpec::default();
        let src = BranchConfig::default();
        let none = BranchConfig { injection_uncond: InjectionMode::None, ..Default::default() };
        let a = proxmasactrl_edit(&z0, &c, &c2, 7.5, &src, &spec, &m, &s, InversionMode::Naive).unwrap();
        let b = proxmasactrl_edit(&z0, &c, &c2, 7.5, &none, &spec, &m, &s, InversionMode::Naive).unwrap();
        let again = proxmasactrl_edit(&z0, &c, &c2, 7.5, &src, &spec, &m, &s, InversionMode::Naive).unwrap();
        assert_eq!(a, again);
        assert!(a.synth.max_gap(&b.synth).unwrap() > 1e-9);
    }

    #[test]
    fn late_injection_start_disables_early_steps() {
        let (m, z0, c, c2, s) = setup();
        let spec = ThresholdSpec::default();
        let never = BranchConfig { inject_start_step: 100, ..Default::default() };
        let none = BranchConfig {
            injection_uncond: InjectionMode::None,
            injection_cond: InjectionMode::None,
            ..Default::default()
        };
        let a = proxmasactrl_edit(&z0, &c, &c2, 7.5, &never, &spec, &m, &s, InversionMode::Naive).unwrap();
        let b = proxmasactrl_edit(&z0, &c, &c2, 7.5, &none, &spec, &m, &s, InversionMode::Naive).unwrap();
        assert_eq!(a.synth, b.synth);
    }
}
