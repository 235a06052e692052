use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ddim::InversionMode;
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::masactrl::BranchConfig;
use crate::models::{Condition, DenoiserConfig, MixtureComponent, MixtureOracle, TokenDenoiser};
use crate::nti::NtiConfig;
use crate::prox::{Penalty, ThresholdSpec};
use crate::proxnpi::GuidanceConfig;
use crate::schedule::{self, linear_beta_schedule, NoiseSchedule};

/// The bundled canonical scenario, identical to [`RunConfig::default`].
pub const CANONICAL_TOML: &str = include_str!("../../configs/canonical.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: schedule::DEFAULT_TRAIN_STEPS,
            beta_start: schedule::DEFAULT_BETA_START,
            beta_end: schedule::DEFAULT_BETA_END,
            steps: schedule::DEFAULT_INFERENCE_STEPS,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_beta_schedule(self.train_steps, self.beta_start, self.beta_end)?.subsample(self.steps)
    }
}

/// Mean image of a mixture component on the latent grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "lowercase")]
pub enum MeanPattern {
    /// `amplitude` inside a centered disc, `-amplitude` outside.
    Disc { radius: f64, amplitude: f64 },
    /// Linear ramp from `-amplitude` to `amplitude` along the columns.
    Gradient { amplitude: f64 },
    /// Checkerboard of `period`-sized cells.
    Checker { period: usize, amplitude: f64 },
    /// Horizontal stripes of `period`-row bands.
    Stripes { period: usize, amplitude: f64 },
    /// Explicit row-major values.
    Values { values: Vec<f64> },
}

impl MeanPattern {
    pub fn render(&self, height: usize, width: usize) -> Result<Vec<f64>> {
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let cell = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
            (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect()
        };
        Ok(match self {
            Self::Disc { radius, amplitude } => cell(&|r, c| {
                let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                if d <= *radius {
                    *amplitude
                } else {
                    -amplitude
                }
            }),
            Self::Gradient { amplitude } => {
                cell(&|_, c| amplitude * (2.0 * c as f64 / (width.max(2) - 1) as f64 - 1.0))
            }
            Self::Checker { period, amplitude } => {
                let p = (*period).max(1);
                cell(&|r, c| if (r / p + c / p) % 2 == 0 { *amplitude } else { -amplitude })
            }
            Self::Stripes { period, amplitude } => {
                let p = (*period).max(1);
                cell(&|r, _| if (r / p) % 2 == 0 { *amplitude } else { -amplitude })
            }
            Self::Values { values } => {
                if values.len() != height * width {
                    return Err(Error::Config(format!(
                        "explicit mean has {} values, grid needs {}",
                        values.len(),
                        height * width
                    )));
                }
                values.clone()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub scale: f64,
    #[serde(flatten)]
    pub mean: MeanPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub height: usize,
    pub width: usize,
    pub components: Vec<ComponentSpec>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            components: vec![
                ComponentSpec {
                    weight: 1.0,
                    scale: 0.5,
                    mean: MeanPattern::Disc {
                        radius: 5.0,
                        amplitude: 0.1,
                    },
                },
                ComponentSpec {
                    weight: 1.0,
                    scale: 0.55,
                    mean: MeanPattern::Gradient { amplitude: 0.1 },
                },
                ComponentSpec {
                    weight: 1.0,
                    scale: 0.45,
                    mean: MeanPattern::Checker {
                        period: 4,
                        amplitude: 0.1,
                    },
                },
            ],
        }
    }
}

impl OracleConfig {
    pub fn build(&self) -> Result<MixtureOracle> {
        let components = self
            .components
            .iter()
            .map(|c| {
                Ok(MixtureComponent {
                    weight: c.weight,
                    mean: c.mean.render(self.height, self.width)?,
                    scale: c.scale,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureOracle::new(components)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    #[default]
    Oracle,
    Attention,
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "attention" => Ok(Self::Attention),
            other => Err(Error::Config(format!("unknown predictor '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub w: f64,
    pub prox: Penalty,
    /// Mutually exclusive with `lambda`; 0.7 when neither is set.
    pub quantile: Option<f64>,
    pub lambda: Option<f64>,
    pub recon: bool,
    pub eta: f64,
    pub t_rec: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            w: g.w,
            prox: Penalty::L0,
            quantile: None,
            lambda: None,
            recon: g.recon_enabled,
            eta: g.eta,
            t_rec: g.t_rec,
        }
    }
}

impl GuidanceSection {
    pub fn threshold(&self) -> Result<ThresholdSpec> {
        let spec = match (self.quantile, self.lambda) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("quantile and lambda are mutually exclusive".into()))
            }
            (Some(q), None) => ThresholdSpec::quantile(q, self.prox),
            (None, Some(l)) => ThresholdSpec::fixed(l, self.prox),
            (None, None) => ThresholdSpec::quantile(0.7, self.prox),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn build(&self) -> Result<GuidanceConfig> {
        Ok(GuidanceConfig {
            w: self.w,
            threshold: self.threshold()?,
            recon_enabled: self.recon,
            eta: self.eta,
            t_rec: self.t_rec,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NtiSection {
    pub inner_iters: usize,
    pub lr: f64,
    pub max_halvings: usize,
    pub early_stop: f64,
    pub fd_step: f64,
    pub optimize_shift: bool,
    pub loss_tolerance: f64,
}

impl Default for NtiSection {
    fn default() -> Self {
        let n = NtiConfig::default();
        Self {
            inner_iters: n.inner_iters,
            lr: n.lr,
            max_halvings: n.max_halvings,
            early_stop: n.early_stop,
            fd_step: n.fd_step,
            optimize_shift: n.optimize_shift,
            loss_tolerance: n.loss_tolerance,
        }
    }
}

/// Everything a run needs. A fixed seed makes the run fully deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub predictor: PredictorKind,
    pub inversion: InversionMode,
    pub schedule: ScheduleConfig,
    pub oracle: OracleConfig,
    pub denoiser: DenoiserConfig,
    pub source: Condition,
    pub target: Condition,
    pub guidance: GuidanceSection,
    pub branch: BranchConfig,
    pub nti: NtiSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            predictor: PredictorKind::Oracle,
            inversion: InversionMode::Naive,
            schedule: ScheduleConfig::default(),
            oracle: OracleConfig::default(),
            denoiser: DenoiserConfig {
                cond_len: 3,
                ..Default::default()
            },
            source: Condition::new(vec![3.0, 0.0, 0.0]),
            target: Condition::new(vec![0.0, 3.0, 0.0]),
            guidance: GuidanceSection::default(),
            branch: BranchConfig::default(),
            nti: NtiSection::default(),
        }
    }
}

/// Predictor selected by a config.
pub enum Predictor {
    Oracle(MixtureOracle),
    Attention(TokenDenoiser),
}

impl Predictor {
    pub fn as_dyn(&self) -> &dyn crate::models::EpsilonPredictor {
        match self {
            Self::Oracle(o) => o,
            Self::Attention(a) => a,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config or the `config` field of a JSON run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let inner = value.get("config").cloned().unwrap_or(value);
            let cfg: Self = serde_json::from_value(inner).map_err(|e| Error::Config(e.to_string()))?;
            cfg.validate()?;
            Ok(cfg)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        let schedule = self.schedule.build().map_err(wrap)?;
        let oracle = self.oracle.build().map_err(wrap)?;
        let k = oracle.num_components();
        for (name, c) in [("source", &self.source), ("target", &self.target)] {
            c.validate().map_err(wrap)?;
            let need = match self.predictor {
                PredictorKind::Oracle => k,
                PredictorKind::Attention => self.denoiser.cond_len,
            };
            if c.logits().len() != need {
                return Err(Error::Config(format!(
                    "{name} condition has {} logits, predictor expects {need}",
                    c.logits().len()
                )));
            }
            if let Some(s) = c.shift() {
                if s.len() != self.oracle.height * self.oracle.width {
                    return Err(Error::Config(format!("{name} shift must have one value per latent component")));
                }
            }
        }
        if self.predictor == PredictorKind::Attention
            && self.denoiser.tokens * self.denoiser.embed_dim != self.oracle.height * self.oracle.width
        {
            return Err(Error::Config("denoiser tokens x embed_dim must equal the latent grid size".into()));
        }
        self.guidance.build().map_err(wrap)?.validate(&schedule).map_err(wrap)?;
        self.branch.validate().map_err(wrap)?;
        self.nti_config().validate().map_err(wrap)?;
        Ok(())
    }

    pub fn nti_config(&self) -> NtiConfig {
        NtiConfig {
            w: self.guidance.w,
            inner_iters: self.nti.inner_iters,
            lr: self.nti.lr,
            max_halvings: self.nti.max_halvings,
            early_stop: self.nti.early_stop,
            fd_step: self.nti.fd_step,
            optimize_shift: self.nti.optimize_shift,
            loss_tolerance: self.nti.loss_tolerance,
        }
    }

    pub fn build_predictor(&self) -> Result<Predictor> {
        Ok(match self.predictor {
            PredictorKind::Oracle => Predictor::Oracle(self.oracle.build()?),
            PredictorKind::Attention => Predictor::Attention(self.build_denoiser()?),
        })
    }

    pub fn build_denoiser(&self) -> Result<TokenDenoiser> {
        TokenDenoiser::new(self.denoiser.clone())
    }

    /// Source latent: a seeded draw from the oracle component the source
    /// logits select most strongly.
    pub fn source_latent(&self) -> Result<Latent> {
        let oracle = self.oracle.build()?;
        let k = self
            .source
            .logits()
            .iter()
            .enumerate()
            .take(oracle.num_components())
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        let comp = &oracle.components()[k];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let data = comp
            .mean
            .iter()
            .map(|m| {
                let n: f64 = StandardNormal.sample(&mut rng);
                m + comp.scale * n
            })
            .collect();
        Latent::grid(self.oracle.height, self.oracle.width, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_is_the_default() {
        assert_eq!(RunConfig::from_toml(CANONICAL_TOML).unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[guidance]\nquantile = 0.5\nlambda = 0.1").is_err());
        assert!(RunConfig::from_toml("[guidance]\nquantile = 1.5").is_err());
        assert!(RunConfig::from_toml("[source]\nlogits = [1.0]").is_err());
        assert!(RunConfig::from_toml("[schedule]\nsteps = 5000").is_err());
        assert!(RunConfig::from_toml("[branch]\nalpha = 2.0").is_err());
    }

    #[test]
    fn patterns_render_on_grid() {
        let d = MeanPattern::Disc { radius: 1.0, amplitude: 2.0 }.render(4, 4).unwrap();
        assert_eq!(d.len(), 16);
        assert_eq!(d[5], 2.0);
        assert_eq!(d[0], -2.0);
        let g = MeanPattern::Gradient { amplitude: 1.0 }.render(2, 3).unwrap();
        assert_eq!(g, vec![-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
        assert!(MeanPattern::Values { values: vec![0.0; 3] }.render(2, 2).is_err());
    }

    #[test]
    fn source_latent_is_seeded() {
        let cfg = RunConfig::default();
        let a = cfg.source_latent().unwrap();
        assert_eq!(a, cfg.source_latent().unwrap());
        assert_eq!(a.shape(), &[16, 16]);
        let other = RunConfig { seed: 1, ..cfg };
        assert_ne!(a, other.source_latent().unwrap());
    }
}
