//! Proximal operators, dynamic quantile thresholds and edit masks.
//!
//! The resolved threshold `lambda` is used directly as the comparison
//! threshold for both penalties and for the mask: soft thresholding shrinks
//! by `lambda`, hard thresholding keeps components with `|x| > lambda`, and
//! the mask marks `|x| <= lambda` as unedited. The hard-thresholding prox of
//! `0.5 (z - x)^2 + mu 1[z != 0]` corresponds to `lambda = sqrt(2 mu)`, see
//! [`hard_threshold_for_l0_weight`]. Boundary ties `|x| = lambda` are zeroed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    /// Hard thresholding.
    #[default]
    L0,
    /// Soft thresholding.
    L1,
    /// Identity; the mask is still computed.
    None,
}

impl std::str::FromStr for Penalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l0" => Ok(Self::L0),
            "l1" => Ok(Self::L1),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown penalty '{other}'"))),
        }
    }
}

impl std::fmt::Display for Penalty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::L0 => "l0",
            Self::L1 => "l1",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum Threshold {
    /// Fixed λ.
    Fixed(f64),
    /// λ is the q-quantile of `|d|`, resolved per call.
    Quantile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub threshold: Threshold,
    pub penalty: Penalty,
}

impl ThresholdSpec {
    pub fn quantile(q: f64, penalty: Penalty) -> Self {
        Self {
            threshold: Threshold::Quantile(q),
            penalty,
        }
    }

    pub fn fixed(lambda: f64, penalty: Penalty) -> Self {
        Self {
            threshold: Threshold::Fixed(lambda),
            penalty,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.threshold {
            Threshold::Fixed(l) if !(l >= 0.0 && l.is_finite()) => {
                Err(Error::invalid(format!("fixed threshold must be >= 0, got {l}")))
            }
            Threshold::Quantile(q) if !(0.0..=1.0).contains(&q) => {
                Err(Error::invalid(format!("quantile must lie in [0, 1], got {q}")))
            }
            _ => Ok(()),
        }
    }
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        Self::quantile(0.7, Penalty::L0)
    }
}

/// Boolean field of latent shape; `true` marks an unedited component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMask {
    shape: Vec<usize>,
    unedited: Vec<bool>,
}

impl EditMask {
    pub fn new(shape: Vec<usize>, unedited: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != unedited.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: vec![unedited.len()],
            });
        }
        Ok(Self { shape, unedited })
    }

    pub fn all(shape: &[usize], value: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            unedited: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.unedited
    }

    /// Fraction of components marked unedited.
    pub fn coverage(&self) -> f64 {
        self.unedited.iter().filter(|&&m| m).count() as f64 / self.unedited.len() as f64
    }

    pub fn check_matches(&self, latent: &Latent) -> Result<()> {
        if self.shape != latent.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: latent.shape().to_vec(),
            });
        }
        Ok(())
    }
}

fn check_threshold(value: f64, what: &str) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must be a finite value >= 0, got {value}")))
    }
}

pub fn soft_threshold_scalar(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

pub fn hard_threshold_scalar(x: f64, tau: f64) -> f64 {
    if x.abs() > tau {
        x
    } else {
        0.0
    }
}

/// Componentwise soft thresholding (the L1 prox).
pub fn soft_threshold(x: &Latent, lambda: f64) -> Result<Latent> {
    check_threshold(lambda, "lambda")?;
    Ok(x.map(|v| soft_threshold_scalar(v, lambda)))
}

/// Componentwise hard thresholding: keep `|x| > tau`.
pub fn hard_threshold(x: &Latent, tau: f64) -> Result<Latent> {
    check_threshold(tau, "tau")?;
    Ok(x.map(|v| hard_threshold_scalar(v, tau)))
}

/// Comparison threshold of the L0 prox for penalty weight `mu`.
pub fn hard_threshold_for_l0_weight(mu: f64) -> f64 {
    (2.0 * mu).sqrt()
}

/// q-quantile of `|d|` by linear interpolation of order statistics at
/// position `q (n - 1)`.
pub fn quantile_abs(d: &Latent, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile must lie in [0, 1], got {q}")));
    }
    if d.is_empty() {
        return Err(Error::invalid("quantile of an empty field"));
    }
    let mut mags: Vec<f64> = d.as_slice().iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let pos = q * (mags.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let hi = (lo + 1).min(mags.len() - 1);
    Ok(mags[lo] + frac * (mags[hi] - mags[lo]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxOutput {
    pub value: Latent,
    pub mask: EditMask,
    pub lambda: f64,
    /// Fraction of components the operator set to zero (0 for the identity).
    pub clamp_fraction: f64,
}

/// Resolve λ for `d`, apply the configured prox and build the edit mask.
pub fn prox_apply(d: &Latent, spec: &ThresholdSpec) -> Result<ProxOutput> {
    spec.validate()?;
    let lambda = match spec.threshold {
        Threshold::Fixed(l) => l,
        Threshold::Quantile(q) => quantile_abs(d, q)?,
    };
    let value = match spec.penalty {
        Penalty::L0 => hard_threshold(d, lambda)?,
        Penalty::L1 => soft_threshold(d, lambda)?,
        Penalty::None => d.clone(),
    };
    let unedited: Vec<bool> = d.as_slice().iter().map(|v| v.abs() <= lambda).collect();
    let clamp_fraction = match spec.penalty {
        Penalty::None => 0.0,
        _ => unedited.iter().filter(|&&m| m).count() as f64 / unedited.len() as f64,
    };
    Ok(ProxOutput {
        value,
        mask: EditMask::new(d.shape().to_vec(), unedited)?,
        lambda,
        clamp_fraction,
    })
}
