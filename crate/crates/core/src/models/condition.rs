use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A conditioning vector: mixture-selection logits plus an optional mean
/// shift of latent length. The null condition is all-zero logits with no
/// shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shift: Option<Vec<f64>>,
}

impl Condition {
    pub fn new(logits: Vec<f64>) -> Self {
        Self {
            logits,
            shift: None,
        }
    }

    pub fn with_shift(logits: Vec<f64>, shift: Vec<f64>) -> Self {
        Self {
            logits,
            shift: Some(shift),
        }
    }

    pub fn null(k: usize) -> Self {
        Self::new(vec![0.0; k])
    }

    /// Null condition with the same coordinate layout as `other`, so it can be
    /// optimized in the same space.
    pub fn null_like(other: &Condition) -> Self {
        Self {
            logits: vec![0.0; other.logits.len()],
            shift: other.shift.as_ref().map(|s| vec![0.0; s.len()]),
        }
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn shift(&self) -> Option<&[f64]> {
        self.shift.as_deref()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.logits.iter().all(|v| v.is_finite())
            && self.shift.iter().flatten().all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("condition"))
        }
    }

    /// Flattened coordinates: logits followed by the shift, if any.
    pub fn coords(&self) -> Vec<f64> {
        let mut out = self.logits.clone();
        if let Some(s) = &self.shift {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn num_coords(&self) -> usize {
        self.logits.len() + self.shift.as_ref().map_or(0, Vec::len)
    }

    /// Inverse of [`Condition::coords`] for this layout.
    pub fn with_coords(&self, coords: &[f64]) -> Result<Self> {
        if coords.len() != self.num_coords() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.num_coords()],
                got: vec![coords.len()],
            });
        }
        let k = self.logits.len();
        Ok(Self {
            logits: coords[..k].to_vec(),
            shift: self.shift.as_ref().map(|_| coords[k..].to_vec()),
        })
    }

    /// `(1 - alpha) * self + alpha * other`. A missing shift counts as zeros.
    pub fn lerp(&self, other: &Condition, alpha: f64) -> Result<Self> {
        if self.logits.len() != other.logits.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.logits.len()],
                got: vec![other.logits.len()],
            });
        }
        let mix = |a: f64, b: f64| (1.0 - alpha) * a + alpha * b;
        let logits = self
            .logits
            .iter()
            .zip(&other.logits)
            .map(|(&a, &b)| mix(a, b))
            .collect();
        let shift = match (&self.shift, &other.shift) {
            (None, None) => None,
            (a, b) => {
                let n = a.as_ref().or(b.as_ref()).map_or(0, Vec::len);
                let a = a.clone().unwrap_or_else(|| vec![0.0; n]);
                let b = b.clone().unwrap_or_else(|| vec![0.0; n]);
                if a.len() != b.len() {
                    return Err(Error::ShapeMismatch {
                        expected: vec![a.len()],
                        got: vec![b.len()],
                    });
                }
                Some(a.iter().zip(&b).map(|(&x, &y)| mix(x, y)).collect())
            }
        };
        Ok(Self { logits, shift })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coords_round_trip() {
        let c = Condition::with_shift(vec![1.0, 2.0], vec![3.0, 4.0, 5.0]);
        assert_eq!(c.coords(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(c.with_coords(&c.coords()).unwrap(), c);
        assert!(c.with_coords(&[1.0]).is_err());
    }

    #[test]
    fn null_like_matches_layout() {
        let c = Condition::with_shift(vec![1.0, 2.0], vec![3.0]);
        let n = Condition::null_like(&c);
        assert_eq!(n.coords(), vec![0.0; 3]);
    }

    #[test]
    fn lerp_handles_missing_shift() {
        let a = Condition::with_shift(vec![2.0], vec![4.0]);
        let b = Condition::null(1);
        let m = a.lerp(&b, 0.5).unwrap();
        assert_eq!(m.logits(), &[1.0]);
        assert_eq!(m.shift(), Some(&[2.0][..]));
        assert!(a.lerp(&Condition::null(2), 0.5).is_err());
    }
}
