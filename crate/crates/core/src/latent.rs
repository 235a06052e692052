use crate::error::{Error, Result};

/// A shaped field of `f64` values. Plays the role of every `z_t` in the
/// samplers; the shape is metadata only, storage is row-major and flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Latent {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n == 0 {
            return Err(Error::invalid("latent shape must be non-empty"));
        }
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn grid(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![height, width], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Same values, different shape metadata.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Latent {
        Latent {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Result<Latent> {
        self.check_same_shape(other)?;
        Ok(Latent {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `a * self + b * other`, componentwise.
    pub fn lin_comb(&self, a: f64, other: &Latent, b: f64) -> Result<Latent> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.zip_map(other, |x, y| x - y)
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// Euclidean distance; panics on length mismatch only through the
    /// shape check returning an error.
    pub fn dist_l2(&self, other: &Latent) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn max_abs_diff(&self, other: &Latent) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn mse(&self, other: &Latent) -> Result<f64> {
        let d = self.dist_l2(other)?;
        Ok(d * d / self.data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Latent::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Latent::new(vec![], vec![]).is_err());
        assert!(Latent::grid(2, 2, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn arithmetic_checks_shape() {
        let a = Latent::from_vec(vec![1.0, 2.0]);
        let b = Latent::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(a.sub(&b).is_err());
        let c = a.lin_comb(2.0, &a, -1.0).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 2.0]);
        assert!((a.dist_l2(&Latent::from_vec(vec![4.0, 6.0])).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn detects_non_finite() {
        let a = Latent::from_vec(vec![1.0, f64::NAN]);
        assert!(matches!(a.ensure_finite("z"), Err(Error::NonFinite("z"))));
    }
}
