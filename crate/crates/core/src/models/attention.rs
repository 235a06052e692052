use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Condition, EpsilonPredictor};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::Timestep;

/// Which key/value set a self-attention layer attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InjectionMode {
    /// Replace the layer's own keys and values with the injected ones.
    #[default]
    Source,
    /// Attend over own and injected keys/values concatenated.
    Joint,
    /// Ordinary self-attention.
    None,
}

impl std::str::FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Self::Source),
            "joint" => Ok(Self::Joint),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown injection mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Source => "source",
            Self::Joint => "joint",
            Self::None => "none",
        })
    }
}

/// Keys and values of one attention layer, `tokens x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub tokens: usize,
    pub dim: usize,
}

/// Captured keys/values for every attention layer of one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionFeatures {
    pub layers: Vec<LayerFeatures>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub tokens: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub cond_len: usize,
    /// Data scale used by the Gaussian-posterior output head.
    pub data_scale: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            tokens: 16,
            embed_dim: 16,
            heads: 2,
            layers: 2,
            cond_len: 4,
            data_scale: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

/// A tiny untrained token denoiser built around self-attention.
///
/// The network predicts a clean-sample estimate `m(z, t, C)` and converts it
/// to noise through the Gaussian posterior form
/// `eps = sqrt(1 - ab) (z - sqrt(ab) m) / (ab s^2 + 1 - ab)`, which keeps DDIM
/// trajectories bounded even though the weights are random. Parameters are
/// drawn once from a seeded generator.
#[derive(Debug, Clone)]
pub struct TokenDenoiser {
    cfg: DenoiserConfig,
    layers: Vec<Layer>,
    w_time: Vec<f64>,
    w_cond: Vec<f64>,
    w_out: Vec<f64>,
}

/// `a (n x k) * b (k x m)`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let row = &b[p * m..(p + 1) * m];
            for (o, y) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o += x * y;
            }
        }
    }
    out
}

impl TokenDenoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        if cfg.tokens == 0 || cfg.embed_dim == 0 || cfg.heads == 0 || cfg.layers == 0 || cfg.cond_len == 0 {
            return Err(Error::invalid("denoiser dimensions must be positive"));
        }
        if cfg.embed_dim % cfg.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by head count {}",
                cfg.embed_dim, cfg.heads
            )));
        }
        if !(cfg.data_scale > 0.0 && cfg.data_scale.is_finite()) {
            return Err(Error::invalid("data_scale must be positive"));
        }
        let d = cfg.embed_dim;
        let f = 2 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut draw = |rows: usize, cols: usize| -> Vec<f64> {
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
            (0..rows * cols).map(|_| normal.sample(&mut rng)).collect()
        };
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                w1: draw(d, f),
                w2: draw(f, d),
            })
            .collect();
        let w_time = draw(d, d);
        let w_cond = draw(cfg.cond_len, d);
        let w_out = draw(d, d);
        Ok(Self {
            cfg,
            layers,
            w_time,
            w_cond,
            w_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let d = self.cfg.embed_dim;
        let raw: Vec<f64> = (0..d)
            .map(|i| {
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let x = t as f64 * freq;
                if i % 2 == 0 {
                    x.sin()
                } else {
                    x.cos()
                }
            })
            .collect();
        matmul(&raw, &self.w_time, 1, d, d)
    }

    fn check_injected(&self, injected: &AttentionFeatures) -> Result<()> {
        if injected.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.layers.len()],
                got: vec![injected.layers.len()],
            });
        }
        for l in &injected.layers {
            let n = l.tokens * l.dim;
            if l.dim != self.cfg.embed_dim || l.keys.len() != n || l.values.len() != n || l.tokens == 0 {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.cfg.tokens, self.cfg.embed_dim],
                    got: vec![l.tokens, l.dim],
                });
            }
        }
        Ok(())
    }

    /// Multi-head attention of `q` (tokens x d) over `keys`/`values`
    /// (m x d).
    fn attend(&self, q: &[f64], keys: &[f64], values: &[f64], m: usize) -> Vec<f64> {
        let n = self.cfg.tokens;
        let d = self.cfg.embed_dim;
        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; m];
        for h in 0..self.cfg.heads {
            let lo = h * dh;
            for i in 0..n {
                let qi = &q[i * d + lo..i * d + lo + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + lo..j * d + lo + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let row = &mut out[i * d + lo..i * d + lo + dh];
                for (j, s) in scores.iter().enumerate() {
                    let p = s / total;
                    let vj = &values[j * d + lo..j * d + lo + dh];
                    for (o, v) in row.iter_mut().zip(vj) {
                        *o += p * v;
                    }
                }
            }
        }
        out
    }

    /// Forward pass with optional key/value injection. Always returns the
    /// pass's own keys/values so a downstream branch can consume them.
    pub fn forward(
        &self,
        z: &Latent,
        ts: Timestep,
        cond: &Condition,
        mode: InjectionMode,
        injected: Option<&AttentionFeatures>,
    ) -> Result<(Latent, AttentionFeatures)> {
        let n = self.cfg.tokens;
        let d = self.cfg.embed_dim;
        if z.len() != n * d {
            return Err(Error::ShapeMismatch {
                expected: vec![n, d],
                got: z.shape().to_vec(),
            });
        }
        if cond.logits().len() != self.cfg.cond_len {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cfg.cond_len],
                got: vec![cond.logits().len()],
            });
        }
        if let Some(s) = cond.shift() {
            if s.len() != n * d {
                return Err(Error::ShapeMismatch {
                    expected: vec![n * d],
                    got: vec![s.len()],
                });
            }
        }
        z.ensure_finite("z")?;
        cond.validate()?;
        let injected = match (mode, injected) {
            (InjectionMode::None, _) => None,
            (_, Some(f)) => {
                self.check_injected(f)?;
                Some(f)
            }
            (_, None) => {
                return Err(Error::invalid(format!(
                    "injection mode '{mode}' requires captured features"
                )))
            }
        };

        let ab = ts.alpha_bar;
        let s2 = self.cfg.data_scale * self.cfg.data_scale;
        let var = ab * s2 + (1.0 - ab);
        let inv_std = 1.0 / var.sqrt();
        let bias: Vec<f64> = self
            .time_embedding(ts.t)
            .iter()
            .zip(matmul(cond.logits(), &self.w_cond, 1, self.cfg.cond_len, d))
            .map(|(a, b)| a + b)
            .collect();
        let mut x: Vec<f64> = z
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, v)| v * inv_std + bias[i % d])
            .collect();

        let mut captured = AttentionFeatures::default();
        for (li, layer) in self.layers.iter().enumerate() {
            let q = matmul(&x, &layer.wq, n, d, d);
            let k = matmul(&x, &layer.wk, n, d, d);
            let v = matmul(&x, &layer.wv, n, d, d);
            let attn = match injected.map(|f| &f.layers[li]) {
                None => self.attend(&q, &k, &v, n),
                Some(src) => match mode {
                    InjectionMode::Source => self.attend(&q, &src.keys, &src.values, src.tokens),
                    InjectionMode::Joint => {
                        let keys = [k.as_slice(), src.keys.as_slice()].concat();
                        let values = [v.as_slice(), src.values.as_slice()].concat();
                        self.attend(&q, &keys, &values, n + src.tokens)
                    }
                    InjectionMode::None => unreachable!("no features are kept for mode none"),
                },
            };
            captured.layers.push(LayerFeatures {
                keys: k,
                values: v,
                tokens: n,
                dim: d,
            });
            for (xi, a) in x.iter_mut().zip(matmul(&attn, &layer.wo, n, d, d)) {
                *xi += a;
            }
            let hidden: Vec<f64> = matmul(&x, &layer.w1, n, d, 2 * d).into_iter().map(f64::tanh).collect();
            for (xi, a) in x.iter_mut().zip(matmul(&hidden, &layer.w2, n, 2 * d, d)) {
                *xi += a;
            }
        }

        let mut mean: Vec<f64> = matmul(&x, &self.w_out, n, d, d).into_iter().map(f64::tanh).collect();
        if let Some(s) = cond.shift() {
            for (m, s) in mean.iter_mut().zip(s) {
                *m += s;
            }
        }
        let sa = ab.sqrt();
        let sn = (1.0 - ab).max(0.0).sqrt();
        let eps = z
            .as_slice()
            .iter()
            .zip(&mean)
            .map(|(z, m)| sn * (z - sa * m) / var)
            .collect();
        Ok((Latent::new(z.shape().to_vec(), eps)?, captured))
    }
}

impl EpsilonPredictor for TokenDenoiser {
    fn latent_len(&self) -> usize {
        self.cfg.tokens * self.cfg.embed_dim
    }

    fn predict(&self, z: &Latent, ts: Timestep, cond: &Condition) -> Result<Latent> {
        Ok(self.forward(z, ts, cond, InjectionMode::None, None)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn setup(seed: u64) -> (TokenDenoiser, Latent, Condition) {
        let model = TokenDenoiser::new(DenoiserConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let z = Latent::grid(16, 16, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let c = Condition::new(vec![1.0, -0.5, 0.2, 0.0]);
        (model, z, c)
    }

    #[test]
    fn deterministic() {
        let (m, z, c) = setup(3);
        let ts = Timestep::new(500, 0.3);
        let a = m.forward(&z, ts, &c, InjectionMode::None, None).unwrap();
        let b = m.forward(&z, ts, &c, InjectionMode::None, None).unwrap();
        assert_eq!(a, b);
        let again = TokenDenoiser::new(m.config().clone()).unwrap();
        assert_eq!(again.forward(&z, ts, &c, InjectionMode::None, None).unwrap(), a);
        assert_eq!(a.0.shape(), z.shape());
    }

    #[test]
    fn self_injection_is_identity() {
        let (m, z, c) = setup(4);
        let ts = Timestep::new(300, 0.5);
        let (plain, feats) = m.forward(&z, ts, &c, InjectionMode::None, None).unwrap();
        let (src, _) = m.forward(&z, ts, &c, InjectionMode::Source, Some(&feats)).unwrap();
        assert_eq!(src, plain);
    }

    #[test]
    fn joint_with_duplicated_features_matches_plain() {
        for seed in 0..5 {
            let (m, z, c) = setup(seed);
            let ts = Timestep::new(700, 0.1);
            let (plain, feats) = m.forward(&z, ts, &c, InjectionMode::None, None).unwrap();
            let (joint, _) = m.forward(&z, ts, &c, InjectionMode::Joint, Some(&feats)).unwrap();
            assert!(joint.max_abs_diff(&plain).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn foreign_features_change_output() {
        let (m, z, c) = setup(5);
        let ts = Timestep::new(300, 0.5);
        let other = z.map(|v| -v);
        let (_, feats) = m.forward(&other, ts, &c, InjectionMode::None, None).unwrap();
        let (plain, _) = m.forward(&z, ts, &c, InjectionMode::None, None).unwrap();
        let (src, _) = m.forward(&z, ts, &c, InjectionMode::Source, Some(&feats)).unwrap();
        assert!(src.max_abs_diff(&plain).unwrap() > 1e-6);
    }

    #[test]
    fn rejects_missing_or_mismatched_features() {
        let (m, z, c) = setup(6);
        let ts = Timestep::new(300, 0.5);
        assert!(m.forward(&z, ts, &c, InjectionMode::Source, None).is_err());
        assert!(m.forward(&z, ts, &c, InjectionMode::Joint, None).is_err());
        let (_, mut feats) = m.forward(&z, ts, &c, InjectionMode::None, None).unwrap();
        feats.layers[0].keys.pop();
        assert!(m.forward(&z, ts, &c, InjectionMode::Source, Some(&feats)).is_err());
        feats.layers.pop();
        assert!(m.forward(&z, ts, &c, InjectionMode::Source, Some(&feats)).is_err());
        assert!(m
            .forward(&Latent::from_vec(vec![0.0; 10]), ts, &c, InjectionMode::None, None)
            .is_err());
    }

    #[test]
    fn parses_modes() {
        assert_eq!("joint".parse::<InjectionMode>().unwrap(), InjectionMode::Joint);
        assert!("all".parse::<InjectionMode>().is_err());
        assert_eq!(InjectionMode::None.to_string(), "none");
    }
}
