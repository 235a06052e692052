//! Python bindings. Latents cross the boundary as flat lists of floats in
//! row-major order; configurations cross as TOML text.

use std::collections::BTreeMap;
use std::path::PathBuf;

use proxguide::ddim;
use proxguide::harness::{self, run::Command, RunConfig};
use proxguide::models::{Condition, EpsilonPredictor, MixtureComponent};
use proxguide::prox::{self, Penalty, ThresholdSpec};
use proxguide::{Latent, NoiseSchedule, Timestep};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: proxguide::Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn parse<T: std::str::FromStr<Err = proxguide::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn config(toml: Option<&str>) -> PyResult<RunConfig> {
    match toml {
        Some(t) => RunConfig::from_toml(t).map_err(to_py),
        None => Ok(RunConfig::default()),
    }
}

/// Cumulative signal coefficients, index 0 being clean data.
#[pyclass(name = "Schedule", module = "proxguide_py")]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    /// Linear betas over `train_steps`, strided down to `steps`.
    #[new]
    #[pyo3(signature = (train_steps=1000, beta_start=1e-4, beta_end=0.02, steps=50))]
    fn new(train_steps: usize, beta_start: f64, beta_end: f64, steps: usize) -> PyResult<Self> {
        let inner = proxguide::schedule::linear_beta_schedule(train_steps, beta_start, beta_end)
            .and_then(|s| if steps == train_steps { Ok(s) } else { s.subsample(steps) })
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    #[getter]
    fn timesteps(&self) -> Vec<usize> {
        self.inner.timesteps().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.num_steps()
    }
}

/// Exact score oracle of an isotropic Gaussian mixture.
#[pyclass(name = "MixtureOracle", module = "proxguide_py")]
struct PyOracle {
    inner: proxguide::MixtureOracle,
}

#[pymethods]
impl PyOracle {
    /// `components` is a list of `(weight, mean, scale)`.
    #[new]
    fn new(components: Vec<(f64, Vec<f64>, f64)>) -> PyResult<Self> {
        let comps = components
            .into_iter()
            .map(|(weight, mean, scale)| MixtureComponent { weight, mean, scale })
            .collect();
        Ok(Self {
            inner: proxguide::MixtureOracle::new(comps).map_err(to_py)?,
        })
    }

    /// ε at latent `z`, signal coefficient `alpha_bar` and condition logits.
    #[pyo3(signature = (z, alpha_bar, logits, shift=None))]
    fn epsilon(&self, z: Vec<f64>, alpha_bar: f64, logits: Vec<f64>, shift: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
        let cond = match shift {
            Some(s) => Condition::with_shift(logits, s),
            None => Condition::new(logits),
        };
        let ts = Timestep::new(1, alpha_bar);
        Ok(self.inner.predict(&Latent::from_vec(z), ts, &cond).map_err(to_py)?.into_vec())
    }

    fn responsibilities(&self, z: Vec<f64>, alpha_bar: f64, logits: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner
            .responsibilities(&Latent::from_vec(z), Timestep::new(1, alpha_bar), &Condition::new(logits))
            .map_err(to_py)
    }
}

#[pyfunction]
fn soft_threshold(x: Vec<f64>, lam: f64) -> Vec<f64> {
    x.into_iter().map(|v| prox::soft_threshold_scalar(v, lam)).collect()
}

#[pyfunction]
fn hard_threshold(x: Vec<f64>, tau: f64) -> Vec<f64> {
    x.into_iter().map(|v| prox::hard_threshold_scalar(v, tau)).collect()
}

#[pyfunction]
fn quantile_abs(d: Vec<f64>, q: f64) -> PyResult<f64> {
    prox::quantile_abs(&Latent::from_vec(d), q).map_err(to_py)
}

/// Returns `(value, unedited_mask, lambda, clamp_fraction)`.
#[pyfunction]
#[pyo3(signature = (d, penalty="l0", quantile=None, lam=None))]
fn prox_apply(
    d: Vec<f64>,
    penalty: &str,
    quantile: Option<f64>,
    lam: Option<f64>,
) -> PyResult<(Vec<f64>, Vec<bool>, f64, f64)> {
    let pen: Penalty = parse(penalty)?;
    let spec = match (quantile, lam) {
        (Some(_), Some(_)) => return Err(PyValueError::new_err("quantile and lam are mutually exclusive")),
        (_, Some(l)) => ThresholdSpec::fixed(l, pen),
        (q, None) => ThresholdSpec::quantile(q.unwrap_or(0.7), pen),
    };
    let out = prox::prox_apply(&Latent::from_vec(d), &spec).map_err(to_py)?;
    Ok((out.value.into_vec(), out.mask.as_slice().to_vec(), out.lambda, out.clamp_fraction))
}

#[pyfunction]
fn ddim_step(z: Vec<f64>, eps: Vec<f64>, alpha_bar: f64, alpha_bar_prev: f64) -> PyResult<Vec<f64>> {
    ddim::ddim_step(
        &Latent::from_vec(z),
        &Latent::from_vec(eps),
        Timestep::new(1, alpha_bar),
        Timestep::new(0, alpha_bar_prev),
    )
    .map(Latent::into_vec)
    .map_err(to_py)
}

#[pyfunction]
fn ddim_invert_step(z_prev: Vec<f64>, eps: Vec<f64>, alpha_bar: f64, alpha_bar_prev: f64) -> PyResult<Vec<f64>> {
    ddim::ddim_invert_step(
        &Latent::from_vec(z_prev),
        &Latent::from_vec(eps),
        Timestep::new(1, alpha_bar),
        Timestep::new(0, alpha_bar_prev),
    )
    .map(Latent::into_vec)
    .map_err(to_py)
}

#[pyfunction]
fn predict_z0(z: Vec<f64>, eps: Vec<f64>, alpha_bar: f64) -> PyResult<Vec<f64>> {
    ddim::predict_z0(&Latent::from_vec(z), &Latent::from_vec(eps), Timestep::new(1, alpha_bar))
        .map(Latent::into_vec)
        .map_err(to_py)
}

/// The bundled canonical scenario as TOML.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml()
}

/// Runs `invert`, `reconstruct`, `edit`, `nti` or `masactrl`. With `out`
/// the artifacts are written there; the summary is returned either way.
#[pyfunction]
#[pyo3(signature = (command, config=None, out=None))]
fn run(command: &str, config: Option<&str>, out: Option<PathBuf>) -> PyResult<BTreeMap<String, f64>> {
    let cmd = match command {
        "invert" => Command::Invert,
        "reconstruct" => Command::Reconstruct,
        "edit" => Command::Edit,
        "nti" => Command::Nti,
        "masactrl" => Command::Masactrl,
        other => return Err(PyValueError::new_err(format!("unknown command '{other}'"))),
    };
    let cfg = self::config(config)?;
    let output = match out {
        Some(dir) => harness::run(cmd, &cfg, &dir),
        None => harness::execute(cmd, &cfg),
    }
    .map_err(to_py)?;
    Ok(output.summary)
}

/// Threshold sweep; returns `(cells_csv, steps_csv)`.
#[pyfunction]
#[pyo3(signature = (quantiles, penalties, scales, config=None))]
fn ablate_threshold(
    quantiles: Vec<f64>,
    penalties: Vec<String>,
    scales: Vec<f64>,
    config: Option<&str>,
) -> PyResult<(String, String)> {
    let pens = penalties.iter().map(|p| parse::<Penalty>(p)).collect::<PyResult<Vec<_>>>()?;
    let out = harness::ablate_threshold(&self::config(config)?, &quantiles, &pens, &scales).map_err(to_py)?;
    csv_pair(out)
}

/// Reconstruction-guidance sweep; returns `(cells_csv, steps_csv)`.
#[pyfunction]
#[pyo3(signature = (etas, t_recs, config=None))]
fn ablate_recon(etas: Vec<f64>, t_recs: Vec<usize>, config: Option<&str>) -> PyResult<(String, String)> {
    csv_pair(harness::ablate_recon(&self::config(config)?, &etas, &t_recs).map_err(to_py)?)
}

fn csv_pair(out: harness::SweepOutput) -> PyResult<(String, String)> {
    let text = |t: &harness::Table| -> PyResult<String> {
        Ok(String::from_utf8(t.to_csv().map_err(to_py)?).expect("CSV is UTF-8"))
    };
    Ok((text(&out.cells)?, text(&out.steps)?))
}

#[pymodule]
fn proxguide_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", harness::VERSION)?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyOracle>()?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(hard_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_abs, m)?)?;
    m.add_function(wrap_pyfunction!(prox_apply, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_step, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_invert_step, m)?)?;
    m.add_function(wrap_pyfunction!(predict_z0, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(ablate_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(ablate_recon, m)?)?;
    Ok(())
}
