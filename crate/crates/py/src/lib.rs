//! Python bindings. Images cross the boundary as row-major `bytes` of 0/1
//! values; `numpy.frombuffer(b, dtype=numpy.uint8).reshape(h, w)` views them.

use std::path::PathBuf;

use lada::config::RunConfig;
use lada::diffcore::suite::run_suite;
use lada::doinn::{DoinnInit, DoinnModel};
use lada::error::LadaError;
use lada::generator::{sample_mask, GeneratorInit, GeneratorModel, NoiseMode};
use lada::image::{BinaryImage, CANVAS};
use lada::litho::{build_kernels, simulate as run_oracle};
use lada::metrics;
use lada::pattern::{generate_pattern as draw_pattern, DesignRules};
use lada::sampler::{propose_batch, SamplerContext, SamplingStrategy};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: LadaError) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn config(json: Option<&str>) -> PyResult<RunConfig> {
    match json {
        Some(s) => RunConfig::from_json_str(s).map_err(err),
        None => Ok(RunConfig::default()),
    }
}

fn image(data: &[u8], h: usize, w: usize) -> PyResult<BinaryImage> {
    BinaryImage::from_vec(h, w, data.to_vec()).map_err(err)
}

fn canvas(data: &[u8]) -> PyResult<BinaryImage> {
    image(data, CANVAS, CANVAS)
}

/// Resist image of a mask under the oracle of `config` (JSON, defaults when omitted).
#[pyfunction]
#[pyo3(signature = (mask, h, w, config_json=None))]
fn simulate<'py>(py: Python<'py>, mask: &[u8], h: usize, w: usize, config_json: Option<&str>) -> PyResult<Bound<'py, PyBytes>> {
    let cfg = config(config_json)?;
    let ks = build_kernels(&cfg.oracle).map_err(err)?;
    let r = run_oracle(&image(mask, h, w)?, &ks);
    Ok(PyBytes::new(py, r.data()))
}

/// A rule-compliant 64x64 pattern; `test_rules` selects the shifted test rules.
#[pyfunction]
#[pyo3(signature = (seed, test_rules=false))]
fn generate_pattern<'py>(py: Python<'py>, seed: u64, test_rules: bool) -> PyResult<Bound<'py, PyBytes>> {
    let rules = if test_rules { DesignRules::shifted_test() } else { DesignRules::training() };
    let m = draw_pattern(&rules, seed).map_err(err)?;
    Ok(PyBytes::new(py, m.data()))
}

#[pyfunction]
fn fiou(pred: &[u8], gold: &[u8], h: usize, w: usize) -> PyResult<f64> {
    metrics::fiou(&image(pred, h, w)?, &image(gold, h, w)?).map_err(err)
}

#[pyclass(name = "Surrogate")]
struct Surrogate {
    inner: DoinnModel,
}

#[pymethods]
impl Surrogate {
    #[staticmethod]
    fn init(seed: u64) -> Self {
        Surrogate { inner: DoinnModel::init(seed, DoinnInit::default()) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Surrogate { inner: DoinnModel::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Predicted resist of a 64x64 mask.
    fn predict<'py>(&self, py: Python<'py>, mask: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
        let r = self.inner.predict_resist(&canvas(mask)?).map_err(err)?;
        Ok(PyBytes::new(py, r.data()))
    }

    /// Output of the loss-prediction head.
    fn predicted_loss(&self, mask: &[u8]) -> PyResult<f32> {
        self.inner.predict_loss(&canvas(mask)?.encode()).map_err(err)
    }
}

#[pyclass(name = "Generator")]
struct Generator {
    inner: GeneratorModel,
}

#[pymethods]
impl Generator {
    #[staticmethod]
    fn init(seed: u64) -> Self {
        Generator { inner: GeneratorModel::init(seed, GeneratorInit::default()) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Generator { inner: GeneratorModel::load(&path).map_err(err)? })
    }

    /// Legalized mask from a seeded latent; `random_noise=False` zeroes the noise maps.
    #[pyo3(signature = (seed, random_noise=true))]
    fn sample<'py>(&self, py: Python<'py>, seed: u64, random_noise: bool) -> PyResult<Bound<'py, PyBytes>> {
        let mode = if random_noise { NoiseMode::Random } else { NoiseMode::Zero };
        let d = sample_mask(&self.inner, seed, mode).map_err(err)?;
        Ok(PyBytes::new(py, d.mask.data()))
    }
}

/// `budget` proposals as `(mask bytes, provenance JSON)` pairs.
#[pyfunction]
#[pyo3(signature = (strategy, surrogate, generator, budget, seed, config_json=None))]
fn propose<'py>(
    py: Python<'py>,
    strategy: &str,
    surrogate: &Surrogate,
    generator: &Generator,
    budget: usize,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<Vec<(Bound<'py, PyBytes>, String)>> {
    let strategy: SamplingStrategy = strategy.parse().map_err(err)?;
    let cfg = config(config_json)?;
    let ctx = SamplerContext {
        f: &surrogate.inner,
        g: &generator.inner,
        rules: &cfg.rules,
        ascent: &cfg.sampler,
    };
    let batch = propose_batch(strategy, &ctx, budget, seed).map_err(err)?;
    batch
        .iter()
        .map(|p| {
            let prov = serde_json::to_string(&p.provenance).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            Ok((PyBytes::new(py, p.mask.data()), prov))
        })
        .collect()
}

/// Finite-difference suite: `(name, max relative error, passed)` per primitive.
#[pyfunction]
#[pyo3(signature = (seed=0, points=8))]
fn gradcheck(seed: u64, points: usize) -> PyResult<Vec<(String, f64, bool)>> {
    let rep = run_suite(seed, points).map_err(err)?;
    Ok(rep.entries.into_iter().map(|e| (e.name.to_string(), e.max_rel_error, e.passed)).collect())
}

#[pymodule]
fn lada_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CANVAS", CANVAS)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(fiou, m)?)?;
    m.add_function(wrap_pyfunction!(propose, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<Surrogate>()?;
    m.add_class::<Generator>()?;
    Ok(())
}
