//! Python bindings. Configs and results cross the boundary as JSON strings,
//! vectors as lists of floats.

use std::path::PathBuf;

use air_core::backend::{sample_world, PromptMode, SimulatedWorld, VisionLanguageBackend};
use air_core::experiment::{run_experiment as run_core, run_to_dir as run_dir_core, ExperimentConfig};
use air_core::math::{argmax_with_tiebreak, cosine_similarity as cos_core, harmonic_mean as hm_core};
use air_core::math::{temperature_softmax as softmax_core, PredictionDistribution};
use air_core::pseudolabel::fuse as fuse_core;
use air_core::AirError;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: AirError) -> PyErr {
    match e {
        AirError::Param(_) | AirError::Config(_) | AirError::Degenerate(_) => PyValueError::new_err(e.to_string()),
        AirError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn dist(probs: Vec<f64>) -> PyResult<PredictionDistribution> {
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(PyValueError::new_err("probabilities must be finite and non-negative"));
    }
    Ok(PredictionDistribution { probs, renormalized: false })
}

fn parse_config(config_json: Option<&str>) -> PyResult<ExperimentConfig> {
    let cfg = match config_json {
        Some(text) => ExperimentConfig::from_json(text).map_err(to_py)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    cos_core(&a, &b).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (sims, tau = 0.01))]
fn temperature_softmax(sims: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    Ok(softmax_core(&sims, tau).map_err(to_py)?.probs)
}

#[pyfunction]
fn harmonic_mean(seen: f64, unseen: f64) -> PyResult<f64> {
    hm_core(seen, unseen).map_err(to_py)
}

/// p + λ·p̂, left unnormalized.
#[pyfunction]
fn fuse(p: Vec<f64>, p_hat: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    Ok(fuse_core(&dist(p)?, &dist(p_hat)?, lam).map_err(to_py)?.probs)
}

#[pyfunction]
fn argmax(values: Vec<f64>) -> PyResult<usize> {
    argmax_with_tiebreak(&values).map_err(to_py)
}

/// The default experiment config as pretty JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&ExperimentConfig::default()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs an experiment and returns its trace (config hash, per-iteration
/// records, final metrics) as JSON.
#[pyfunction]
#[pyo3(signature = (config_json = None))]
fn run_experiment(py: Python<'_>, config_json: Option<&str>) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let out = py.detach(|| run_core(&cfg)).map_err(to_py)?;
    let summary = serde_json::json!({
        "config_hash": out.config_hash,
        "records": out.result.records,
        "final_metrics": out.result.final_metrics(),
        "final_prompt_sha256": out.result.final_prompt.sha256(),
        "trajectory_sha256": out.result.trajectory_hash().map_err(to_py)?,
    });
    Ok(summary.to_string())
}

/// Runs an experiment, writes its run directory and returns the results row
/// as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None))]
fn run_to_dir(py: Python<'_>, out_dir: PathBuf, config_json: Option<&str>) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let (_, row) = py.detach(|| run_dir_core(&cfg, &out_dir, false)).map_err(to_py)?;
    serde_json::to_string(&row).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Names, outcomes and details of the built-in checks.
#[pyfunction]
fn selftest(py: Python<'_>) -> Vec<(String, bool, String)> {
    py.detach(air_core::selftest::run_selftest)
        .into_iter()
        .map(|r| (r.name.to_string(), r.passed, r.detail))
        .collect()
}

/// A simulated vision-language world.
#[pyclass(frozen)]
struct World {
    inner: SimulatedWorld,
}

#[pymethods]
impl World {
    /// Builds the world of an experiment config (JSON), or the default one.
    #[new]
    #[pyo3(signature = (config_json = None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config_json)?.resolved();
        Ok(Self { inner: sample_world(&cfg.world).map_err(to_py)? })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau()
    }

    fn class_names(&self) -> Vec<String> {
        self.inner.vocab.class_names.clone()
    }

    /// Unit text embeddings under the zero prompt, one per class.
    fn zero_shot_text(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.zero_shot_text().map_err(to_py)?.into_iter().map(|e| e.values).collect())
    }

    fn train_embeddings(&self) -> Vec<Vec<f64>> {
        self.inner.train.iter().map(|e| e.image_embedding.values.clone()).collect()
    }

    fn train_labels(&self) -> Vec<usize> {
        self.inner.train.iter().map(|e| e.true_label).collect()
    }

    fn test_embeddings(&self) -> Vec<Vec<f64>> {
        self.inner.test.iter().map(|e| e.image_embedding.values.clone()).collect()
    }

    fn test_labels(&self) -> Vec<usize> {
        self.inner.test.iter().map(|e| e.true_label).collect()
    }

    /// Zero-shot class probabilities of one image embedding.
    fn predict_zero_shot(&self, image: Vec<f64>) -> PyResult<Vec<f64>> {
        let text = self.inner.zero_shot_text().map_err(to_py)?;
        let sims = text.iter().map(|g| cos_core(&image, &g.values)).collect::<Result<Vec<_>, _>>().map_err(to_py)?;
        Ok(softmax_core(&sims, self.inner.tau()).map_err(to_py)?.probs)
    }

    /// Mean cross-entropy of labelled images under the zero text prompt.
    fn zero_prompt_loss(&self, images: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        if images.len() != labels.len() {
            return Err(PyValueError::new_err("one label per image is required"));
        }
        let xs = images
            .into_iter()
            .map(air_core::math::EmbeddingVector::raw)
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?;
        let batch: Vec<_> = xs.iter().zip(labels).collect();
        let weights = vec![1.0; batch.len()];
        let prompt = self.inner.init_prompt(PromptMode::Text);
        self.inner.loss(&prompt, &batch, &weights).map_err(to_py)
    }
}

#[pymodule]
fn air(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(temperature_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(argmax, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_to_dir, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_class::<World>()?;
    Ok(())
}
