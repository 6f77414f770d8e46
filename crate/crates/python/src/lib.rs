//! Python bindings: dataset generation, experiment runs and inspection of
//! finished runs.

use std::path::PathBuf;

use graphops::model::{Model, Variant};
use graphops::synthdata::{generate as generate_dataset, Dataset as CoreDataset, GeneratorSpec};
use graphops::trainer::{evaluate_model, load_model, run_on, DataSource, ExperimentSpec};
use graphops::Error;
use pyo3::exceptions::{PyFileNotFoundError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Config(_) | Error::Parse(_) | Error::Json(_) | Error::Dimension { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_dict<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// A generated or loaded dataset.
#[pyclass(module = "pygraphops")]
pub struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreDataset::load(&path).map(|inner| Dataset { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.samples.iter().map(|s| s.label).collect()
    }

    #[getter]
    fn families(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.family().to_string()).collect()
    }

    /// Generator settings as a dict.
    fn spec(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_dict(py, &self.inner.spec)
    }

    /// Global feature of sample `i`.
    fn global_feature(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner.samples.get(i).map(|s| s.global_feature.data().to_vec()).ok_or_else(|| PyIndexError::new_err(format!("sample {i} out of range")))
    }

    fn summary(&self) -> String {
        self.inner.summary()
    }
}

/// A trained model loaded from a run directory.
#[pyclass(module = "pygraphops")]
pub struct Run {
    model: Model,
}

impl Run {
    fn sample<'a>(&self, ds: &'a Dataset, i: usize) -> PyResult<&'a graphops::synthdata::VideoSample> {
        let s = ds.inner.samples.get(i).ok_or_else(|| PyIndexError::new_err(format!("sample {i} out of range")))?;
        self.model.check_sample(s).map_err(to_py)?;
        Ok(s)
    }
}

#[pymethods]
impl Run {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        load_model(&dir).map(|model| Run { model }).map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> String {
        self.model.variant().to_string()
    }

    /// Accuracy and loss on the whole dataset.
    fn evaluate(&self, py: Python<'_>, ds: &Dataset) -> PyResult<Py<PyAny>> {
        let data: Vec<_> = ds.inner.samples.iter().collect();
        for s in &data {
            self.model.check_sample(s).map_err(to_py)?;
        }
        let ev = py.detach(|| evaluate_model(&self.model, &data)).map_err(to_py)?;
        to_dict(py, &ev)
    }

    /// Structure weights of sample `i`, one row per edge.
    fn alphas(&self, ds: &Dataset, i: usize) -> PyResult<Vec<Vec<f64>>> {
        let a = self.model.alphas(self.sample(ds, i)?).map_err(to_py)?;
        Ok(a.data().chunks(a.cols()).map(<[f64]>::to_vec).collect())
    }

    /// Signature of the discrete structure derived for sample `i`.
    fn derive(&self, ds: &Dataset, i: usize) -> PyResult<String> {
        Ok(self.model.derive(self.sample(ds, i)?).map_err(to_py)?.signature())
    }
}

/// Generates a dataset. `spec_json` overrides generator defaults.
#[pyfunction]
#[pyo3(signature = (spec_json=None))]
fn generate(py: Python<'_>, spec_json: Option<&str>) -> PyResult<Dataset> {
    let spec: GeneratorSpec = parse_json(spec_json)?;
    let inner = py.detach(|| generate_dataset(&spec)).map_err(to_py)?;
    Ok(Dataset { inner })
}

/// Trains `variant` on `dataset` with the desk preset and writes artifacts
/// under `outdir/<variant>`. Returns the run statistics.
#[pyfunction]
#[pyo3(signature = (dataset, dataset_path, outdir, variant="adaptive_search", seed=0, max_rounds=None, finetune_epochs=None))]
#[allow(clippy::too_many_arguments)]
fn run(
    py: Python<'_>,
    dataset: &Dataset,
    dataset_path: PathBuf,
    outdir: PathBuf,
    variant: &str,
    seed: u64,
    max_rounds: Option<usize>,
    finetune_epochs: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let variant: Variant = variant.parse().map_err(to_py)?;
    let mut spec = ExperimentSpec::desk(variant, DataSource::Path(dataset_path), outdir);
    spec.search.seed = seed;
    if let Some(r) = max_rounds {
        spec.search.max_rounds = r;
        spec.search.min_rounds = spec.search.min_rounds.min(r);
    }
    if let Some(e) = finetune_epochs {
        spec.search.finetune_max_epochs = e;
    }
    let result = py.detach(|| run_on(&spec, &dataset.inner)).map_err(to_py)?;
    to_dict(py, &result.stats)
}

#[pymodule]
fn pygraphops(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Run>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
