//! Python bindings. Arrays cross the boundary as nested lists; reports
//! cross as JSON strings so their layout matches the files on disk.

use std::path::PathBuf;

use hyperaudit_core as core;
use hyperaudit_core::data::{gen_synthetic, load_dataset, save_dataset, Split, SyntheticConfig, Target};
use hyperaudit_core::pipeline::{self, RunConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: core::Error) -> PyErr {
    if e.is_internal() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn target(name: &str) -> PyResult<Target> {
    name.parse().map_err(py_err)
}

fn split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split {name:?}"))),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyclass(name = "BandAxis", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyBandAxis(core::BandAxis);

#[pymethods]
impl PyBandAxis {
    #[new]
    fn new(n_bands: usize, lambda_min_nm: f64, lambda_max_nm: f64) -> PyResult<Self> {
        core::BandAxis::new(n_bands, lambda_min_nm, lambda_max_nm)
            .map(PyBandAxis)
            .map_err(py_err)
    }

    /// 150 bands spanning 462.080 to 938.370 nm.
    #[staticmethod]
    fn hyperview() -> Self {
        PyBandAxis(core::BandAxis::hyperview())
    }

    #[getter]
    fn n_bands(&self) -> usize {
        self.0.n_bands
    }

    #[getter]
    fn step_nm(&self) -> f64 {
        self.0.step_nm()
    }

    fn wavelength_of(&self, band_index: usize) -> PyResult<f64> {
        self.0.wavelength_of(band_index).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "BandAxis(n_bands={}, lambda_min_nm={}, lambda_max_nm={})",
            self.0.n_bands, self.0.lambda_min_nm, self.0.lambda_max_nm
        )
    }
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset(core::Dataset);

#[pymethods]
impl PyDataset {
    /// Generate planted synthetic data. `config` is a TOML table with the
    /// same keys as the `[synthetic]` section of a run config.
    #[staticmethod]
    #[pyo3(signature = (seed, config = None))]
    fn synthetic(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let mut cfg: SyntheticConfig = match config {
            Some(text) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => SyntheticConfig::default(),
        };
        cfg.seed = seed;
        gen_synthetic(&cfg).map(PyDataset).map_err(py_err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        load_dataset(dir).map(PyDataset).map_err(py_err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        save_dataset(&self.0, dir).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn axis(&self) -> PyBandAxis {
        PyBandAxis(self.0.axis)
    }

    fn indices(&self, split_name: &str) -> PyResult<Vec<usize>> {
        Ok(self.0.indices(split(split_name)?))
    }

    fn targets(&self, target_name: &str, indices: Vec<usize>) -> PyResult<Vec<f64>> {
        let t = target(target_name)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.0.len()) {
            return Err(PyValueError::new_err(format!("sample {bad} out of range")));
        }
        Ok(self.0.target_values(t, &indices))
    }

    /// Extract the engineered feature table for every sample.
    #[pyo3(signature = (spatial = false))]
    fn features(&self, spatial: bool) -> PyResult<PyFeatureTable> {
        core::features::extract_dataset(&self.0, spatial)
            .map(PyFeatureTable)
            .map_err(py_err)
    }
}

#[pyclass(name = "FeatureTable", frozen)]
struct PyFeatureTable(core::FeatureTable);

#[pymethods]
impl PyFeatureTable {
    #[getter]
    fn n_samples(&self) -> usize {
        self.0.n_samples()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.0.n_features()
    }

    #[getter]
    fn sample_ids(&self) -> Vec<usize> {
        self.0.sample_ids.clone()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.0.schema.fingerprint()
    }

    fn headers(&self) -> Vec<String> {
        self.0.schema.headers()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.rows().map(<[f64]>::to_vec).collect()
    }

    fn select_samples(&self, ids: Vec<usize>) -> PyResult<Self> {
        self.0.select_samples(&ids).map(PyFeatureTable).map_err(py_err)
    }

    fn project(&self, feature_ids: Vec<usize>) -> PyResult<Self> {
        self.0.project(&feature_ids).map(PyFeatureTable).map_err(py_err)
    }
}

#[pyclass(name = "Forest", frozen)]
struct PyForest(core::Forest);

#[pymethods]
impl PyForest {
    #[staticmethod]
    #[pyo3(signature = (
        table, y, target_name, *, n_trees = 200, max_depth = 12, min_samples_leaf = 2,
        features_per_split = 0.33, bootstrap = true, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        py: Python<'_>,
        table: &PyFeatureTable,
        y: Vec<f64>,
        target_name: &str,
        n_trees: usize,
        max_depth: usize,
        min_samples_leaf: usize,
        features_per_split: f64,
        bootstrap: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let params = core::ForestParams {
            n_trees,
            max_depth,
            min_samples_leaf,
            features_per_split,
            bootstrap,
            seed,
        };
        let t = target(target_name)?;
        py.detach(|| core::Forest::fit(&table.0, &y, t, &params))
            .map(PyForest)
            .map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        core::Forest::from_json(text)
            .map(PyForest)
            .map_err(PyValueError::new_err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.0.trees.len()
    }

    #[getter]
    fn expected_value(&self) -> f64 {
        self.0.expected_value()
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.predict(&x).map_err(py_err)
    }

    fn predict_table(&self, table: &PyFeatureTable) -> PyResult<Vec<f64>> {
        self.0.predict_table(&table.0).map_err(py_err)
    }

    /// Exact path-dependent attributions for one row.
    fn shap(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        core::shapley::tree_shap(&self.0, &x).map_err(py_err)
    }

    /// Enumerate coalitions; only for forests using few distinct features.
    fn brute_shap(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        core::shapley::brute_shap(&self.0, &x).map_err(py_err)
    }

    fn explain(&self, py: Python<'_>, table: &PyFeatureTable) -> PyResult<PyShapMatrix> {
        py.detach(|| core::shapley::explain_dataset(&self.0, &table.0))
            .map(PyShapMatrix)
            .map_err(py_err)
    }
}

#[pyclass(name = "ShapMatrix", frozen)]
struct PyShapMatrix(core::ShapMatrix);

#[pymethods]
impl PyShapMatrix {
    #[getter]
    fn base_value(&self) -> f64 {
        self.0.base_value
    }

    #[getter]
    fn sample_ids(&self) -> Vec<usize> {
        self.0.sample_ids.clone()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.rows().map(<[f64]>::to_vec).collect()
    }

    /// Sum over samples of absolute attribution, per feature.
    fn global_importance(&self) -> Vec<f64> {
        core::aggregation::global_importance(&self.0)
    }
}

/// Effective run configuration; construct from TOML or use the defaults.
#[pyclass(name = "RunConfig")]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml_text = None))]
    fn new(toml_text: Option<&str>) -> PyResult<Self> {
        let cfg = match toml_text {
            Some(text) => RunConfig::from_toml(text).map_err(py_err)?,
            None => RunConfig::default(),
        };
        Ok(PyRunConfig(cfg))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(path).map(PyRunConfig).map_err(py_err)
    }

    #[getter]
    fn workdir(&self) -> PathBuf {
        self.0.paths.workdir.clone()
    }

    #[setter]
    fn set_workdir(&mut self, dir: PathBuf) {
        self.0.paths.workdir = dir;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    /// Run one named stage, or `"run"` for all of them. Returns the stage's
    /// JSON report where it has one, else `None`.
    fn stage(&self, py: Python<'_>, name: &str) -> PyResult<Option<String>> {
        self.0.validate().map_err(py_err)?;
        let cfg = &self.0;
        match name {
            "gen-data" => py.detach(|| pipeline::gen_data(cfg).map(drop)).map_err(py_err)?,
            "extract" => py.detach(|| pipeline::extract(cfg).map(drop)).map_err(py_err)?,
            "train" => py.detach(|| pipeline::train(cfg).map(drop)).map_err(py_err)?,
            "explain" => py.detach(|| pipeline::explain(cfg)).map_err(py_err)?,
            "aggregate" => py.detach(|| pipeline::aggregate(cfg)).map_err(py_err)?,
            "prune" => return to_json(&py.detach(|| pipeline::prune(cfg)).map_err(py_err)?).map(Some),
            "audit" => return to_json(&py.detach(|| pipeline::audit(cfg)).map_err(py_err)?).map(Some),
            "report" => return to_json(&py.detach(|| pipeline::report(cfg)).map_err(py_err)?).map(Some),
            "run" => return to_json(&py.detach(|| pipeline::run_all(cfg)).map_err(py_err)?).map(Some),
            _ => return Err(PyValueError::new_err(format!("unknown stage {name:?}"))),
        }
        Ok(None)
    }
}

/// Residual diagnostics and red flags for one target, as JSON.
#[pyfunction]
#[pyo3(signature = (pred, truth, importance, sd_ratio = 0.5, coverage = 0.9, mass = 0.5, feature_fraction = 0.01))]
fn audit_target(
    pred: Vec<f64>,
    truth: Vec<f64>,
    importance: Vec<f64>,
    sd_ratio: f64,
    coverage: f64,
    mass: f64,
    feature_fraction: f64,
) -> PyResult<String> {
    let thresholds = core::audit::Thresholds {
        sd_ratio,
        coverage,
        mass,
        feature_fraction,
    };
    thresholds.validate().map_err(py_err)?;
    let rs = core::audit::residual_summary(&pred, &truth).map_err(py_err)?;
    let flags = core::audit::detect_red_flags(&rs, &importance, &thresholds).map_err(py_err)?;
    to_json(&serde_json::json!({ "residuals": rs, "red_flags": flags }))
}

#[pyfunction]
fn mae(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    core::audit::mae(&pred, &truth).map_err(py_err)
}

#[pymodule]
fn hyperaudit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBandAxis>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFeatureTable>()?;
    m.add_class::<PyForest>()?;
    m.add_class::<PyShapMatrix>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(audit_target, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add("TARGETS", Target::ALL.map(Target::name).to_vec())?;
    Ok(())
}
