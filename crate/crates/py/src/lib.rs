//! Python bindings: corpus generation, training, evaluation, the CCC
//! metric, and the gradient checker, driven by the same JSON configs as the
//! CLI. Results come back as JSON strings or plain dicts so the module has
//! no Python-side dependencies.

use emofuse_core::config::RunConfig;
use emofuse_core::data;
use emofuse_core::error::Error;
use emofuse_core::gradcheck;
use emofuse_core::head;
use emofuse_core::train as training;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::{Path, PathBuf};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Data(_) | Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Generate a synthetic corpus; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_json=None, seed=7))]
fn generate_corpus(out_dir: &str, spec_json: Option<&str>, seed: u64) -> PyResult<String> {
    let spec: data::SignalSpec = match spec_json {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("signal spec: {e}")))?,
        None => data::SignalSpec::default(),
    };
    let dir = PathBuf::from(out_dir);
    data::generate_corpus(&spec, seed, &dir).map_err(to_py_err)?;
    Ok(dir.join("manifest.json").display().to_string())
}

/// Train per a run-config JSON string; writes checkpoint/metrics into the
/// config's out_dir and returns the metrics record as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, quiet=true))]
fn train(config_json: &str, quiet: bool) -> PyResult<String> {
    let cfg = RunConfig::from_json_str(config_json).map_err(to_py_err)?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| PyValueError::new_err("config must set manifest"))?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| PyValueError::new_err("config must set out_dir"))?;
    let corpus = data::load_corpus(Path::new(&manifest)).map_err(to_py_err)?;
    let opts = training::TrainOptions {
        quiet,
        ..Default::default()
    };
    let result = training::train_run(&cfg, &corpus, &opts).map_err(to_py_err)?;
    let dir = PathBuf::from(out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    training::save_checkpoint(&dir.join("checkpoint.json"), &result, &corpus.manifest.spec.widths)
        .map_err(to_py_err)?;
    std::fs::write(dir.join("config.json"), result.config.to_json_pretty())
        .map_err(|e| PyIOError::new_err(e.to_string()))?;
    let metrics = serde_json::to_string_pretty(&result.metrics)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    std::fs::write(dir.join("metrics.json"), &metrics)
        .map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(metrics)
}

/// Score a checkpoint on a manifest's devel split; returns
/// {target: mean per-utterance CCC}.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, cultures=None))]
fn evaluate(
    py: Python<'_>,
    checkpoint: &str,
    manifest: &str,
    cultures: Option<Vec<String>>,
) -> PyResult<Py<PyDict>> {
    let (model, cfg) = training::load_checkpoint(Path::new(checkpoint)).map_err(to_py_err)?;
    let corpus = data::load_corpus(Path::new(manifest)).map_err(to_py_err)?;
    let cultures = cultures.unwrap_or_else(|| cfg.cultures.clone());
    let (_, devel) = data::split(&corpus.manifest, &cultures).map_err(to_py_err)?;
    let bundles: Vec<&data::FeatureBundle> = devel
        .iter()
        .filter_map(|r| corpus.bundle(&r.id))
        .collect();
    let scores = training::eval_model(&model, &bundles).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    for (k, v) in scores {
        dict.set_item(k, v)?;
    }
    Ok(dict.into())
}

/// Concordance correlation coefficient of a prediction/label pair; returns
/// the full moment breakdown.
#[pyfunction]
fn ccc(py: Python<'_>, pred: Vec<f64>, label: Vec<f64>) -> PyResult<Py<PyDict>> {
    let stats = head::ccc(&pred, &label).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("ccc", stats.ccc)?;
    dict.set_item("ccc_loss", stats.ccc_loss)?;
    dict.set_item("mean_pred", stats.mean_pred)?;
    dict.set_item("mean_label", stats.mean_label)?;
    dict.set_item("var_pred", stats.var_pred)?;
    dict.set_item("var_label", stats.var_label)?;
    dict.set_item("covariance", stats.covariance)?;
    dict.set_item("n_frames", stats.n_frames)?;
    Ok(dict.into())
}

/// Analytic gradient of the CCC loss with respect to the predictions.
#[pyfunction]
fn ccc_loss_grad(pred: Vec<f64>, label: Vec<f64>) -> PyResult<Vec<f64>> {
    head::ccc_loss_grad(&pred, &label).map_err(to_py_err)
}

/// Finite-difference gradient check; returns (max_rel_err, [(layer, params,
/// max_rel_err), ...]).
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn run_gradcheck(config_json: Option<&str>) -> PyResult<(f64, Vec<(String, usize, f64)>)> {
    let cfg = match config_json {
        Some(text) => RunConfig::from_json_str(text).map_err(to_py_err)?,
        None => RunConfig::default(),
    };
    let report = gradcheck::run_gradcheck(&cfg).map_err(to_py_err)?;
    let rows = report
        .layers
        .iter()
        .map(|l| (l.layer.clone(), l.params_checked, l.max_rel_err))
        .collect();
    Ok((report.max_rel_err, rows))
}

#[pymodule]
fn emofuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ccc, m)?)?;
    m.add_function(wrap_pyfunction!(ccc_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
