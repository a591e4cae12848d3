//! Python bindings. Structured results cross the boundary as JSON strings.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use avforensics::docsrepro::{self, RunContext};
use avforensics::objectives::{cgra_loss as cgra, ec_loss as ec, ContrastBatch, EcOptions};
use avforensics::pipeline::{self, ModelParams};
use avforensics::synthcorpus::{self, GenConfig, Split};
use avforensics::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> avforensics::Result<Array2<f64>> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Shape("ragged rows".into()));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, c), rows.into_iter().flatten().collect()).map_err(|e| Error::Shape(e.to_string()))
}

/// Writes a synthetic corpus under `root`. `config` is a JSON object of
/// generator fields; omitted fields keep their defaults.
#[pyfunction]
#[pyo3(signature = (root, config = None))]
fn generate(root: PathBuf, config: Option<&str>) -> PyResult<String> {
    let mut base = serde_json::to_value(GenConfig::default()).map_err(json_err)?;
    if let Some(c) = config {
        let patch: serde_json::Value = serde_json::from_str(c).map_err(json_err)?;
        let obj = patch.as_object().ok_or_else(|| PyValueError::new_err("config must be a JSON object"))?;
        for (k, v) in obj {
            if base.get(k).is_none() {
                return Err(PyValueError::new_err(format!("unknown generator field `{k}`")));
            }
            base[k] = v.clone();
        }
    }
    let cfg: GenConfig = serde_json::from_value(base).map_err(json_err)?;
    let m = synthcorpus::generate_corpus(&cfg, &root).map_err(to_py)?;
    serde_json::to_string(&m).map_err(json_err)
}

/// Metrics report JSON for a checkpoint on a corpus directory.
#[pyfunction]
#[pyo3(signature = (model, corpus, split = None))]
fn evaluate(model: PathBuf, corpus: PathBuf, split: Option<&str>) -> PyResult<String> {
    let split: Option<Split> = split
        .map(|s| serde_json::from_value(serde_json::Value::String(s.into())))
        .transpose()
        .map_err(json_err)?;
    let params = ModelParams::load(&model).map_err(to_py)?;
    let (_, clips) = synthcorpus::load_corpus(&corpus, split).map_err(to_py)?;
    let r = pipeline::evaluate(&params, &clips).map_err(to_py)?;
    serde_json::to_string(&r).map_err(json_err)
}

/// Writes a freshly initialized default model.
#[pyfunction]
fn init_model(path: PathBuf) -> PyResult<String> {
    let p = ModelParams::init(pipeline::ModelConfig::default()).map_err(to_py)?;
    p.save(&path).map_err(to_py)?;
    Ok(p.digest())
}

#[pyfunction]
fn auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != positive.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(pipeline::auc(&scores, &positive))
}

#[pyfunction]
fn fake_probability(z_real: f64, z_fake: f64) -> f64 {
    pipeline::fake_probability([z_real, z_fake])
}

/// Consistency loss of row-aligned phoneme/viseme embeddings.
#[pyfunction]
fn ec_loss(phon: Vec<Vec<f64>>, vis: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let b = ContrastBatch::new(matrix(phon).map_err(to_py)?, matrix(vis).map_err(to_py)?, tau).map_err(to_py)?;
    ec(&b, EcOptions::default()).map_err(to_py)
}

#[pyfunction]
fn cgra_loss(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, lambda: f64) -> PyResult<f64> {
    cgra(&matrix(a).map_err(to_py)?, &matrix(b).map_err(to_py)?, lambda).map_err(to_py)
}

/// Runs a named acceptance experiment and returns its report JSON.
#[pyfunction]
fn run_experiment(name: &str) -> PyResult<String> {
    let spec = docsrepro::find(name).map_err(to_py)?;
    let r = docsrepro::run_experiment(&spec, &mut RunContext::default()).map_err(to_py)?;
    serde_json::to_string(&r).map_err(json_err)
}

#[pymodule]
fn avforensics_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(init_model, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(fake_probability, m)?)?;
    m.add_function(wrap_pyfunction!(ec_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cgra_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(matrix(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
        assert_eq!(matrix(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()[[1, 0]], 3.0);
    }
}
