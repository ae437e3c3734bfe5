//! Python bindings: metrics, transport, clustering and the run-directory
//! commands. Configs and reports cross the boundary as JSON strings.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nexvitad::cli::{self, RunConfig, ScoreSource, TrainOptions};
use nexvitad::inference::{self, KMeansOptions};
use nexvitad::metrics::{self, ThresholdMode};
use nexvitad::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Param(_) | Error::Shape { .. } | Error::Json(_) | Error::UndefinedMetric(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) | Error::Data(_) => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Contract(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!(
            "{what} must be a non-empty rectangular list of rows"
        )));
    }
    Tensor::new(&[rows.len(), cols], rows.concat()).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks_exact(t.last_dim()).map(<[f64]>::to_vec).collect()
}

fn config(text: &str) -> PyResult<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::average_precision(&scores, &labels).map_err(to_py)
}

/// Mean per-image IoU; `tau=None` reports the best of the threshold sweep.
/// Returns `(pro, tau)`.
#[pyfunction]
#[pyo3(signature = (maps, masks, tau=None))]
fn pro_mean_iou(maps: Vec<Vec<Vec<f64>>>, masks: Vec<Vec<Vec<f64>>>, tau: Option<f64>) -> PyResult<(f64, f64)> {
    let maps = maps.iter().map(|m| matrix(m, "map")).collect::<PyResult<Vec<_>>>()?;
    let masks = masks.iter().map(|m| matrix(m, "mask")).collect::<PyResult<Vec<_>>>()?;
    let mode = tau.map_or(ThresholdMode::BestSweep, ThresholdMode::Fixed);
    let r = metrics::pro_mean_iou(&maps, &masks, mode).map_err(to_py)?;
    Ok((r.pro, r.tau))
}

/// Entropic transport plan between the rows of `z` and `p`. Returns
/// `(plan, violation, converged)`.
#[pyfunction]
#[pyo3(signature = (z, p, eps=None, max_iter=500, tol=1e-7))]
fn sinkhorn_assign(
    z: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    eps: Option<f64>,
    max_iter: usize,
    tol: f64,
) -> PyResult<(Vec<Vec<f64>>, f64, bool)> {
    let plan = inference::sinkhorn_assign(&matrix(&z, "z")?, &matrix(&p, "p")?, eps, max_iter, tol).map_err(to_py)?;
    Ok((rows(&plan.t), plan.violation, plan.converged))
}

/// Prototypes from Sinkhorn K-means with k-means++ seeding.
#[pyfunction]
#[pyo3(signature = (z, k, seed=0, eps=None))]
fn sinkhorn_kmeans(z: Vec<Vec<f64>>, k: usize, seed: u64, eps: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let opts = KMeansOptions {
        eps,
        seed,
        ..KMeansOptions::default()
    };
    let r = inference::sinkhorn_kmeans(&matrix(&z, "z")?, k, &opts).map_err(to_py)?;
    Ok(rows(&r.prototypes))
}

/// Default run config as JSON.
#[pyfunction]
#[pyo3(signature = (out, seed=0, n_target=1))]
fn default_config(out: &str, seed: u64, n_target: usize) -> PyResult<String> {
    json(&RunConfig::new(out, seed, n_target).map_err(to_py)?)
}

#[pyfunction]
#[pyo3(signature = (config, force=false))]
fn gen_data(py: Python<'_>, config: &str, force: bool) -> PyResult<usize> {
    let cfg = self::config(config)?;
    py.detach(|| {
        cfg.save()?;
        cli::cmd_gen_data(&cfg, force).map(|r| r.len())
    })
    .map_err(to_py)
}

/// Trains and returns the epoch log as JSON.
#[pyfunction]
#[pyo3(signature = (config, force=false, resume=false))]
fn train(py: Python<'_>, config: &str, force: bool, resume: bool) -> PyResult<String> {
    let cfg = self::config(config)?;
    let log = py
        .detach(|| {
            cli::cmd_train(
                &cfg,
                TrainOptions {
                    force,
                    resume,
                    stop_after: None,
                },
            )
        })
        .map_err(to_py)?;
    json(&log)
}

#[pyfunction]
#[pyo3(signature = (config, ks=None))]
fn build_bank(py: Python<'_>, config: &str, ks: Option<Vec<usize>>) -> PyResult<usize> {
    let cfg = self::config(config)?;
    let ks = ks.unwrap_or_else(|| vec![cfg.inference.k]);
    py.detach(|| cli::cmd_build_bank(&cfg, &ks).map(|b| b.len()))
        .map_err(to_py)
}

/// Scores target test images with the bank at `k` (default from the config)
/// or, with `decoder=True`, the trained head. Returns the score tag.
#[pyfunction]
#[pyo3(signature = (config, k=None, decoder=false))]
fn infer(py: Python<'_>, config: &str, k: Option<usize>, decoder: bool) -> PyResult<String> {
    let cfg = self::config(config)?;
    let source = if decoder {
        ScoreSource::Decoder
    } else {
        ScoreSource::Bank(k.unwrap_or(cfg.inference.k))
    };
    py.detach(|| cli::cmd_infer(&cfg, source)).map_err(to_py)?;
    Ok(source.tag())
}

/// Metric report for a score tag as JSON.
#[pyfunction]
fn evaluate(py: Python<'_>, config: &str, tag: &str) -> PyResult<String> {
    let cfg = self::config(config)?;
    json(&py.detach(|| cli::cmd_eval(&cfg, tag)).map_err(to_py)?)
}

/// Full pipeline; returns the bank metric report as JSON.
#[pyfunction]
#[pyo3(signature = (config, force=false))]
fn run(py: Python<'_>, config: &str, force: bool) -> PyResult<String> {
    let cfg = self::config(config)?;
    json(&py.detach(|| cli::cmd_run(&cfg, force)).map_err(to_py)?)
}

#[pymodule]
fn nexvitad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(pro_mean_iou, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn_assign, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn_kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(build_bank, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
