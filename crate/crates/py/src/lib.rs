//! Python bindings: candidate/search-space handling, the LIF neuron,
//! the energy model, and the end-to-end train/search/evaluate/report
//! pipeline. Structured results cross the boundary as JSON strings so
//! the Python side can use plain `json`.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use autospikformer::energy::{flops_catalog, model_energy, uniform_trace};
use autospikformer::error::Error;
use autospikformer::evolution::{self, EvoConfig};
use autospikformer::lif::{lif_sequence, LifParams};
use autospikformer::pipeline::{cmd_evaluate, cmd_report, cmd_search, cmd_train, RunConfig};
use autospikformer::rng::Rng;
use autospikformer::space::{self, ArchSpec, FixedBackbone, SpaceKind};
use autospikformer::tensor::Tensor;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numeric(m) => PyRuntimeError::new_err(format!("numeric error: {m}")),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// A search candidate: either a full transformer gene tuple or a
/// 9-gene SNN-parameter tuple over a fixed backbone.
#[pyclass(name = "Candidate")]
#[derive(Clone)]
struct PyCandidate {
    inner: space::Candidate,
}

#[pymethods]
impl PyCandidate {
    #[new]
    fn new(tuple: &str) -> PyResult<Self> {
        Ok(PyCandidate { inner: tuple.parse().map_err(py_err)? })
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Candidate(\"{}\")", self.inner)
    }

    fn __eq__(&self, other: &PyCandidate) -> bool {
        self.inner == other.inner
    }

    /// Flat gene vector in tuple order.
    fn genes(&self) -> Vec<f64> {
        self.inner.genes()
    }

    #[getter]
    fn time_step(&self) -> usize {
        self.inner.time_step()
    }
}

/// One of the three searchable spaces: s_ts, s_tl or s_s.
#[pyclass(name = "SearchSpace")]
struct PySearchSpace {
    inner: space::SearchSpace,
}

#[pymethods]
impl PySearchSpace {
    #[new]
    fn new(kind: &str) -> PyResult<Self> {
        let kind: SpaceKind = kind.parse().map_err(py_err)?;
        Ok(PySearchSpace { inner: space::SearchSpace::from_kind(kind) })
    }

    fn __repr__(&self) -> String {
        format!("SearchSpace(\"{}\")", self.inner.kind)
    }

    /// Violation messages; empty means valid.
    fn validate(&self, candidate: &PyCandidate) -> Vec<String> {
        space::validate(&candidate.inner, &self.inner)
    }

    fn random_candidate(&self, seed: u64) -> PyCandidate {
        let mut rng = Rng::new(seed);
        PyCandidate { inner: evolution::random_candidate(&self.inner, &mut rng) }
    }

    #[pyo3(signature = (candidate, seed, mutation_prob = 0.2))]
    fn mutate(&self, candidate: &PyCandidate, seed: u64, mutation_prob: f64) -> PyCandidate {
        let mut rng = Rng::new(seed);
        PyCandidate { inner: evolution::mutate(&candidate.inner, &self.inner, &mut rng, mutation_prob) }
    }

    fn crossover(&self, a: &PyCandidate, b: &PyCandidate, seed: u64) -> PyResult<PyCandidate> {
        let mut rng = Rng::new(seed);
        Ok(PyCandidate { inner: evolution::crossover(&a.inner, &b.inner, &mut rng).map_err(py_err)? })
    }
}

/// Run a 1-D input-current sequence through one LIF neuron from rest;
/// returns the spike train and the firing rate.
#[pyfunction]
fn lif_spike_train(inputs: Vec<f32>, u_th: f32, tau: f32) -> PyResult<(Vec<f32>, f64)> {
    let t = inputs.len();
    let tensor = Tensor::new(vec![t, 1], inputs).map_err(py_err)?;
    let params = LifParams::new(u_th, tau).map_err(py_err)?;
    let (spikes, stats) = lif_sequence(&tensor, &params).map_err(py_err)?;
    Ok((spikes.data().to_vec(), stats.fr()))
}

/// Total model energy in joules for an architecture (candidate tuple
/// string) billed at one uniform firing rate, CIFAR-scale shapes.
#[pyfunction]
fn uniform_energy(arch: &str, fr: f64, time_step: usize) -> PyResult<f64> {
    let candidate: space::Candidate = arch.parse().map_err(py_err)?;
    let backbone = match candidate {
        space::Candidate::Snn(_) => Some(FixedBackbone::spikformer_4_384()),
        space::Candidate::Arch(_) => None,
    };
    let spec = ArchSpec::resolve(&candidate, backbone.as_ref()).map_err(py_err)?;
    let catalog = flops_catalog(&spec, (32, 32), 3, 10).map_err(py_err)?;
    let trace = uniform_trace(&catalog, fr);
    let report = model_energy(&catalog, &trace, time_step).map_err(py_err)?;
    Ok(report.total_energy)
}

#[pyfunction]
fn kendall_tau(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    evolution::kendall_tau(&x, &y).map_err(py_err)
}

fn records_to_jsonl(records: &[evolution::FitnessRecord]) -> PyResult<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| PyValueError::new_err(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Evolutionary (or random-baseline) search under a closed-form toy
/// scorer -- no supernet training involved. Returns the fitness
/// records as a JSONL string.
#[pyfunction]
#[pyo3(signature = (kind, budget, seed, alpha = 0.5, baseline = false))]
fn toy_search(kind: &str, budget: usize, seed: u64, alpha: f64, baseline: bool) -> PyResult<String> {
    let kind: SpaceKind = kind.parse().map_err(py_err)?;
    let space = space::SearchSpace::from_kind(kind);
    let backbone = match kind {
        SpaceKind::SS => Some(FixedBackbone::spikformer_4_384()),
        _ => None,
    };
    let evaluator = evolution::toy_evaluator(backbone, (32, 32), 10);
    let records = if baseline {
        evolution::random_search(&space, |c| evaluator(c), budget, alpha, seed).map_err(py_err)?
    } else {
        let config = EvoConfig {
            alpha,
            seed,
            total_sample_budget: Some(budget),
            ..EvoConfig::default()
        };
        evolution::evolve(&space, |c| evaluator(c), &config).map_err(py_err)?.records
    };
    records_to_jsonl(&records)
}

/// Train the supernet per a JSON run config (schema as for the CLI);
/// returns the per-epoch loss history. Resumable.
#[pyfunction]
fn train(config_json: &str) -> PyResult<Vec<f32>> {
    let config = RunConfig::from_json(config_json).map_err(py_err)?;
    cmd_train(&config).map_err(py_err)
}

/// Search over a trained checkpoint; appends to the configured results
/// JSONL and returns this run's records as a JSONL string.
#[pyfunction]
#[pyo3(signature = (config_json, baseline = false))]
fn search(config_json: &str, baseline: bool) -> PyResult<String> {
    let config = RunConfig::from_json(config_json).map_err(py_err)?;
    let outcome = cmd_search(&config, baseline).map_err(py_err)?;
    records_to_jsonl(&outcome.records)
}

/// Inherited-weight evaluation of one candidate tuple string; returns
/// the result (accuracy, per-layer firing rates, energy) as JSON.
#[pyfunction]
fn evaluate(config_json: &str, candidate: &str) -> PyResult<String> {
    let config = RunConfig::from_json(config_json).map_err(py_err)?;
    let result = cmd_evaluate(&config, candidate).map_err(py_err)?;
    serde_json::to_string_pretty(&result).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Scatter SVG + front CSV + Kendall tau from a results JSONL.
/// Returns (record_count, tau).
#[pyfunction]
fn report(results_path: &str, report_dir: &str) -> PyResult<(usize, f64)> {
    let summary =
        cmd_report(results_path.as_ref(), report_dir.as_ref()).map_err(py_err)?;
    Ok((summary.record_count, summary.tau))
}

#[pymodule]
fn autospikformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCandidate>()?;
    m.add_class::<PySearchSpace>()?;
    m.add_function(wrap_pyfunction!(lif_spike_train, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_energy, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(toy_search, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add("E_MAC", autospikformer::energy::E_MAC)?;
    m.add("E_AC", autospikformer::energy::E_AC)?;
    Ok(())
}
