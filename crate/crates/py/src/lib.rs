//! Python bindings: graphs, shift and consensus matrices, the GCNN model with
//! its gradients, round-count accounting and the training loops.

use ::fdgnn as core;
use core::data::Sample;
use core::gcnn::{self, Activation, InitScheme, LayerSpec, ParamSet};
use core::graph::{self, ShiftVariant};
use core::netsim::{self, CommLedger, Network, Strategy};
use core::optim::{OptimizerConfig, OptimizerKind};
use core::trainer::{self, MetricsLog, RunConfig};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::NonFinite { step, .. } => {
            PyArithmeticError::new_err(format!("non-finite values after update {step}"))
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged feature rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn shift_variant(name: &str) -> PyResult<ShiftVariant> {
    name.parse().map_err(err)
}

fn activation(name: &str) -> PyResult<Activation> {
    match name {
        "leaky-relu" => Ok(Activation::leaky()),
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        _ => Err(PyValueError::new_err(format!("unknown activation {name:?}"))),
    }
}

#[pyclass(name = "Graph", module = "fdgnn")]
struct PyGraph {
    inner: graph::Graph,
}

#[pymethods]
impl PyGraph {
    #[new]
    fn new(n: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        Ok(PyGraph {
            inner: graph::Graph::from_edges(n, edges).map_err(err)?,
        })
    }

    #[staticmethod]
    fn barabasi_albert(n: usize, m: usize, seed: u64) -> PyResult<Self> {
        Ok(PyGraph {
            inner: graph::generate_ba(n, m, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn erdos_renyi(n: usize, p: f64, seed: u64) -> PyResult<Self> {
        Ok(PyGraph {
            inner: graph::generate_er(n, p, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn complete(n: usize) -> Self {
        PyGraph {
            inner: graph::Graph::complete(n),
        }
    }

    #[staticmethod]
    fn path(n: usize) -> Self {
        PyGraph {
            inner: graph::Graph::path(n),
        }
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges()
    }

    fn degree(&self, i: usize) -> PyResult<usize> {
        if i >= self.inner.node_count() {
            return Err(PyValueError::new_err("node out of range"));
        }
        Ok(self.inner.degree(i))
    }

    fn is_connected(&self) -> bool {
        self.inner.is_connected()
    }

    #[pyo3(signature = (variant = "normalized-adjacency"))]
    fn shift_matrix(&self, variant: &str) -> PyResult<Vec<Vec<f64>>> {
        let s = graph::build_shift(&self.inner, shift_variant(variant)?).map_err(err)?;
        Ok(matrix_rows(&s.matrix))
    }

    fn metropolis_weights(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(matrix_rows(&graph::metropolis_weights(&self.inner).map_err(err)?.matrix))
    }

    fn __repr__(&self) -> String {
        format!("Graph(n={}, edges={})", self.inner.node_count(), self.inner.edge_count())
    }
}

/// GCNN parameters `Θ₀, Θ₁` per layer.
#[pyclass(name = "Model", module = "fdgnn")]
struct PyModel {
    params: ParamSet,
    shift: ShiftVariant,
}

impl PyModel {
    fn sample(&self, g: &PyGraph, features: &[Vec<f64>], labels: Vec<f64>) -> PyResult<Sample> {
        let features = to_matrix(features)?;
        if features.nrows() != g.inner.node_count() || labels.len() != g.inner.node_count() {
            return Err(PyValueError::new_err("one feature row and one label per node required"));
        }
        Ok(Sample { features, labels })
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (widths, activation = "leaky-relu", shift = "normalized-adjacency", seed = 0))]
    fn new(widths: Vec<usize>, activation: &str, shift: &str, seed: u64) -> PyResult<Self> {
        if widths.len() < 2 {
            return Err(PyValueError::new_err("widths must list g0, ..., gL"));
        }
        let specs = LayerSpec::chain(&widths, self::activation(activation)?);
        Ok(PyModel {
            params: gcnn::init_params(&specs, InitScheme::GlorotUniform, seed).map_err(err)?,
            shift: shift_variant(shift)?,
        })
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.params.widths()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn flatten(&self) -> Vec<f64> {
        self.params.flatten()
    }

    fn assign(&mut self, flat: Vec<f64>) -> PyResult<()> {
        self.params.assign_flat(&flat).map_err(err)
    }

    fn forward(&self, graph: &PyGraph, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let s = graph::build_shift(&graph.inner, self.shift).map_err(err)?;
        let (y, _) = gcnn::forward(&self.params, &s, &to_matrix(&features)?).map_err(err)?;
        Ok(y.iter().copied().collect())
    }

    /// Gradient of the node-mean squared error.
    fn gradient(&self, graph: &PyGraph, features: Vec<Vec<f64>>, labels: Vec<f64>) -> PyResult<Vec<f64>> {
        let sample = self.sample(graph, &features, labels)?;
        let s = graph::build_shift(&graph.inner, self.shift).map_err(err)?;
        gcnn::central_gradient(&self.params, &s, &sample.features, &sample.labels).map_err(err)
    }

    #[pyo3(signature = (graph, features, labels, step = 1e-6))]
    fn numerical_gradient(
        &self,
        graph: &PyGraph,
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        step: f64,
    ) -> PyResult<Vec<f64>> {
        let sample = self.sample(graph, &features, labels)?;
        let s = graph::build_shift(&graph.inner, self.shift).map_err(err)?;
        gcnn::numerical_gradient(&self.params, &s, &sample.features, &sample.labels, step).map_err(err)
    }

    /// Per-node local gradients from the message-passing protocol, one list per node.
    fn local_gradients(&self, graph: &PyGraph, features: Vec<Vec<f64>>, labels: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let sample = self.sample(graph, &features, labels)?;
        let mut net = Network::new(graph.inner.clone(), self.shift, &self.params).map_err(err)?;
        let cfg = OptimizerConfig::new(OptimizerKind::DSgd, 0.0);
        net.run_minibatch(&[sample], Strategy::PiggybackDo, Some(&cfg), 0.0, &mut CommLedger::new())
            .map_err(err)?;
        Ok(net.agents().iter().map(|a| a.grad_accum().to_vec()).collect())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.params.save(path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model(widths={:?}, shift={})", self.params.widths(), self.shift.name())
    }
}

fn strategy(name: &str) -> PyResult<Strategy> {
    name.parse().map_err(err)
}

#[pyfunction]
fn strategies() -> Vec<&'static str> {
    Strategy::ALL.iter().map(|s| s.name()).collect()
}

/// Closed-form rounds per mini-batch.
#[pyfunction]
#[pyo3(signature = (strategy, layers, batch, k = 1))]
fn round_count(strategy: &str, layers: usize, batch: usize, k: usize) -> PyResult<usize> {
    Ok(netsim::table_round_count(self::strategy(strategy)?, layers, batch, k))
}

/// Rounds, broadcasts and scalars measured by simulating one mini-batch.
#[pyfunction]
#[pyo3(signature = (strategy, layers, batch, k = 1, seed = 0))]
fn simulate_costs<'py>(
    py: Python<'py>,
    strategy: &str,
    layers: usize,
    batch: usize,
    k: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let ledger = netsim::simulate_costs(self::strategy(strategy)?, layers, batch, k, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("rounds", ledger.rounds)?;
    d.set_item("broadcasts", ledger.broadcasts)?;
    d.set_item("scalars", ledger.scalars)?;
    Ok(d)
}

fn metrics<'py>(py: Python<'py>, log: &MetricsLog) -> PyResult<Vec<Bound<'py, PyDict>>> {
    log.records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("t", r.t)?;
            d.set_item("rounds", r.rounds)?;
            d.set_item("train_mse", r.train_mse)?;
            d.set_item("test_mse", r.test_mse)?;
            d.set_item("consensus_gap", r.consensus_gap)?;
            Ok(d)
        })
        .collect()
}

/// Trains from a JSON run configuration (missing keys take defaults) and
/// returns the metrics records.
#[pyfunction]
#[pyo3(signature = (config = "{}"))]
fn train<'py>(py: Python<'py>, config: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg: RunConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let log = py
        .detach(|| {
            if cfg.optimizer.kind.is_central() {
                trainer::train_centralized(&cfg).map(|r| r.log)
            } else {
                trainer::train_distributed(&cfg).map(|r| r.log)
            }
        })
        .map_err(err)?;
    metrics(py, &log)
}

/// The default run configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&RunConfig::default()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn fdgnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(strategies, m)?)?;
    m.add_function(wrap_pyfunction!(round_count, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_costs, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
