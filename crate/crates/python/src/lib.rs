//! Python bindings: simulation designs, datasets, learners, regimes and
//! the exact tree search.

use drdtr_core::learners::{aipw_welfare_estimate, learn, LearnedDtr, LearnerConfig, Method};
use drdtr_core::matrix::Matrix;
use drdtr_core::nuisance::{ForestParams, RegressorSpec};
use drdtr_core::policytree::{exact_tree_search, StageConstraint};
use drdtr_core::scores::{Provenance, ScoreMatrix};
use drdtr_core::simeval::{
    generate, run_benchmark, true_welfare, BenchmarkMethod, BenchmarkOptions, DgpKind, DgpSpec,
    PotentialOutcomePanel,
};
use drdtr_core::{DtrError, PanelDataset, PolicyClass, StageSchema};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: DtrError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Matrix::from_rows(&rows))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Observed panel of units followed over several stages.
#[pyclass(name = "Panel", module = "drdtr", frozen)]
struct PyPanel {
    inner: PanelDataset,
}

#[pymethods]
impl PyPanel {
    #[staticmethod]
    fn load_csv(
        path: &str,
        actions_per_stage: Vec<usize>,
        state_dims: Vec<usize>,
        outcome_present: Vec<bool>,
    ) -> PyResult<Self> {
        let schema = StageSchema::new(actions_per_stage, state_dims, outcome_present).map_err(err)?;
        let inner = PanelDataset::load_csv(path, &schema).map_err(err)?;
        Ok(Self { inner })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_csv(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_stages(&self) -> usize {
        self.inner.num_stages()
    }

    fn actions(&self, stage: usize) -> PyResult<Vec<usize>> {
        self.inner.schema().check_stage(stage).map_err(err)?;
        Ok(self.inner.actions(stage).to_vec())
    }

    fn outcomes(&self, stage: usize) -> PyResult<Vec<f64>> {
        self.inner.schema().check_stage(stage).map_err(err)?;
        Ok(self.inner.outcomes(stage).to_vec())
    }

    /// History matrix `H_t` as a list of rows.
    fn history(&self, stage: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner.schema().check_stage(stage).map_err(err)?;
        Ok(rows(&self.inner.history_features(stage)))
    }

    fn history_columns(&self, stage: usize) -> PyResult<Vec<String>> {
        self.inner.schema().check_stage(stage).map_err(err)?;
        Ok(self.inner.schema().history_column_names(stage))
    }
}

/// A simulated panel together with every unit's potential outcomes.
#[pyclass(name = "Simulation", module = "drdtr", frozen)]
struct PySimulation {
    inner: PotentialOutcomePanel,
}

#[pymethods]
impl PySimulation {
    #[getter]
    fn panel(&self) -> PyPanel {
        PyPanel {
            inner: self.inner.data.clone(),
        }
    }

    /// Mean total outcome along each unit's counterfactual path under `regime`.
    fn true_welfare(&self, regime: &PyRegime) -> PyResult<f64> {
        true_welfare(&self.inner, &regime.inner.dtr).map_err(err)
    }

    fn write_sidecar(&self, path: &str) -> PyResult<()> {
        let file = std::fs::File::create(path).map_err(|e| err(e.into()))?;
        self.inner.write_sidecar(file).map_err(err)
    }
}

/// A learned dynamic treatment regime.
#[pyclass(name = "Regime", module = "drdtr", frozen)]
struct PyRegime {
    inner: LearnedDtr,
}

#[pymethods]
impl PyRegime {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn num_stages(&self) -> usize {
        self.inner.dtr.num_stages()
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    /// Action chosen at `stage` for one history row.
    fn action(&self, stage: usize, history: Vec<f64>) -> PyResult<usize> {
        if stage == 0 || stage > self.inner.dtr.num_stages() {
            return Err(err(DtrError::StageOutOfRange {
                stage,
                num_stages: self.inner.dtr.num_stages(),
            }));
        }
        Ok(self.inner.dtr.stage(stage).evaluate(&history))
    }

    /// Mean objective of each stage's selected policy during learning.
    fn trace(&self) -> Vec<(usize, f64)> {
        self.inner.trace.iter().map(|s| (s.stage, s.objective)).collect()
    }
}

fn config(method: &str, depths: Vec<usize>, seed: u64, k: usize, eta: f64, trees: usize) -> PyResult<LearnerConfig> {
    let classes = depths.into_iter().map(PolicyClass::trees).collect();
    let mut base = LearnerConfig::new(Method::Dr, classes, seed);
    base.k = k;
    base.eta = eta;
    let forest = RegressorSpec::forest(ForestParams {
        num_trees: trees,
        ..ForestParams::default()
    });
    base.propensity = forest.clone();
    base.q = forest;
    Ok(BenchmarkMethod::parse(method, &base).map_err(err)?.config)
}

/// Draw a panel from a named simulation design.
#[pyfunction]
fn simulate(dgp: &str, n: usize, seed: u64) -> PyResult<PySimulation> {
    let kind = DgpKind::parse(dgp).map_err(err)?;
    let inner = generate(&DgpSpec { kind, n, seed }).map_err(err)?;
    Ok(PySimulation { inner })
}

/// Learn a regime. `method` is one of dr, ipw, q_learn, q_search,
/// aipw_simultaneous, optionally suffixed with `+miss_q` or `+miss_ps`.
#[pyfunction]
#[pyo3(name = "learn", signature = (panel, method, depths, seed, k = 5, eta = 0.01, trees = 50))]
fn learn_py(
    py: Python<'_>,
    panel: &PyPanel,
    method: &str,
    depths: Vec<usize>,
    seed: u64,
    k: usize,
    eta: f64,
    trees: usize,
) -> PyResult<PyRegime> {
    let cfg = config(method, depths, seed, k, eta, trees)?;
    let data = &panel.inner;
    let inner = py.detach(|| learn(data, &cfg)).map_err(err)?;
    Ok(PyRegime { inner })
}

/// Cross-fitted AIPW welfare estimate of `regime`: `(value, std_error)`.
#[pyfunction]
#[pyo3(signature = (panel, regime, seed, k = 5, eta = 0.01, trees = 50))]
fn aipw_welfare(
    py: Python<'_>,
    panel: &PyPanel,
    regime: &PyRegime,
    seed: u64,
    k: usize,
    eta: f64,
    trees: usize,
) -> PyResult<(f64, f64)> {
    let depths = vec![0; panel.inner.num_stages()];
    let cfg = config("dr", depths, seed, k, eta, trees)?;
    let (data, dtr) = (&panel.inner, &regime.inner.dtr);
    let est = py.detach(|| aipw_welfare_estimate(data, dtr, &cfg)).map_err(err)?;
    Ok((est.value, est.std_error))
}

/// Best depth-`depth` tree for a score matrix. Returns the tree as JSON and
/// the summed objective.
#[pyfunction]
fn tree_search(scores: Vec<Vec<f64>>, features: Vec<Vec<f64>>, depth: usize) -> PyResult<(String, f64)> {
    let scores = ScoreMatrix::new(1, matrix(scores)?, Provenance::Aipw);
    let features = matrix(features)?;
    let res = exact_tree_search(&scores, &features, depth, &StageConstraint::default(), None).map_err(err)?;
    let json = serde_json::to_string(&res.tree).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((json, res.objective))
}

/// Monte Carlo benchmark; returns the JSON-lines report.
#[pyfunction]
#[pyo3(signature = (dgp, methods, n, reps, seed, n_test = 50_000))]
fn benchmark(
    py: Python<'_>,
    dgp: &str,
    methods: Vec<String>,
    n: usize,
    reps: usize,
    seed: u64,
    n_test: usize,
) -> PyResult<String> {
    let kind = DgpKind::parse(dgp).map_err(err)?;
    let base = LearnerConfig::new(Method::Dr, kind.default_classes(), seed);
    let methods = methods
        .iter()
        .map(|m| BenchmarkMethod::parse(m, &base))
        .collect::<drdtr_core::Result<Vec<_>>>()
        .map_err(err)?;
    let opts = BenchmarkOptions {
        n_train: n,
        n_test,
        reps,
        master_seed: seed,
        timings: false,
    };
    let report = py.detach(|| run_benchmark(&methods, kind, &opts)).map_err(err)?;
    report.to_jsonl().map_err(err)
}

#[pymodule]
fn drdtr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPanel>()?;
    m.add_class::<PySimulation>()?;
    m.add_class::<PyRegime>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(learn_py, m)?)?;
    m.add_function(wrap_pyfunction!(aipw_welfare, m)?)?;
    m.add_function(wrap_pyfunction!(tree_search, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    Ok(())
}
