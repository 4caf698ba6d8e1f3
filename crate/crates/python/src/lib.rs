//! Python bindings for the crossgee crate: dataset construction, model
//! fitting, QIC structure comparison, and the simulation studies.
//!
//! The compiled module is `crossgee_py`; see `python/smoke_test.py` at the
//! repository root for a usage walkthrough.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nalgebra::DMatrix;

use crossgee::cli::{ingest_csv, ColumnMap};
use crossgee::design::{Dataset as CoreDataset, ModelFormula, Obs};
use crossgee::engine::{fit as core_fit, wald_table, FitOptions, GeeFit as CoreFit, Structure};
use crossgee::expfam::Family;
use crossgee::selection::compare_structures;
use crossgee::simulation::{
    run_consistency_study, run_coverage_study, run_selection_study, SimResult, SimScenario,
};
use crossgee::Error as CoreError;

fn to_py_err(e: CoreError) -> PyErr {
    let message = format!("[{}] {e}", e.class());
    match e {
        CoreError::Io(_) => PyIOError::new_err(message),
        _ => PyValueError::new_err(message),
    }
}

fn matrix_to_lists(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// A validated crossover dataset.
#[pyclass(module = "crossgee_py")]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Load a long-format CSV with the conventional column names
    /// (subject, period, occasion, treatment, sequence, response, and
    /// optionally time and baseline).
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Dataset> {
        let inner =
            ingest_csv(std::path::Path::new(path), &ColumnMap::default()).map_err(to_py_err)?;
        Ok(Dataset { inner })
    }

    /// Build a dataset from parallel column vectors.
    #[staticmethod]
    #[pyo3(signature = (subject, period, occasion, treatment, sequence, response,
                        time=None, baseline=None))]
    #[allow(clippy::too_many_arguments)]
    fn from_columns(
        subject: Vec<String>,
        period: Vec<i64>,
        occasion: Vec<i64>,
        treatment: Vec<String>,
        sequence: Vec<String>,
        response: Vec<f64>,
        time: Option<Vec<f64>>,
        baseline: Option<Vec<f64>>,
    ) -> PyResult<Dataset> {
        let n = subject.len();
        let lengths = [
            period.len(),
            occasion.len(),
            treatment.len(),
            sequence.len(),
            response.len(),
            time.as_ref().map_or(n, Vec::len),
            baseline.as_ref().map_or(n, Vec::len),
        ];
        if lengths.iter().any(|&l| l != n) {
            return Err(PyValueError::new_err(format!(
                "column lengths disagree: subject has {n}, others have {lengths:?}"
            )));
        }
        let obs = (0..n)
            .map(|i| Obs {
                subject: subject[i].clone(),
                period: period[i],
                occasion: occasion[i],
                treatment: treatment[i].clone(),
                sequence: sequence[i].clone(),
                response: response[i],
                time: time.as_ref().map(|t| t[i]),
                baseline: baseline.as_ref().map(|b| b[i]),
            })
            .collect();
        Ok(Dataset {
            inner: CoreDataset::new(obs).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn n_obs(&self) -> usize {
        self.inner.n_obs()
    }

    #[getter]
    fn n_subjects(&self) -> usize {
        self.inner.n_subjects()
    }

    #[getter]
    fn n_periods(&self) -> usize {
        self.inner.n_periods()
    }

    #[getter]
    fn occasions(&self) -> usize {
        self.inner.occasions()
    }

    #[getter]
    fn balanced(&self) -> bool {
        self.inner.balanced()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_subjects={}, n_obs={}, periods={}, balanced={})",
            self.inner.n_subjects(),
            self.inner.n_obs(),
            self.inner.n_periods(),
            self.inner.balanced()
        )
    }
}

/// A fitted marginal model.
#[pyclass(module = "crossgee_py", name = "GeeFit")]
struct GeeFit {
    inner: CoreFit,
}

#[pymethods]
impl GeeFit {
    #[getter]
    fn structure(&self) -> &'static str {
        self.inner.structure.name()
    }

    #[getter]
    fn family(&self) -> String {
        format!("{:?}", self.inner.family).to_lowercase()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.clone()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.iter().copied().collect()
    }

    #[getter]
    fn robust_se(&self) -> Vec<f64> {
        self.inner.robust_se()
    }

    #[getter]
    fn dispersion(&self) -> f64 {
        self.inner.dispersion
    }

    #[getter]
    fn alpha1(&self) -> Option<f64> {
        self.inner.alpha1
    }

    /// Between-period correlation estimate as nested lists, present for
    /// Kronecker structures.
    #[getter]
    fn psi(&self) -> Option<Vec<Vec<f64>>> {
        self.inner
            .psi
            .as_ref()
            .map(|p| matrix_to_lists(p.as_matrix()))
    }

    #[getter]
    fn qic(&self) -> f64 {
        self.inner.qic
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn robust_cov(&self) -> Vec<Vec<f64>> {
        matrix_to_lists(&self.inner.robust_cov)
    }

    #[getter]
    fn model_cov(&self) -> Vec<Vec<f64>> {
        matrix_to_lists(&self.inner.model_cov)
    }

    /// Coefficient table: one dict per term with estimate, robust SE,
    /// z statistic, and two-sided p-value.
    fn wald(&self, py: Python<'_>) -> PyResult<Vec<Py<PyDict>>> {
        wald_table(&self.inner)
            .into_iter()
            .map(|row| {
                let d = PyDict::new(py);
                d.set_item("term", row.label)?;
                d.set_item("estimate", row.estimate)?;
                d.set_item("robust_se", row.robust_se)?;
                d.set_item("z", row.z)?;
                d.set_item("p_value", row.p_value)?;
                Ok(d.unbind())
            })
            .collect()
    }

    /// Full fit serialized as a JSON string.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner)
            .map_err(|e| PyValueError::new_err(format!("cannot serialize fit: {e}")))
    }

    fn __repr__(&self) -> String {
        format!(
            "GeeFit(structure={:?}, p={}, qic={:.4}, converged={})",
            self.inner.structure.name(),
            self.inner.beta.len(),
            self.inner.qic,
            self.inner.converged
        )
    }
}

fn parse_formula(terms: &[String]) -> PyResult<ModelFormula> {
    ModelFormula::parse(terms).map_err(to_py_err)
}

fn fit_options(tol: f64, max_iter: usize) -> FitOptions {
    FitOptions {
        tol,
        max_iter,
        ..FitOptions::default()
    }
}

/// Fit one marginal model.
#[pyfunction]
#[pyo3(signature = (dataset, formula, family="gaussian", structure="independence",
                    tol=1e-6, max_iter=200))]
fn fit(
    dataset: &Dataset,
    formula: Vec<String>,
    family: &str,
    structure: &str,
    tol: f64,
    max_iter: usize,
) -> PyResult<GeeFit> {
    let inner = core_fit(
        &dataset.inner,
        &parse_formula(&formula)?,
        Family::parse(family).map_err(to_py_err)?,
        Structure::parse(structure).map_err(to_py_err)?,
        &fit_options(tol, max_iter),
    )
    .map_err(to_py_err)?;
    Ok(GeeFit { inner })
}

/// Fit several working correlation structures and rank them by QIC.
///
/// Returns `(rows, winner)` where `rows` is one dict per candidate in
/// request order and `winner` is the selected model's fit.
#[pyfunction]
#[pyo3(signature = (dataset, formula, family="gaussian", structures=None,
                    tol=1e-6, max_iter=200))]
fn compare(
    py: Python<'_>,
    dataset: &Dataset,
    formula: Vec<String>,
    family: &str,
    structures: Option<Vec<String>>,
    tol: f64,
    max_iter: usize,
) -> PyResult<(Vec<Py<PyDict>>, GeeFit)> {
    let candidates = match structures {
        Some(names) => names
            .iter()
            .map(|n| Structure::parse(n))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py_err)?,
        None => Structure::ALL.to_vec(),
    };
    let report = compare_structures(
        &dataset.inner,
        &parse_formula(&formula)?,
        Family::parse(family).map_err(to_py_err)?,
        &candidates,
        &fit_options(tol, max_iter),
    )
    .map_err(to_py_err)?;

    let rows = report
        .rows
        .iter()
        .map(|row| {
            let d = PyDict::new(py);
            d.set_item("structure", row.structure.name())?;
            d.set_item("qic", row.qic)?;
            d.set_item("delta", row.delta)?;
            d.set_item("corr_params", row.corr_params)?;
            d.set_item("converged", row.converged)?;
            d.set_item("error", row.error.clone())?;
            Ok(d.unbind())
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((
        rows,
        GeeFit {
            inner: report.winner_fit,
        },
    ))
}

fn rows_to_dicts(py: Python<'_>, result: &SimResult) -> PyResult<Vec<Py<PyDict>>> {
    result
        .rows
        .iter()
        .map(|row| {
            let d = PyDict::new(py);
            d.set_item("n", row.n)?;
            d.set_item("structure", &row.structure)?;
            d.set_item("metric", &row.metric)?;
            d.set_item("value", row.value)?;
            d.set_item("lo", row.lo)?;
            d.set_item("hi", row.hi)?;
            Ok(d.unbind())
        })
        .collect()
}

/// Run a simulation study ("selection", "coverage", or "consistency") and
/// return its result rows as dicts.
#[pyfunction]
#[pyo3(signature = (study="selection", periods=3, occasions=5, sequences=2,
                    n_grid=None, reps=100, sigma2=1.0, seed=0,
                    coverage_n=50, coverage_reps=500))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    study: &str,
    periods: usize,
    occasions: usize,
    sequences: usize,
    n_grid: Option<Vec<usize>>,
    reps: usize,
    sigma2: f64,
    seed: u64,
    coverage_n: usize,
    coverage_reps: usize,
) -> PyResult<Vec<Py<PyDict>>> {
    let scenario = SimScenario {
        periods,
        occasions,
        sequences,
        n_grid: n_grid.unwrap_or_else(|| SimScenario::default().n_grid),
        reps,
        sigma2,
        seed,
        ..SimScenario::default()
    };
    let result = match study {
        "selection" => run_selection_study(&scenario),
        "coverage" => run_coverage_study(&scenario, coverage_n, coverage_reps),
        "consistency" => {
            let grid = scenario.n_grid.clone();
            run_consistency_study(&scenario, &grid, scenario.reps)
        }
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown study {other:?}; expected selection, coverage, or consistency"
            )))
        }
    }
    .map_err(to_py_err)?;
    rows_to_dicts(py, &result)
}

/// The seven working correlation structure names.
#[pyfunction]
fn structures() -> Vec<&'static str> {
    Structure::ALL.iter().map(|s| s.name()).collect()
}

#[pymodule]
fn crossgee_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<GeeFit>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(structures, m)?)?;
    Ok(())
}
