//! Python bindings: the model types plus simulation, likelihood, posterior,
//! fitting, score/information, and the verification suites.
//!
//! Build as a cdylib and import as `hmt_py`; see the repository README for
//! the copy step.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use hmt_core::error::HmtError;
use hmt_core::estimation::{
    fisher_limit_estimate, fit_mle, observed_information, score, FitOptions, InfoMethod, Init,
};
use hmt_core::experiments::{
    run_experiment, run_verify_suite, ExperimentConfig, ExperimentKind, VerifySuite,
};
use hmt_core::inference::{
    increment, log_likelihood, masked_log_density, posterior_marginal, ObservationMask,
};
use hmt_core::model::{self, HmtTheta, ModelSpec, Obs};
use hmt_core::simulate as hsim;
use hmt_core::simulate::RootLaw;
use hmt_core::tree::VertexId;

fn err(e: HmtError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_json<T: serde::de::DeserializeOwned>(json: &str, what: &str) -> PyResult<T> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

/// Model family description; construct from the model.json schema.
#[pyclass(module = "hmt_py", name = "ModelSpec")]
#[derive(Clone)]
struct PyModelSpec {
    inner: ModelSpec,
}

#[pymethods]
impl PyModelSpec {
    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Self> {
        let inner: ModelSpec = parse_json(json, "model spec")?;
        inner.validate().map_err(err)?;
        Ok(PyModelSpec { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (states, epsilon_floor=1e-3))]
    fn gaussian(states: usize, epsilon_floor: f64) -> PyResult<Self> {
        Ok(PyModelSpec {
            inner: ModelSpec::new(states, model::EmissionFamily::Gaussian, epsilon_floor)
                .map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn states(&self) -> usize {
        self.inner.states
    }

    #[getter]
    fn packed_dim(&self) -> usize {
        self.inner.packed_dim()
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec(states={}, dim={})", self.inner.states, self.inner.packed_dim())
    }
}

/// Full parameter vector; construct from the theta.json schema.
#[pyclass(module = "hmt_py", name = "Theta")]
#[derive(Clone)]
struct PyTheta {
    inner: HmtTheta,
}

#[pymethods]
impl PyTheta {
    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Self> {
        Ok(PyTheta { inner: parse_json(json, "theta")? })
    }

    #[staticmethod]
    fn gaussian(transition: Vec<Vec<f64>>, mu: Vec<f64>, sigma: Vec<f64>) -> Self {
        PyTheta {
            inner: HmtTheta {
                transition,
                emission: model::EmissionParams::Gaussian { mu, sigma },
            },
        }
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn transition(&self) -> Vec<Vec<f64>> {
        self.inner.transition.clone()
    }

    fn mixing_profile(&self) -> PyResult<(f64, f64, f64)> {
        let p = model::mixing_profile(&self.inner.transition).map_err(err)?;
        Ok((p.sigma_minus, p.sigma_plus, p.rho))
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn __repr__(&self) -> String {
        format!("Theta(states={})", self.inner.num_states())
    }
}

/// One simulated tree of observations.
#[pyclass(module = "hmt_py", name = "Sample")]
struct PySample {
    inner: hsim::Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Records as a list of dicts with keys path, y, x.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let out = PyList::empty(py);
        for r in &self.inner.records {
            let d = PyDict::new(py);
            d.set_item("path", r.path.to_string())?;
            match r.y {
                Obs::Int(v) => d.set_item("y", v)?,
                Obs::Real(v) => d.set_item("y", v)?,
            }
            if let Some(x) = r.x {
                d.set_item("x", x)?;
            }
            out.append(d)?;
        }
        Ok(out)
    }

    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_jsonl(&mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        let inner =
            hsim::Sample::read_jsonl(std::io::BufReader::new(text.as_bytes())).map_err(err)?;
        Ok(PySample { inner })
    }
}

fn parse_root_law(law: &str) -> PyResult<RootLaw> {
    if law == "stationary" {
        return Ok(RootLaw::Stationary);
    }
    if let Some(x) = law.strip_prefix("dirac:") {
        return Ok(RootLaw::Dirac(
            x.parse().map_err(|_| PyValueError::new_err("bad dirac state"))?,
        ));
    }
    Err(PyValueError::new_err(format!("unrecognized root law {law:?}")))
}

/// Draw one HMT realization on the complete binary tree down to `depth`.
#[pyfunction]
#[pyo3(signature = (spec, theta, depth, root_law="stationary", seed=0))]
fn simulate(
    spec: &PyModelSpec,
    theta: &PyTheta,
    depth: usize,
    root_law: &str,
    seed: u64,
) -> PyResult<PySample> {
    let law = parse_root_law(root_law)?;
    Ok(PySample {
        inner: hsim::sample(&spec.inner, &theta.inner, depth, &law, seed).map_err(err)?,
    })
}

/// Root-conditioned log-likelihood `ℓ_{n,x}(θ)`.
#[pyfunction]
fn log_likelihood_py(theta: &PyTheta, sample: &PySample, x_root: usize) -> PyResult<f64> {
    log_likelihood(&theta.inner, &sample.inner, x_root).map_err(err)
}

/// Masked log-density `log p(Y_A | X_anchor = x)` for path strings in `mask`.
#[pyfunction]
fn masked_log_density_py(
    theta: &PyTheta,
    sample: &PySample,
    mask: Vec<String>,
    anchor: &str,
    anchor_state: usize,
) -> PyResult<f64> {
    let vertices: Vec<VertexId> = mask
        .iter()
        .map(|s| VertexId::parse(s))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let anchor = VertexId::parse(anchor).map_err(err)?;
    let m = ObservationMask::new(vertices, anchor, anchor_state).map_err(err)?;
    masked_log_density(&theta.inner, &sample.inner, &m).map_err(err)
}

/// Exact posterior marginal of the hidden state at `vertex` given all
/// observations and the root state.
#[pyfunction]
fn posterior_marginal_py(
    theta: &PyTheta,
    sample: &PySample,
    vertex: &str,
    x_root: usize,
) -> PyResult<Vec<f64>> {
    let v = VertexId::parse(vertex).map_err(err)?;
    let mask = ObservationMask::full_tree(&sample.inner, x_root);
    posterior_marginal(&theta.inner, &sample.inner, &v, &mask).map_err(err)
}

/// Log-likelihood increment `h_{u,k,x}`.
#[pyfunction]
fn increment_py(
    theta: &PyTheta,
    sample: &PySample,
    u: &str,
    k: usize,
    x: usize,
) -> PyResult<f64> {
    let u = VertexId::parse(u).map_err(err)?;
    Ok(increment(&theta.inner, &sample.inner, &u, k, x, None).map_err(err)?.value)
}

/// Fit by EM with quasi-Newton polish. `init` is "moment", "random:<seed>",
/// or a theta JSON string.
#[pyfunction]
#[pyo3(signature = (sample, x_root, spec, init="moment", max_iter=500, tol=1e-8))]
fn fit_mle_py(
    sample: &PySample,
    x_root: usize,
    spec: &PyModelSpec,
    init: &str,
    max_iter: usize,
    tol: f64,
) -> PyResult<(PyTheta, Vec<f64>, bool)> {
    let init = if init == "moment" {
        Init::Moment
    } else if let Some(seed) = init.strip_prefix("random:") {
        Init::Random(seed.parse().map_err(|_| PyValueError::new_err("bad init seed"))?)
    } else {
        Init::Given(parse_json(init, "init theta")?)
    };
    let opts = FitOptions { max_iter, tol, ..FitOptions::default() };
    let fit = fit_mle(&sample.inner, x_root, &spec.inner, init, &opts).map_err(err)?;
    Ok((PyTheta { inner: fit.theta_hat }, fit.loglik_trace, fit.converged))
}

/// Analytic score in packed coordinates, with the coordinate names.
#[pyfunction]
fn score_py(
    spec: &PyModelSpec,
    theta: &PyTheta,
    sample: &PySample,
    x_root: usize,
) -> PyResult<(Vec<f64>, Vec<String>)> {
    let s = score(&spec.inner, &theta.inner, &sample.inner, x_root).map_err(err)?;
    Ok((s.packed, s.descriptor))
}

/// Observed information `-∇²ℓ` with method "louis" or "finite-diff".
#[pyfunction]
#[pyo3(signature = (spec, theta, sample, x_root, method="louis"))]
fn observed_information_py(
    spec: &PyModelSpec,
    theta: &PyTheta,
    sample: &PySample,
    x_root: usize,
    method: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let method = match method {
        "louis" => InfoMethod::Louis,
        "finite-diff" => InfoMethod::FiniteDiff,
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    };
    let info = observed_information(&spec.inner, &theta.inner, &sample.inner, x_root, method, 16)
        .map_err(err)?;
    Ok(info.rows())
}

/// Monte Carlo estimate of the limiting Fisher information by re-rooting.
#[pyfunction]
fn fisher_limit_py(
    spec: &PyModelSpec,
    theta: &PyTheta,
    k: usize,
    reps: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let (info, _) =
        fisher_limit_estimate(&spec.inner, &theta.inner, k, reps, seed, 0).map_err(err)?;
    Ok(info.rows())
}

#[pyfunction]
fn stationary_distribution(transition: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    model::stationary_distribution(&transition).map_err(err)
}

#[pyfunction]
fn dobrushin(kernel: Vec<Vec<f64>>) -> f64 {
    model::dobrushin(&kernel)
}

/// Run a verification suite ("forgetting", "cauchy", "backward",
/// "two-vertex", "dobrushin", "telescoping", "block") or an experiment kind
/// ("consistency", "score-clt", "mle-clt", "observed-info", "contrast",
/// "coupling", "ergodic") using default configs scaled by `cases`.
#[pyfunction]
#[pyo3(signature = (name, cases=0, seed=None))]
fn run_suite<'py>(
    py: Python<'py>,
    name: &str,
    cases: usize,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let quoted = format!("\"{name}\"");
    let report = if let Ok(suite) = serde_json::from_str::<VerifySuite>(&quoted) {
        let mut cfg = ExperimentConfig::default_for_suite(suite);
        if cases > 0 {
            cfg.knobs.cases = cases;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        run_verify_suite(suite, &cfg).map_err(err)?
    } else if let Ok(kind) = serde_json::from_str::<ExperimentKind>(&quoted) {
        let mut cfg = ExperimentConfig::default_for(kind);
        if cases > 0 {
            cfg.replicates = cases;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        run_experiment(kind, &cfg).map_err(err)?
    } else {
        return Err(PyValueError::new_err(format!("unknown suite {name:?}")));
    };
    let d = PyDict::new(py);
    d.set_item("kind", report.kind.clone())?;
    d.set_item("total", report.total)?;
    d.set_item("violations", report.violations)?;
    d.set_item("pass", report.pass())?;
    Ok(d)
}

#[pymodule]
fn hmt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyTheta>()?;
    m.add_class::<PySample>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood_py, m)?)?;
    m.add_function(wrap_pyfunction!(masked_log_density_py, m)?)?;
    m.add_function(wrap_pyfunction!(posterior_marginal_py, m)?)?;
    m.add_function(wrap_pyfunction!(increment_py, m)?)?;
    m.add_function(wrap_pyfunction!(fit_mle_py, m)?)?;
    m.add_function(wrap_pyfunction!(score_py, m)?)?;
    m.add_function(wrap_pyfunction!(observed_information_py, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_limit_py, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(dobrushin, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    Ok(())
}
