//! Python bindings: tensors, the information-theory and conditioning checks,
//! IC-layer forward passes, architecture summaries and training.
//!
//! Structured results come back as plain dicts and lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use ic_lab::convergence::{self, LrRule};
use ic_lab::infotheory::{self, DiscreteJoint, JointPmf};
use ic_lab::layers::{ic_forward, BatchNormState, DropoutMode, DropoutSpec};
use ic_lab::resnet::{Layout, NetSpec, ResNet};
use ic_lab::tensor::{self, Padding};
use ic_lab::trainer::{self, EpochRecord, LrSchedule, RunConfig};
use ic_lab::Rng;

fn err(e: ic_lab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Dense float64 tensor.
#[pyclass(name = "Tensor", module = "ic_lab_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: ic_lab::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: ic_lab::Tensor::new(&shape, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn normal(shape: Vec<usize>, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        Self {
            inner: tensor::sample_normal(&mut rng, &shape, 0.0, 1.0),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &tensor::tensor_to_bytes(&self.inner))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: tensor::tensor_from_bytes(data).map_err(err)?,
        })
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.matmul(&other.inner).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn joint(support_x: Vec<f64>, support_y: Vec<f64>, probs: Vec<f64>) -> PyResult<JointPmf> {
    JointPmf::new(support_x, support_y, probs).map_err(err)
}

/// Shannon entropy in bits.
#[pyfunction]
fn entropy(pmf: Vec<f64>) -> PyResult<f64> {
    infotheory::entropy(&pmf).map_err(err)
}

#[pyfunction]
fn bernoulli_entropy(p: f64) -> f64 {
    infotheory::bernoulli_entropy(p)
}

/// Mutual information in bits of a joint pmf given row-major over `support_x x support_y`.
#[pyfunction]
fn mutual_information(support_x: Vec<f64>, support_y: Vec<f64>, probs: Vec<f64>) -> PyResult<f64> {
    Ok(infotheory::mutual_information(&joint(support_x, support_y, probs)?))
}

#[pyfunction]
fn verify_theorem1<'py>(
    py: Python<'py>,
    support_x: Vec<f64>,
    support_y: Vec<f64>,
    probs: Vec<f64>,
    p_keep: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let j = DiscreteJoint::new(support_x, support_y, probs).map_err(err)?;
    to_py(py, &infotheory::verify_theorem1(&j, p_keep).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (trials, p_values, seed = 0))]
fn theorem1_sweep<'py>(py: Python<'py>, trials: usize, p_values: Vec<f64>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &infotheory::theorem1_sweep(&mut Rng::new(seed), trials, &p_values).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (p_keep, c, n_samples, seed = 0))]
fn correlation_check<'py>(py: Python<'py>, p_keep: f64, c: f64, n_samples: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(
        py,
        &infotheory::correlation_scaling_check(&mut Rng::new(seed), p_keep, c, n_samples).map_err(err)?,
    )
}

fn rows_to_tensor(rows: Vec<Vec<f64>>) -> PyResult<ic_lab::Tensor> {
    ic_lab::Tensor::from_rows(&rows).map_err(err)
}

/// Condition number of `X^T X` for a design given as a list of rows.
#[pyfunction]
fn hessian_condition<'py>(py: Python<'py>, rows: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &convergence::hessian_condition(&rows_to_tensor(rows)?).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (kappa = 100.0, dim = 8, tol = 1e-8, seed = 0))]
fn whiten_race<'py>(py: Python<'py>, kappa: f64, dim: usize, tol: f64, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(
        py,
        &convergence::linreg_gd_race(&mut Rng::new(seed), dim, kappa, tol, LrRule::InverseMaxEigenvalue).map_err(err)?,
    )
}

/// Sign coherence of one per-sample `m x n` weight gradient given as rows.
#[pyfunction]
fn sign_coherence<'py>(py: Python<'py>, rows: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &convergence::sign_coherence(&rows_to_tensor(rows)?).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (n, trials, seed = 0))]
fn symmetric_row_coherence<'py>(py: Python<'py>, n: usize, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &convergence::symmetric_row_coherence(&mut Rng::new(seed), n, trials).map_err(err)?)
}

/// BatchNorm (fresh statistics) followed by dropout with keep probability `p_keep`.
#[pyfunction]
#[pyo3(signature = (x, p_keep, training = true, seed = 0, mode = "inverted"))]
fn ic_layer_forward(x: &PyTensor, p_keep: f64, training: bool, seed: u64, mode: &str) -> PyResult<PyTensor> {
    let mode: DropoutMode = mode.parse().map_err(err)?;
    let channels = match x.inner.shape() {
        [_, c] | [_, c, _, _] => *c,
        s => return Err(PyValueError::new_err(format!("expected rank 2 or 4 input, got {s:?}"))),
    };
    let mut state = BatchNormState::new(channels);
    let spec = DropoutSpec::new(p_keep, mode).map_err(err)?;
    let y = ic_forward(&x.inner, &mut state, &spec, &mut Rng::new(seed), training).map_err(err)?;
    Ok(PyTensor { inner: y })
}

#[pyfunction]
#[pyo3(signature = (x, kernel, stride = 1, padding = "same"))]
fn conv2d(x: &PyTensor, kernel: &PyTensor, stride: usize, padding: &str) -> PyResult<PyTensor> {
    let padding = match padding {
        "same" => Padding::Same,
        "valid" => Padding::Valid,
        other => return Err(PyValueError::new_err(format!("padding must be 'same' or 'valid', got '{other}'"))),
    };
    Ok(PyTensor {
        inner: tensor::conv2d(&x.inner, &kernel.inner, stride, padding).map_err(err)?,
    })
}

/// Architecture summary (layers, shapes, parameter count) for a 32x32-style input.
#[pyfunction]
#[pyo3(signature = (n, layout = "v1", bottleneck = false, num_classes = 10, image_size = 32))]
fn arch_summary<'py>(
    py: Python<'py>,
    n: usize,
    layout: &str,
    bottleneck: bool,
    num_classes: usize,
    image_size: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let layout: Layout = layout.parse().map_err(err)?;
    let spec = NetSpec::new(n, layout, bottleneck, num_classes);
    let net = ResNet::<f32>::build(&spec, &mut Rng::new(0)).map_err(err)?;
    to_py(py, &net.summary(&[1, 3, image_size, image_size]).map_err(err)?)
}

#[pyfunction]
fn learning_rate(base: f64, milestones: Vec<(usize, f64)>, epoch: usize) -> PyResult<f64> {
    Ok(LrSchedule::new(base, milestones).map_err(err)?.lr(epoch))
}

/// Stability metric of a test-accuracy curve.
#[pyfunction]
fn stability_metric(test_acc: Vec<f64>, window: usize) -> PyResult<f64> {
    let records: Vec<EpochRecord> = test_acc
        .iter()
        .enumerate()
        .map(|(epoch, &a)| EpochRecord {
            epoch,
            lr: 0.0,
            train_loss: 0.0,
            train_acc: 0.0,
            test_loss: 0.0,
            test_acc: a,
            wall_ms: 0,
        })
        .collect();
    trainer::stability_metric(&records, window).map_err(err)
}

/// Runs `train` on a config file; returns the per-epoch records.
#[pyfunction]
fn train<'py>(py: Python<'py>, config_path: &str) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = RunConfig::load(config_path).map_err(err)?;
    cfg.apply_env_output();
    let outcome = py.detach(|| trainer::train(&cfg, &mut |_| {})).map_err(err)?;
    to_py(py, &outcome.records)
}

#[pymodule]
fn ic_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(bernoulli_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(verify_theorem1, m)?)?;
    m.add_function(wrap_pyfunction!(theorem1_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(correlation_check, m)?)?;
    m.add_function(wrap_pyfunction!(hessian_condition, m)?)?;
    m.add_function(wrap_pyfunction!(whiten_race, m)?)?;
    m.add_function(wrap_pyfunction!(sign_coherence, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_row_coherence, m)?)?;
    m.add_function(wrap_pyfunction!(ic_layer_forward, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(arch_summary, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(stability_metric, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
