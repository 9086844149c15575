//! Python bindings: tensors with reverse-mode gradients, the synthetic
//! scene generator, prompts, metrics, config parsing and trained-model
//! inference.

use std::path::PathBuf;

use iedp::config::TrainConfig;
use iedp::dataset::{read_rgb, InferenceGuard};
use iedp::eval::{self, infer_image, EvalOptions};
use iedp::gradsuite::{run_suite, Scope};
use iedp::heads::Task;
use iedp::model::Model as CoreModel;
use iedp::optim;
use iedp::prompt::build_prompt as core_build_prompt;
use iedp::synth::{self, Palette};
use iedp::tensor::{Graph, Tensor as CoreTensor, Var};
use iedp::train::load_trained_model;
use iedp::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Contract(_) | Error::Schedule { .. } | Error::UndefinedMetric(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn palette(classes: usize) -> PyResult<Palette> {
    Palette::new(classes).map_err(to_py)
}

/// Dense 64-bit tensor.
#[pyclass(name = "Tensor", module = "iedp_py", from_py_object)]
#[derive(Clone)]
struct PyTensor(CoreTensor<f64>);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        CoreTensor::new(&shape, data).map(PyTensor).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (shape, std = 1.0, seed = 0))]
    fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Self {
        PyTensor(CoreTensor::randn(&shape, std, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    /// Row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

fn apply(g: &mut Graph<'_, f64>, op: &str, x: &[Var]) -> iedp::Result<Var> {
    let arity = match op {
        "add" | "sub" | "mul" | "matmul" => 2,
        "layer_norm" => 3,
        _ => 1,
    };
    if x.len() != arity {
        return Err(Error::Contract(format!("{op} takes {arity} inputs, got {}", x.len())));
    }
    match op {
        "add" => g.add(x[0], x[1]),
        "sub" => g.sub(x[0], x[1]),
        "mul" => g.mul(x[0], x[1]),
        "matmul" => g.matmul(x[0], x[1]),
        "layer_norm" => g.layer_norm(x[0], x[1], x[2], 1e-5),
        "softmax" => {
            let axis = g.shape(x[0]).len() - 1;
            g.softmax(x[0], axis)
        }
        "transpose" => g.transpose(x[0]),
        "relu" => Ok(g.relu(x[0])),
        "gelu" => Ok(g.gelu(x[0])),
        "silu" => Ok(g.silu(x[0])),
        "sigmoid" => Ok(g.sigmoid(x[0])),
        "tanh" => Ok(g.tanh(x[0])),
        "exp" => Ok(g.exp(x[0])),
        "log" => Ok(g.log(x[0])),
        "square" => Ok(g.square(x[0])),
        other => Err(Error::Contract(format!("unknown op {other}"))),
    }
}

/// Applies `op` to `inputs` and returns `(output, grads)`, where `grads[i]`
/// is the gradient of `sum(output)` with respect to `inputs[i]`.
///
/// Ops: add, sub, mul, matmul, layer_norm (x, gain, bias), softmax (last
/// axis), transpose, relu, gelu, silu, sigmoid, tanh, exp, log, square.
#[pyfunction]
fn value_and_grad(op: &str, inputs: Vec<PyTensor>) -> PyResult<(PyTensor, Vec<PyTensor>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.into_iter().map(|t| g.input(t.0)).collect();
    let out = apply(&mut g, op, &vars).map_err(to_py)?;
    let total = g.sum(out);
    let grads = g.backward(total).map_err(to_py)?;
    let value = PyTensor(g.value(out).clone());
    let grads = vars
        .iter()
        .map(|&v| PyTensor(grads.wrt(v).cloned().unwrap_or_else(|| CoreTensor::zeros(g.shape(v)))))
        .collect();
    Ok((value, grads))
}

/// Runs the finite-difference gradient suite; returns
/// `[(label, max_rel_err, passed)]`.
#[pyfunction]
#[pyo3(signature = (scope = "ops"))]
fn gradcheck(scope: &str) -> PyResult<Vec<(String, f64, bool)>> {
    let scope: Scope = scope.parse().map_err(to_py)?;
    let reports = run_suite(scope).map_err(to_py)?;
    Ok(reports.iter().map(|r| (r.label.clone(), r.max_rel_err(), r.passed())).collect())
}

/// One synthetic scene as a dict with `image` (flat CHW floats), `mask`
/// (bytes, one class id per pixel), `depth`, `height`, `width`, `classes`
/// and `caption`.
#[pyfunction]
#[pyo3(signature = (seed, classes = 6, size = 64))]
fn generate_sample<'py>(py: Python<'py>, seed: u64, classes: usize, size: usize) -> PyResult<Bound<'py, PyDict>> {
    let s = synth::generate_sample(seed, &palette(classes)?, size).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("image", s.image.into_data())?;
    d.set_item("mask", s.mask)?;
    d.set_item("depth", s.depth)?;
    d.set_item("height", s.height)?;
    d.set_item("width", s.width)?;
    d.set_item("classes", s.classes.iter().map(|&c| c as u32).collect::<Vec<_>>())?;
    d.set_item("caption", s.caption)?;
    Ok(d)
}

/// Class-label prompt text for a set of class ids.
#[pyfunction]
#[pyo3(signature = (class_ids, classes = 6))]
fn build_prompt(class_ids: Vec<u8>, classes: usize) -> PyResult<String> {
    Ok(core_build_prompt(&class_ids, &palette(classes)?).text)
}

#[pyfunction]
fn miou(pred: Vec<u8>, gt: Vec<u8>, classes: usize) -> PyResult<f64> {
    eval::miou(&pred, &gt, classes).map_err(to_py)
}

/// Depth metrics over the pixels where `valid` is true (all by default).
#[pyfunction]
#[pyo3(signature = (pred, gt, valid = None))]
fn depth_metrics<'py>(py: Python<'py>, pred: Vec<f32>, gt: Vec<f32>, valid: Option<Vec<bool>>) -> PyResult<Bound<'py, PyDict>> {
    let valid = valid.unwrap_or_else(|| vec![true; gt.len()]);
    let m = eval::depth_metrics(&pred, &gt, &valid).map_err(to_py)?;
    let d = PyDict::new(py);
    for (k, v) in [("rmse", m.rmse), ("rel", m.rel), ("log10", m.log10), ("delta1", m.delta1), ("delta2", m.delta2), ("delta3", m.delta3)] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (iteration, max_iters, base_lr = 1e-3, power = 0.9))]
fn poly_lr(iteration: usize, max_iters: usize, base_lr: f64, power: f64) -> PyResult<f64> {
    optim::poly_lr(iteration, max_iters, base_lr, power).map_err(to_py)
}

/// Parses a `key = value` training config and returns the effective
/// configuration with every key filled in. Unknown keys raise `ValueError`.
#[pyfunction]
fn parse_config(text: &str) -> PyResult<String> {
    TrainConfig::parse(text, &[]).map(|c| c.to_kv()).map_err(to_py)
}

/// A trained model loaded from a checkpoint written by `iedp train`.
#[pyclass(name = "Model", module = "iedp_py")]
struct PyModel(CoreModel<f32>);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        load_trained_model(&checkpoint).map(PyModel).map_err(to_py)
    }

    #[getter]
    fn task(&self) -> &'static str {
        match self.0.cfg.task {
            Task::Segmentation => "segmentation",
            Task::Depth => "depth",
        }
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.cfg.num_classes
    }

    /// Sliding-window prediction for a `[3, H, W]` image: class logits or
    /// depth, as `[K, H, W]`.
    fn predict(&self, image: &PyTensor) -> PyResult<PyTensor> {
        let _guard = InferenceGuard::new();
        let opts = EvalOptions { two_scale: false, ..Default::default() };
        let p = infer_image(&self.0, &image.0.cast(), &opts).map_err(to_py)?;
        Ok(PyTensor(p.single.cast()))
    }

    /// Predicts for an RGB PNG on disk.
    fn predict_png(&self, path: PathBuf) -> PyResult<PyTensor> {
        let image = read_rgb(&path).map_err(to_py)?;
        self.predict(&PyTensor(image.cast()))
    }
}

#[pymodule]
fn iedp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(value_and_grad, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(depth_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradients_are_row_and_column_sums() {
        let a = PyTensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]).unwrap();
        let b = PyTensor::new(vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0], vec![3, 2]).unwrap();
        let (out, grads) = value_and_grad("matmul", vec![a, b]).unwrap();
        assert_eq!(out.tolist(), vec![7.0, -1.0, 16.0, -1.0]);
        // d sum(AB) / dA = 1 B^T, d sum(AB) / dB = A^T 1.
        assert_eq!(grads[0].tolist(), vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads[1].tolist(), vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_have_zero_total_gradient() {
        let x = PyTensor::randn(vec![3, 5], 2.0, 7);
        let (out, grads) = value_and_grad("softmax", vec![x]).unwrap();
        for row in out.tolist().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(grads[0].tolist().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn wrong_arity_and_unknown_ops_fail() {
        let x = PyTensor::randn(vec![2, 2], 1.0, 0);
        assert!(value_and_grad("matmul", vec![x.clone()]).is_err());
        assert!(value_and_grad("nope", vec![x]).is_err());
    }
}
