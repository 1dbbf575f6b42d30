//! Python bindings: tensors with second-order gradients, configs, phantom
//! pools, the segmentation net, training, fine-tuning and metrics.
//!
//! Classes hold plain Rust values; tensors crossing the boundary are always
//! detached from any tape.

use std::path::PathBuf;

use duometa::checkpoint::{model_checkpoint, model_parts, Checkpoint, Header};
use duometa::config::ExperimentConfig;
use duometa::experiment::{adapt, evaluate_group, train_variant, Variant};
use duometa::labels::LabelMap;
use duometa::phantoms::{build_pool, load_pool, save_pool, MetaPool};
use duometa::segnet::{argmax_labels, SegNet};
use duometa::tensorcore::{dtns, grad, GradOptions, ParamSet, Tape, Tensor};
use duometa::Error;
use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => match duometa_cli::exit_code(&e) {
            duometa_cli::EXIT_MISSING => PyFileNotFoundError::new_err(e.to_string()),
            duometa_cli::EXIT_NUMERICAL => PyArithmeticError::new_err(e.to_string()),
            _ => PyValueError::new_err(e.to_string()),
        },
    }
}

fn tensor_err(e: duometa::tensorcore::TensorError) -> PyErr {
    py_err(Error::Tensor(e))
}

#[pyclass(name = "Tensor", module = "duometa", unsendable, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    pub inner: Tensor,
}

impl From<Tensor> for PyTensor {
    fn from(t: Tensor) -> Self {
        Self { inner: t.detach() }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Tensor::new(data, &shape).map_err(tensor_err)?.into())
    }

    #[staticmethod]
    pub fn zeros(shape: Vec<usize>) -> Self {
        Tensor::zeros(&shape).into()
    }

    #[getter]
    pub fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    pub fn tolist(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    pub fn item(&self) -> PyResult<f64> {
        if self.inner.numel() != 1 {
            return Err(PyValueError::new_err(format!("item() of a tensor with shape {:?}", self.inner.shape())));
        }
        Ok(self.inner.item())
    }

    pub fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(1)
    }

    pub fn __add__(&self, o: &PyTensor) -> PyResult<Self> {
        Ok(self.inner.add(&o.inner).map_err(tensor_err)?.into())
    }

    pub fn __sub__(&self, o: &PyTensor) -> PyResult<Self> {
        Ok(self.inner.sub(&o.inner).map_err(tensor_err)?.into())
    }

    pub fn __mul__(&self, o: &PyTensor) -> PyResult<Self> {
        Ok(self.inner.mul(&o.inner).map_err(tensor_err)?.into())
    }

    pub fn __matmul__(&self, o: &PyTensor) -> PyResult<Self> {
        Ok(self.inner.matmul(&o.inner).map_err(tensor_err)?.into())
    }

    pub fn scale(&self, c: f64) -> PyResult<Self> {
        Ok(self.inner.scale(c).map_err(tensor_err)?.into())
    }

    pub fn relu(&self) -> PyResult<Self> {
        Ok(self.inner.relu().map_err(tensor_err)?.into())
    }

    pub fn exp(&self) -> PyResult<Self> {
        Ok(self.inner.exp().map_err(tensor_err)?.into())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(self.inner.reshape(&shape).map_err(tensor_err)?.into())
    }

    pub fn sum(&self) -> PyResult<Self> {
        Ok(self.inner.sum_all().map_err(tensor_err)?.into())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        dtns::encode(&self.inner)
    }

    #[staticmethod]
    pub fn from_bytes(b: Vec<u8>) -> PyResult<Self> {
        Ok(dtns::decode(&b).map_err(PyValueError::new_err)?.into())
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        dtns::save(&path, &self.inner).map_err(tensor_err)
    }

    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(dtns::load(&path).map_err(tensor_err)?.into())
    }

    pub fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Value, gradient and Hessian-vector product of `f(x) = Σ exp(a ⊙ x) + ½‖x‖²`
/// through double backprop. The closed forms are `g = a·exp(a ⊙ x) + x` and
/// `Hv = a²·exp(a ⊙ x) ⊙ v + v`, handy for checking the machinery.
#[pyfunction]
pub fn exp_quadratic_grad_hvp(a: &PyTensor, x: &PyTensor, v: &PyTensor) -> PyResult<(PyTensor, PyTensor, f64)> {
    let tape = Tape::new();
    let xt = x.inner.leaf(&tape);
    let inner = || -> duometa::tensorcore::Result<(Tensor, Tensor, f64)> {
        let f = a.inner.mul(&xt)?.exp()?.sum_all()?.add(&xt.mul(&xt)?.sum_all()?.scale(0.5)?)?;
        let g = grad(&f, &[&xt], GradOptions::create_graph())?.grads.remove(0);
        let gv = g.mul(&v.inner)?.sum_all()?;
        let hv = grad(&gv, &[&xt], GradOptions::first_order())?.grads.remove(0);
        Ok((g, hv, f.item()))
    };
    let (g, hv, f) = inner().map_err(tensor_err)?;
    Ok((g.into(), hv.into(), f))
}

#[pyclass(name = "LabelMap", module = "duometa", unsendable, skip_from_py_object)]
#[derive(Clone)]
pub struct PyLabelMap {
    pub inner: LabelMap,
}

#[pymethods]
impl PyLabelMap {
    #[new]
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: LabelMap::new(batch, height, width, data).map_err(py_err)?,
        })
    }

    #[getter]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.inner.batch, self.inner.height, self.inner.width)
    }

    pub fn tolist(&self) -> Vec<u8> {
        self.inner.data.clone()
    }

    pub fn dice(&self, reference: &PyLabelMap, class: u8) -> PyResult<f64> {
        duometa::metrics::dice_score(&self.inner, &reference.inner, class).map_err(py_err)
    }

    /// Average symmetric surface distance; `None` when either mask is empty.
    #[pyo3(signature = (reference, class, spacing = 1.0))]
    pub fn asd(&self, reference: &PyLabelMap, class: u8, spacing: f64) -> PyResult<Option<f64>> {
        duometa::metrics::asd(&self.inner, &reference.inner, class, spacing).map_err(py_err)
    }
}

#[pyclass(name = "Config", module = "duometa", skip_from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    pub inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    pub fn new() -> Self {
        Self {
            inner: ExperimentConfig::default(),
        }
    }

    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    pub fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_flat_str(text).map_err(py_err)?,
        })
    }

    /// Flat JSON with dotted keys.
    pub fn to_json(&self) -> String {
        self.inner.to_flat_json()
    }

    /// `cfg.set("train.lr", "0.02")`; the value is parsed as JSON, falling
    /// back to a string.
    pub fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(&format!("{key}={value}")).map_err(py_err)
    }

    pub fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }
}

impl Default for PyConfig {
    fn default() -> Self {
        Self::new()
    }
}

#[pyclass(name = "Pool", module = "duometa")]
pub struct PyPool {
    pub inner: MetaPool,
}

#[pymethods]
impl PyPool {
    /// Builds the configured groups at the net's image size.
    #[staticmethod]
    #[pyo3(signature = (config, seed = None))]
    pub fn generate(config: &PyConfig, seed: Option<u64>) -> PyResult<Self> {
        let c = &config.inner;
        c.validate().map_err(py_err)?;
        Ok(Self {
            inner: build_pool(&c.pool.groups, c.net.image_size, seed.unwrap_or(c.pool.seed)).map_err(py_err)?,
        })
    }

    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_pool(&path).map_err(py_err)?,
        })
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        save_pool(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    pub fn groups(&self) -> Vec<String> {
        self.inner.groups.iter().map(|g| g.spec.name.clone()).collect()
    }

    /// `(train, held_out)` subject counts of a group.
    pub fn split_sizes(&self, group: &str) -> PyResult<(usize, usize)> {
        let g = self.inner.group(group).map_err(py_err)?;
        Ok((g.split.train.len(), g.split.val.len()))
    }

    pub fn image(&self, group: &str, index: usize) -> PyResult<(PyTensor, PyLabelMap)> {
        let g = self.inner.group(group).map_err(py_err)?;
        let s = g
            .subjects
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("{group} has {} subjects", g.subjects.len())))?;
        Ok((s.image.clone().into(), PyLabelMap { inner: s.labels.clone() }))
    }

    pub fn manifest_json(&self) -> String {
        self.inner.manifest_json()
    }
}

/// Extractor and head parameters of one model.
#[pyclass(name = "Model", module = "duometa", unsendable, skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    pub theta: ParamSet,
    pub head: ParamSet,
    net: SegNet,
}

impl PyModel {
    fn new(net: SegNet, theta: ParamSet, head: ParamSet) -> Self {
        Self { theta, head, net }
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    pub fn init(config: &PyConfig, seed: u64) -> PyResult<Self> {
        let net = SegNet::new(config.inner.net.clone()).map_err(py_err)?;
        let (theta, head) = net.init(seed).map_err(py_err)?;
        Ok(Self::new(net, theta, head))
    }

    #[staticmethod]
    pub fn load(config: &PyConfig, path: PathBuf) -> PyResult<Self> {
        let net = SegNet::new(config.inner.net.clone()).map_err(py_err)?;
        let (theta, head) = model_parts(&Checkpoint::load(&path).map_err(py_err)?).map_err(py_err)?;
        Ok(Self::new(net, theta, head))
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        let header = Header {
            kind: "python".into(),
            ..Header::default()
        };
        model_checkpoint("python", &self.theta, &self.head, header).save(&path).map_err(py_err)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.theta.names().chain(self.head.names()).map(String::from).collect()
    }

    pub fn param(&self, name: &str) -> PyResult<PyTensor> {
        let t = self.theta.get(name).or_else(|_| self.head.get(name)).map_err(tensor_err)?;
        Ok(t.clone().into())
    }

    /// `(extractor, head)` parameter counts.
    pub fn numel(&self) -> (usize, usize) {
        (self.theta.numel(), self.head.numel())
    }

    /// Per-pixel class labels for `B×1×H×W` images.
    pub fn predict(&self, images: &PyTensor) -> PyResult<PyLabelMap> {
        let (_, logits) = self.net.forward(&self.theta, &self.head, &images.inner).map_err(py_err)?;
        let finest = logits.last().ok_or_else(|| PyValueError::new_err("net produced no logits"))?;
        Ok(PyLabelMap {
            inner: argmax_labels(finest).map_err(py_err)?,
        })
    }

    /// Dice/ASD report (JSON) on a group's held-out split.
    pub fn evaluate(&self, pool: &PyPool, group: &str) -> PyResult<String> {
        let g = pool.inner.group(group).map_err(py_err)?;
        Ok(evaluate_group(&self.net, g, &self.theta, &self.head, "python").map_err(py_err)?.to_json())
    }

    pub fn bit_eq(&self, other: &PyModel) -> bool {
        self.theta.bit_eq(&other.theta) && self.head.bit_eq(&other.head)
    }
}

/// Trains one ablation variant (`"A"`…`"E"`) and returns the best model and
/// a JSON summary of the run.
#[pyfunction]
#[pyo3(signature = (config, pool, variant = "E", seed = None))]
pub fn train(config: &PyConfig, pool: &PyPool, variant: &str, seed: Option<u64>) -> PyResult<(PyModel, String)> {
    let c = &config.inner;
    c.validate().map_err(py_err)?;
    let v: Variant = variant.parse().map_err(py_err)?;
    let seed = seed.unwrap_or(c.seed);
    let net = SegNet::new(c.net.clone()).map_err(py_err)?;
    let out = train_variant(&net, &pool.inner, &c.train, c.augment, v, seed, &mut |_| Ok(())).map_err(py_err)?;
    let summary = serde_json::json!({
        "variant": v.letter().to_string(),
        "seed": seed,
        "episodes": out.traces.len(),
        "best_t": out.best.t,
        "best_val_loss": out.best.val_loss,
        "initial_val_loss": out.initial_val,
        "diverged": out.diverged,
        "indirect_norms": out.traces.iter().map(|t| t.hypergrad_indirect).collect::<Vec<_>>(),
    });
    Ok((PyModel::new(net, out.best.theta, out.best.phi), summary.to_string()))
}

/// One-shot fine-tuning of the head on the pool's unseen group. Returns the
/// adapted model and the shot indices used.
#[pyfunction]
#[pyo3(signature = (config, pool, model, seed = None))]
pub fn fine_tune(config: &PyConfig, pool: &PyPool, model: &PyModel, seed: Option<u64>) -> PyResult<(PyModel, Vec<usize>)> {
    let c = &config.inner;
    let (o, shots) = adapt(
        &model.net,
        pool.inner.test_group(),
        &model.theta,
        &model.head,
        &c.finetune,
        &c.train.loss,
        seed.unwrap_or(c.seed),
    )
    .map_err(py_err)?;
    Ok((PyModel::new(model.net.clone(), model.theta.clone(), o.omega), shots))
}

/// Finite-difference verification of the hypergradient (JSON report).
#[pyfunction]
pub fn gradcheck(config: &PyConfig) -> PyResult<String> {
    let r = duometa_cli::gradcheck::run(&config.inner).map_err(py_err)?;
    serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "duometa")]
fn duometa_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyLabelMap>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPool>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(exp_quadratic_grad_hvp, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(fine_tune, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
