//! Python bindings: tensors, mixing operators, encoders, contrastive losses,
//! the synthetic corpus, training schedules and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use stcmix_core::config::RunConfig;
use stcmix_core::contrastive::{imix_loss, info_nce, MoCoQueue};
use stcmix_core::encoder::{load_checkpoint, save_checkpoint, ArchSpec, EncoderStack};
use stcmix_core::evalkit::{knn_retrieval, FeatureTable};
use stcmix_core::experiments::{self, Splits};
use stcmix_core::gradcheck::run_gradcheck;
use stcmix_core::mixing::{self, LambdaSource, MixOutcome, Operator};
use stcmix_core::trainer::{run_schedule, ScheduleOptions, TrainSchedule, TrainState};
use stcmix_core::{Error, SeededRng};

type BoxBounds = (usize, usize, usize, usize, usize, usize, usize, usize);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::State(_) | Error::Contract(_) | Error::Numerical(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for stcmix_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn resolve(overrides: Vec<String>) -> PyResult<RunConfig> {
    RunConfig::resolve(None, &overrides, None).py()
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", module = "stcmix", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: stcmix_core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: stcmix_core::Tensor::new(shape, data).py()?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: stcmix_core::Tensor::zeros(&shape),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed, std=1.0))]
    fn randn(shape: Vec<usize>, seed: u64, std: f64) -> Self {
        Self {
            inner: stcmix_core::Tensor::randn(&shape, std, &mut SeededRng::new(seed)),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed, lo=0.0, hi=1.0))]
    fn uniform(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Self {
        Self {
            inner: stcmix_core::Tensor::uniform(&shape, lo, hi, &mut SeededRng::new(seed)),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn norm(&self) -> f64 {
        self.inner.norm()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.reshape(&shape).py()?,
        })
    }

    fn l2_normalize(&self) -> PyResult<Self> {
        Ok(Self {
            inner: stcmix_core::l2_normalize(&self.inner).py()?,
        })
    }

    fn bitwise_eq(&self, other: &PyTensor) -> bool {
        self.inner.bitwise_eq(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(t: stcmix_core::Tensor) -> PyTensor {
    PyTensor { inner: t }
}

/// Output of a mixing operator.
#[pyclass(name = "MixResult", module = "stcmix", get_all)]
struct PyMixResult {
    mixed: PyTensor,
    lam: f64,
    sample_lambdas: Vec<f64>,
    partner: Vec<usize>,
    /// `(c1, c2, t1, t2, h1, h2, w1, w2)` half-open bounds of the replaced box.
    mask_box: Option<BoxBounds>,
}

impl From<MixOutcome> for PyMixResult {
    fn from(o: MixOutcome) -> Self {
        let mask_box = o.mask_box().map(|b| {
            let (s, x) = (b.start, b.extent);
            (
                s[0],
                s[0] + x[0],
                s[1],
                s[1] + x[1],
                s[2],
                s[2] + x[2],
                s[3],
                s[3] + x[3],
            )
        });
        Self {
            mixed: wrap(o.mixed),
            lam: o.lambda,
            sample_lambdas: o.sample_lambdas,
            partner: o.partner,
            mask_box,
        }
    }
}

#[pymethods]
impl PyMixResult {
    fn __repr__(&self) -> String {
        format!("MixResult(lam={}, mask_box={:?})", self.lam, self.mask_box)
    }
}

fn lambda_source(alpha: f64, lam: Option<f64>) -> LambdaSource {
    lam.map_or(LambdaSource::Beta(alpha), LambdaSource::Fixed)
}

/// Mixes a `(B, C, T, H, W)` batch with one of
/// `none`, `mixup`, `t_cutmix`, `st_cutmix`, `videomix`.
#[pyfunction]
#[pyo3(signature = (operator, x, seed, alpha=1.0, lam=None))]
fn mix(
    operator: &str,
    x: &PyTensor,
    seed: u64,
    alpha: f64,
    lam: Option<f64>,
) -> PyResult<PyMixResult> {
    let op: Operator = operator.parse().py()?;
    let out = op
        .apply(
            &x.inner,
            lambda_source(alpha, lam),
            &mut SeededRng::new(seed),
        )
        .py()?;
    Ok(out.into())
}

/// Pastes a box of `g2` activations into `g1`.
#[pyfunction]
#[pyo3(signature = (g1, g2, seed, alpha=1.0, lam=None))]
fn cmmc_mix(
    g1: &PyTensor,
    g2: &PyTensor,
    seed: u64,
    alpha: f64,
    lam: Option<f64>,
) -> PyResult<PyMixResult> {
    let out = mixing::cmmc_mix_with(
        &g1.inner,
        &g2.inner,
        lambda_source(alpha, lam),
        &mut SeededRng::new(seed),
    )
    .py()?;
    Ok(out.into())
}

/// 3-D conv encoder with a projection head producing unit-norm embeddings.
#[pyclass(name = "Encoder", module = "stcmix", skip_from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    inner: EncoderStack,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (in_channels, input_size, seed=0, modality="rgb"))]
    fn new(
        in_channels: usize,
        input_size: (usize, usize, usize),
        seed: u64,
        modality: &str,
    ) -> PyResult<Self> {
        let (t, h, w) = input_size;
        let arch = ArchSpec::video(in_channels, [t, h, w]);
        Ok(Self {
            inner: EncoderStack::build(arch, modality, &mut SeededRng::new(seed)).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).py()?.0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path, Default::default(), None).py()
    }

    fn forward(&mut self, x: &PyTensor) -> PyResult<PyTensor> {
        let z = self.inner.forward(&x.inner).py()?;
        self.inner.clear_caches();
        Ok(wrap(z))
    }

    /// Activations after blocks `start..stop` (0 is the raw input).
    fn partial_forward(&mut self, x: &PyTensor, start: usize, stop: usize) -> PyResult<PyTensor> {
        let h = self.inner.partial_forward(&x.inner, start, stop).py()?;
        self.inner.clear_caches();
        Ok(wrap(h))
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn modality(&self) -> String {
        self.inner.modality().to_string()
    }

    #[getter]
    fn mixable_layers(&self) -> Vec<usize> {
        self.inner.mixable_layers().to_vec()
    }

    fn boundary_shape(&self, block: usize) -> PyResult<Vec<usize>> {
        Ok(self.inner.boundary_shape(block).py()?.to_vec())
    }

    fn num_params(&self) -> usize {
        self.inner.params().iter().map(|p| p.value.len()).sum()
    }

    fn __repr__(&self) -> String {
        format!(
            "Encoder(modality={:?}, depth={}, output_dim={})",
            self.inner.modality(),
            self.inner.depth(),
            self.inner.output_dim()
        )
    }
}

/// FIFO queue of unit-norm negative keys.
#[pyclass(name = "Queue", module = "stcmix")]
struct PyQueue {
    inner: MoCoQueue,
}

#[pymethods]
impl PyQueue {
    #[new]
    fn new(capacity: usize) -> Self {
        Self {
            inner: MoCoQueue::new(capacity),
        }
    }

    fn enqueue(&mut self, keys: &PyTensor) -> PyResult<()> {
        self.inner.enqueue(&keys.inner).py()
    }

    fn clear(&mut self) {
        self.inner.clear();
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// InfoNCE loss; returns `(loss, pretext_accuracy)`.
#[pyfunction]
#[pyo3(name = "info_nce", signature = (z, z_key, queue, tau=0.07))]
fn py_info_nce(z: &PyTensor, z_key: &PyTensor, queue: &PyQueue, tau: f64) -> PyResult<(f64, f64)> {
    let r = info_nce(&z.inner, &z_key.inner, &queue.inner, tau).py()?;
    Ok((r.loss, r.pretext_accuracy))
}

/// i-mix loss with soft targets over the batch keys; returns `(loss, pretext_accuracy)`.
#[pyfunction]
#[pyo3(name = "imix_loss", signature = (z_mix, z_key, queue, partner, lambdas, tau=0.07))]
fn py_imix_loss(
    z_mix: &PyTensor,
    z_key: &PyTensor,
    queue: &PyQueue,
    partner: Vec<usize>,
    lambdas: Vec<f64>,
    tau: f64,
) -> PyResult<(f64, f64)> {
    let r = imix_loss(
        &z_mix.inner,
        &z_key.inner,
        &queue.inner,
        tau,
        &partner,
        &lambdas,
    )
    .py()?;
    Ok((r.loss, r.pretext_accuracy))
}

/// Synthetic two-modality corpus with a fixed train/test split.
#[pyclass(name = "Corpus", module = "stcmix")]
struct PyCorpus {
    splits: Splits,
    cfg: RunConfig,
}

#[pymethods]
impl PyCorpus {
    /// Built from `key=value` overrides on the default run config.
    #[new]
    #[pyo3(signature = (overrides=Vec::new()))]
    fn new(overrides: Vec<String>) -> PyResult<Self> {
        let cfg = resolve(overrides)?;
        Ok(Self {
            splits: Splits::generate(&cfg).py()?,
            cfg,
        })
    }

    #[getter]
    fn split_hash(&self) -> String {
        format!("{:016x}", self.splits.split_hash)
    }

    #[getter]
    fn train_size(&self) -> usize {
        self.splits.train.len()
    }

    #[getter]
    fn test_size(&self) -> usize {
        self.splits.test.len()
    }

    /// `(clip, label)` for `split` in {"train", "test"} and modality 1 (RGB) or 2 (motion).
    #[pyo3(signature = (split, index, modality=1))]
    fn clip(&self, split: &str, index: usize, modality: usize) -> PyResult<(PyTensor, usize)> {
        let set = match split {
            "train" => &self.splits.train,
            "test" => &self.splits.test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let clips = set.modality(modality).py()?;
        let clip = clips.get(index).ok_or_else(|| {
            PyValueError::new_err(format!(
                "index {index} out of range for {} clips",
                clips.len()
            ))
        })?;
        Ok((wrap(clip.clone()), set.labels[index]))
    }

    /// Pretrains one modality encoder with input-space mixing; returns the
    /// encoder and its per-epoch `(loss, pretext_accuracy)` trace.
    #[pyo3(signature = (modality=1, overrides=Vec::new()))]
    fn pretrain(
        &self,
        modality: usize,
        overrides: Vec<String>,
    ) -> PyResult<(PyEncoder, Vec<(f64, f64)>)> {
        let cfg = self.with(overrides)?;
        let schedule = TrainSchedule::pretrain_only(modality, &cfg.trainer, cfg.seed);
        self.train(&cfg, &schedule, modality)
    }

    /// Runs the six-stage schedule; returns the modality-1 encoder and the trace.
    #[pyo3(signature = (overrides=Vec::new()))]
    fn schedule(&self, overrides: Vec<String>) -> PyResult<(PyEncoder, Vec<(f64, f64)>)> {
        let cfg = self.with(overrides)?;
        let schedule = TrainSchedule::standard(&cfg.trainer, cfg.seed);
        self.train(&cfg, &schedule, 1)
    }

    /// Linear-probe accuracy and retrieval recall of `encoder` on `modality`.
    #[pyo3(signature = (encoder, modality=1))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        encoder: &PyEncoder,
        modality: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let e =
            experiments::evaluate(&encoder.inner, modality, &self.splits, &self.cfg.probe).py()?;
        let d = PyDict::new(py);
        d.set_item("linear_probe", e.probe_acc)?;
        for (k, v) in e.retrieval.to_map() {
            d.set_item(k, v)?;
        }
        Ok(d)
    }
}

impl PyCorpus {
    fn with(&self, overrides: Vec<String>) -> PyResult<RunConfig> {
        let mut all: Vec<String> = self
            .cfg
            .flatten()
            .py()?
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        all.extend(overrides);
        let cfg = resolve(all)?;
        if cfg.data != self.cfg.data {
            return Err(PyValueError::new_err(
                "data.* settings are fixed when the corpus is built",
            ));
        }
        Ok(cfg)
    }

    fn train(
        &self,
        cfg: &RunConfig,
        schedule: &TrainSchedule,
        modality: usize,
    ) -> PyResult<(PyEncoder, Vec<(f64, f64)>)> {
        if !(1..=2).contains(&modality) {
            return Err(PyValueError::new_err(format!(
                "modality must be 1 or 2, got {modality}"
            )));
        }
        let state = TrainState::init(self.splits.input_size(), cfg.seed).py()?;
        let out = run_schedule(
            schedule,
            &cfg.trainer,
            &self.splits.train,
            state,
            cfg.seed,
            &ScheduleOptions::default(),
        )
        .py()?;
        let trace = out
            .records
            .iter()
            .map(|r| (r.loss, r.pretext_acc))
            .collect();
        Ok((
            PyEncoder {
                inner: out.state.encoder(modality).clone(),
            },
            trace,
        ))
    }
}

/// Recall@k of test features against a gallery, by cosine similarity.
#[pyfunction]
#[pyo3(signature = (gallery, gallery_labels, queries, query_labels, ks=vec![1, 5, 10, 20]))]
fn retrieval(
    gallery: &PyTensor,
    gallery_labels: Vec<usize>,
    queries: &PyTensor,
    query_labels: Vec<usize>,
    ks: Vec<usize>,
) -> PyResult<Vec<(usize, f64)>> {
    let g_ids = (0..gallery_labels.len()).collect();
    let q_ids = (0..query_labels.len()).collect();
    let g = FeatureTable::new(gallery.inner.clone(), gallery_labels, g_ids).py()?;
    let q = FeatureTable::new(queries.inner.clone(), query_labels, q_ids).py()?;
    Ok(knn_retrieval(&g, &q, &ks).py()?.recall)
}

/// Resolved run configuration as a flat `{dotted.key: value}` dict.
#[pyfunction]
#[pyo3(signature = (path=None, overrides=Vec::new()))]
fn config<'py>(
    py: Python<'py>,
    path: Option<PathBuf>,
    overrides: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = RunConfig::resolve(path.as_deref(), &overrides, None).py()?;
    json_to_py(py, &cfg.to_json().py()?)
}

/// Finite-difference gradient check; list of `(component, max_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (overrides=Vec::new()))]
fn gradcheck(overrides: Vec<String>) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg = resolve(overrides)?;
    let report = run_gradcheck(&cfg.gradcheck).py()?;
    Ok(report
        .components
        .into_iter()
        .map(|c| (c.component, c.max_rel_error, c.passed))
        .collect())
}

/// Every operator under every seed; list of `(operator, seed, probe_acc, r1)`.
#[pyfunction]
#[pyo3(signature = (overrides=Vec::new()))]
fn compare_operators(overrides: Vec<String>) -> PyResult<Vec<(String, u64, f64, f64)>> {
    let cfg = resolve(overrides)?;
    let rows = experiments::compare_operators(&cfg, |_| Ok(())).py()?;
    Ok(rows
        .into_iter()
        .map(|r| (r.operator.name().to_string(), r.seed, r.probe_acc, r.r1))
        .collect())
}

#[pymodule]
fn stcmix(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyMixResult>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyQueue>()?;
    m.add_class::<PyCorpus>()?;
    m.add_function(wrap_pyfunction!(mix, m)?)?;
    m.add_function(wrap_pyfunction!(cmmc_mix, m)?)?;
    m.add_function(wrap_pyfunction!(py_info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(py_imix_loss, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(config, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(compare_operators, m)?)?;
    m.add(
        "OPERATORS",
        Operator::ALL.iter().map(|o| o.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
