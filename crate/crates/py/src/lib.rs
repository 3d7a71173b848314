//! Python bindings: tensors and a few graph ops, the point-mass tasks, the
//! cosine quantizer, checkpoint-backed tokenizers and policies, and the
//! training and evaluation pipeline.

use std::path::PathBuf;

use ::carp as core;
use core::envs::{self as envs, EnvState, Task, TaskConfig};
use core::harness::{self as harness, CarpAgent, EvalOptions, PolicyTrainConfig, TokenizerSet, TokenizerTrainConfig, TrainedPolicy};
use core::io::{read_demos, write_demos, Checkpoint};
use core::policy::Sampler;
use core::tensor::{rng_stream, Graph, Tensor};
use core::tokenizer::{Codebook, MultiScaleTokens, TokenMap};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::Config(_) | core::Error::InvalidArgument(_) | core::Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

fn rows(values: &[f32], width: usize) -> Vec<Vec<f32>> {
    values.chunks(width.max(1)).map(<[f32]>::to_vec).collect()
}

/// Dense float32 tensor.
#[pyclass(name = "Tensor", module = "carp", from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Tensor::new(shape, data).map(PyTensor).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (shape, std=1.0, seed=0))]
    fn randn(shape: Vec<usize>, std: f32, seed: u64) -> Self {
        PyTensor(Tensor::randn(shape, std, &mut rng_stream(seed, 0)))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.0.clone().reshape(shape).map(PyTensor).map_err(err)
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        binary(&self.0, &other.0, Graph::matmul)
    }

    fn __add__(&self, other: &PyTensor) -> PyResult<Self> {
        binary(&self.0, &other.0, Graph::add)
    }

    fn __mul__(&self, other: &PyTensor) -> PyResult<Self> {
        binary(&self.0, &other.0, Graph::mul)
    }

    fn gelu(&self) -> PyResult<Self> {
        unary(&self.0, Graph::gelu)
    }

    /// Softmax over the last axis.
    fn softmax(&self) -> PyResult<Self> {
        unary(&self.0, Graph::softmax)
    }

    #[pyo3(signature = (eps=1e-5))]
    fn layer_norm(&self, eps: f32) -> PyResult<Self> {
        unary(&self.0, |g, x| g.layer_norm(x, eps))
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

fn unary(a: &Tensor, f: impl FnOnce(&mut Graph, core::tensor::Var) -> core::Result<core::tensor::Var>) -> PyResult<PyTensor> {
    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let y = f(&mut g, x).map_err(err)?;
    Ok(PyTensor(g.value(y).clone()))
}

fn binary(
    a: &Tensor,
    b: &Tensor,
    f: impl FnOnce(&mut Graph, core::tensor::Var, core::tensor::Var) -> core::Result<core::tensor::Var>,
) -> PyResult<PyTensor> {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let z = f(&mut g, x, y).map_err(err)?;
    Ok(PyTensor(g.value(z).clone()))
}

/// Index of the nearest codebook row by cosine distance, one per query row.
#[pyfunction]
fn nearest_codes(codebook: &PyTensor, queries: &PyTensor) -> PyResult<Vec<usize>> {
    let cb = Codebook::new(codebook.0.clone()).map_err(err)?;
    let dim = cb.dim();
    if queries.0.shape().last() != Some(&dim) {
        return Err(PyValueError::new_err(format!("query rows must have {dim} values")));
    }
    Ok(cb.nearest_batch(queries.0.data()))
}

/// One point-mass episode.
#[pyclass(name = "Env", module = "carp")]
struct PyEnv {
    cfg: TaskConfig,
    state: EnvState,
    history: Vec<EnvState>,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (task, seed=0))]
    fn new(task: &str, seed: u64) -> PyResult<Self> {
        let cfg = TaskConfig::new(parse::<Task>(task)?);
        let state = EnvState::reset(&cfg, seed);
        Ok(PyEnv { cfg, history: vec![state.clone()], state })
    }

    fn observe(&self) -> Vec<f32> {
        self.state.observe(&self.cfg)
    }

    /// Applies one action; returns `(observation, done, success)`.
    fn step(&mut self, action: [f32; 2]) -> (Vec<f32>, bool, bool) {
        self.state = self.state.step(&self.cfg, &action);
        self.history.push(self.state.clone());
        (self.observe(), self.state.is_done(&self.cfg), self.state.is_success(&self.cfg))
    }

    #[getter]
    fn pos(&self) -> [f64; 2] {
        self.state.pos
    }

    #[getter]
    fn goal(&self) -> [f64; 2] {
        self.state.goal
    }

    #[getter]
    fn steps(&self) -> usize {
        self.state.steps
    }

    /// `"left"`, `"right"` or `None` for the path so far (fork task).
    fn fork_mode(&self) -> Option<&'static str> {
        let pos: Vec<[f64; 2]> = self.history.iter().map(|s| s.pos).collect();
        envs::fork_mode(&pos).map(|m| m.label())
    }
}

/// Per-dimension multi-scale tokenizers loaded from a checkpoint.
#[pyclass(name = "Tokenizer", module = "carp")]
struct PyTokenizer(TokenizerSet);

#[pymethods]
impl PyTokenizer {
    #[new]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).and_then(|c| c.tokenizers()).map(PyTokenizer).map_err(err)
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.0.config.horizon
    }

    #[getter]
    fn scale_lens(&self) -> Vec<usize> {
        self.0.config.scale_lens.clone()
    }

    #[getter]
    fn codebook_size(&self) -> usize {
        self.0.config.codebook_size
    }

    /// `H x D` raw actions to `tokens[d][k]`.
    fn tokenize(&self, actions: Vec<Vec<f32>>) -> PyResult<Vec<Vec<Vec<usize>>>> {
        let cols = self.columns(&actions)?;
        let mut out = Vec::with_capacity(cols.len());
        for (tok, col) in self.0.dims.iter().zip(&cols) {
            let maps = tok.tokenize_batch(&[col.as_slice()]).map_err(err)?.remove(0);
            out.push(maps.into_iter().map(|m| m.tokens).collect());
        }
        Ok(out)
    }

    /// Decodes `tokens[d][k]` to `H x D` raw actions, optionally from the
    /// first `upto` scales only.
    #[pyo3(signature = (tokens, upto=None))]
    fn decode(&self, tokens: Vec<Vec<Vec<usize>>>, upto: Option<usize>) -> PyResult<Vec<Vec<f32>>> {
        let ms = MultiScaleTokens {
            dims: tokens
                .into_iter()
                .map(|d| d.into_iter().enumerate().map(|(k, tokens)| TokenMap { scale: k + 1, tokens }).collect())
                .collect(),
        };
        if ms.num_dims() != self.0.dims.len() {
            return Err(PyValueError::new_err(format!("expected {} dimensions, got {}", self.0.dims.len(), ms.num_dims())));
        }
        ms.validate(&self.0.config).map_err(err)?;
        let k = upto.unwrap_or(self.0.config.num_scales());
        let h = self.0.config.horizon;
        let d = self.0.dims.len();
        let mut values = vec![0.0; h * d];
        for (di, (tok, maps)) in self.0.dims.iter().zip(&ms.dims).enumerate() {
            let col = tok.decode_partial(maps, k).map_err(err)?;
            for (t, v) in col.into_iter().enumerate() {
                values[t * d + di] = self.0.norm.denormalize(di, v);
            }
        }
        Ok(rows(&values, d))
    }
}

impl PyTokenizer {
    fn columns(&self, actions: &[Vec<f32>]) -> PyResult<Vec<Vec<f32>>> {
        let (h, d) = (self.0.config.horizon, self.0.dims.len());
        if actions.len() != h || actions.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err(format!("actions must be {h} rows of {d} values")));
        }
        Ok((0..d).map(|di| actions.iter().map(|r| self.0.norm.normalize(di, r[di])).collect()).collect())
    }
}

/// A trained coarse-to-fine policy loaded from a checkpoint.
#[pyclass(name = "Policy", module = "carp")]
struct PyPolicy {
    trained: TrainedPolicy,
    weights: core::policy::Policy,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (path, use_ema=true))]
    fn load(path: PathBuf, use_ema: bool) -> PyResult<Self> {
        let trained = Checkpoint::load(&path).and_then(|c| c.trained_policy()).map_err(err)?;
        let weights = trained.eval_policy(use_ema).map_err(err)?;
        Ok(PyPolicy { trained, weights })
    }

    #[getter]
    fn obs_steps(&self) -> usize {
        self.weights.config().obs_steps
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.weights.config().obs_dim
    }

    /// One `H x D` action chunk from a flattened observation window.
    #[pyo3(signature = (obs, sampler="argmax", seed=0))]
    fn predict(&self, obs: Vec<f32>, sampler: &str, seed: u64) -> PyResult<Vec<Vec<f32>>> {
        let sampler: Sampler = parse(sampler)?;
        let mut rng = rng_stream(seed, 0);
        let ts = &self.trained.tokenizers;
        let out = self.weights.predict_actions(&ts.dims, &ts.norm, &obs, None, &sampler, &mut rng, false).map_err(err)?;
        Ok(rows(&out.actions.values, out.actions.dims))
    }

    /// Receding-horizon evaluation; returns the metrics as JSON.
    #[pyo3(signature = (task, episodes=50, seed=0, sampler=None))]
    fn evaluate(&self, task: &str, episodes: usize, seed: u64, sampler: Option<&str>) -> PyResult<String> {
        let cfg = TaskConfig::new(parse::<Task>(task)?);
        let sampler = match sampler {
            Some(s) => parse(s)?,
            None => self.weights.config().sampler,
        };
        let mut agent = CarpAgent::new(&self.weights, &self.trained.tokenizers, sampler);
        let report = harness::evaluate(&mut agent, &cfg, &EvalOptions::new(episodes, seed)).map_err(err)?;
        to_json(&report.metrics)
    }
}

fn to_json(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Writes `n` expert demos as JSONL; returns the number written.
#[pyfunction]
#[pyo3(signature = (task, n, path, seed=0))]
fn generate_demos(task: &str, n: usize, path: PathBuf, seed: u64) -> PyResult<usize> {
    let demos = envs::generate_demos(&TaskConfig::new(parse::<Task>(task)?), n, seed).map_err(err)?;
    write_demos(&path, &demos).map_err(err)?;
    Ok(demos.len())
}

/// Trains tokenizers on a JSONL dataset and saves the checkpoint; returns the
/// training report as JSON.
#[pyfunction]
#[pyo3(signature = (dataset, out, seed=0, config=""))]
fn train_tokenizer(dataset: PathBuf, out: PathBuf, seed: u64, config: &str) -> PyResult<String> {
    let demos = read_demos(&dataset).map_err(err)?;
    let mut cfg = TokenizerTrainConfig::default();
    cfg.apply_overrides(config).map_err(err)?;
    let (set, report) = harness::train_tokenizer_stage(&demos, &cfg, seed).map_err(err)?;
    let task = single_task(&demos);
    Checkpoint::from_tokenizers(&set, task).save(&out).map_err(err)?;
    report.to_json().map_err(err)
}

/// Trains a policy on frozen tokenizers and saves the checkpoint; returns the
/// training report as JSON.
#[pyfunction]
#[pyo3(signature = (dataset, tokenizer, out, seed=0, config=""))]
fn train_policy(dataset: PathBuf, tokenizer: PathBuf, out: PathBuf, seed: u64, config: &str) -> PyResult<String> {
    let demos = read_demos(&dataset).map_err(err)?;
    let set = Checkpoint::load(&tokenizer).and_then(|c| c.tokenizers()).map_err(err)?;
    let mut cfg = PolicyTrainConfig::default();
    cfg.apply_overrides(config).map_err(err)?;
    let (tp, report) = harness::train_policy_stage(&demos, &set, &cfg, seed).map_err(err)?;
    Checkpoint::from_policy(&tp).save(&out).map_err(err)?;
    report.to_json().map_err(err)
}

fn single_task(demos: &[envs::Demo]) -> Option<Task> {
    let first: Task = demos.first()?.task.parse().ok()?;
    demos.iter().all(|d| d.task.parse::<Task>().ok() == Some(first)).then_some(first)
}

#[pymodule]
#[pyo3(name = "carp")]
fn carp_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(nearest_codes, m)?)?;
    m.add_function(wrap_pyfunction!(generate_demos, m)?)?;
    m.add_function(wrap_pyfunction!(train_tokenizer, m)?)?;
    m.add_function(wrap_pyfunction!(train_policy, m)?)?;
    Ok(())
}
