use std::path::PathBuf;

use candle_core::Tensor;
use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use unigrec::analysis;
use unigrec::commands::{Command, Experiment, ExperimentConfig, Outcome};
use unigrec::eval;
use unigrec::nn::device;
use unigrec::recommender::constrained_beam_search;
use unigrec::tokenizer::{self, LogBase, QuantMode, RqTokenizer, TokenizerConfig};
use unigrec::train::{pretrain_tokenizer, AblationRung, Stage1Epoch, TauSchedule, TrainedRecommender, TrainingConfig};
use unigrec::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingPrerequisite { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Training(_) | Error::Numeric(_) | Error::Candle(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), cols), &device()).map_err(|e| py_err(e.into()))
}

fn rows(t: &Tensor) -> PyResult<Vec<Vec<f64>>> {
    t.to_vec2().map_err(|e| py_err(e.into()))
}

fn parse_command(name: &str) -> PyResult<Command> {
    Ok(match name {
        "prepare" => Command::Prepare,
        "train-teacher" => Command::TrainTeacher,
        "pretrain" => Command::Pretrain,
        "joint" => Command::Joint,
        "eval" => Command::Eval,
        "analyze" => Command::Analyze,
        "ablate" => Command::Ablate,
        other => return Err(PyValueError::new_err(format!("unknown command `{other}`"))),
    })
}

/// A configured run directory; `run` executes one pipeline command.
#[pyclass(name = "Experiment", unsendable)]
struct PyExperiment {
    inner: Experiment,
}

#[pymethods]
impl PyExperiment {
    #[new]
    #[pyo3(signature = (config, out=None, seed=None))]
    fn new(config: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = ExperimentConfig::load(&config).map_err(py_err)?;
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
        }
        Ok(Self {
            inner: Experiment::new(cfg, out),
        })
    }

    /// Returns False when the manifest was current and nothing ran.
    #[pyo3(signature = (command, force=false, rungs=None))]
    fn run(&self, command: &str, force: bool, rungs: Option<Vec<String>>) -> PyResult<bool> {
        let command = parse_command(command)?;
        let rungs = rungs
            .map(|r| r.iter().map(|s| AblationRung::parse(s)).collect::<unigrec::Result<Vec<_>>>())
            .transpose()
            .map_err(py_err)?;
        let outcome = self.inner.run_with(command, force, rungs.as_deref()).map_err(py_err)?;
        Ok(outcome == Outcome::Ran)
    }

    #[getter]
    fn run_dir(&self) -> String {
        self.inner.paths.root.display().to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.config.seed
    }
}

/// Residual-quantization tokenizer.
#[pyclass(name = "Tokenizer", unsendable)]
struct PyTokenizer {
    inner: RqTokenizer,
    history: Vec<Stage1Epoch>,
}

#[pymethods]
impl PyTokenizer {
    /// Stage-1 pretraining on item embeddings (one row per item).
    #[staticmethod]
    #[pyo3(signature = (
        items, levels=3, codebook_size=16, code_dim=16, encoder_dims=vec![64, 32],
        tau_max=0.01, tau_min=0.001, epochs=200, schedule="annealed", lambda_cu=1e-4, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn pretrain(
        items: Vec<Vec<f64>>,
        levels: usize,
        codebook_size: usize,
        code_dim: usize,
        encoder_dims: Vec<usize>,
        tau_max: f64,
        tau_min: f64,
        epochs: usize,
        schedule: &str,
        lambda_cu: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let z = matrix(&items)?;
        let cfg = TokenizerConfig {
            encoder_dims,
            levels,
            codebook_size,
            code_dim,
            tau_max,
            tau_min,
            ..TokenizerConfig::desk(z.dims()[1])
        };
        let mut training = TrainingConfig {
            seed,
            ..TrainingConfig::default()
        };
        training.stage1.epochs = epochs;
        training.stage1.lambda_cu = lambda_cu;
        training.stage1.schedule = match schedule {
            "annealed" => TauSchedule::Annealed,
            "fixed-max" => TauSchedule::FixedMax,
            "fixed-min" => TauSchedule::FixedMin,
            other => return Err(PyValueError::new_err(format!("unknown schedule `{other}`"))),
        };
        let (inner, history) = pretrain_tokenizer(&z, &cfg, &training).map_err(py_err)?;
        Ok(Self { inner, history })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RqTokenizer::load(&dir).map_err(py_err)?,
            history: Vec::new(),
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.levels()
    }

    #[getter]
    fn codebook_size(&self) -> usize {
        self.inner.codebook_size()
    }

    /// Per-epoch (tau, reconstruction, collision rate) from pretraining.
    #[getter]
    fn history(&self) -> Vec<(f64, f64, f64)> {
        self.history.iter().map(|h| (h.tau, h.recon, h.collision_rate)).collect()
    }

    fn encode(&self, items: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        rows(&self.inner.encode(&matrix(&items)?).map_err(py_err)?)
    }

    fn codebook(&self, level: usize) -> PyResult<Vec<Vec<f64>>> {
        rows(self.inner.codebook(level).map_err(py_err)?)
    }

    fn soft_assign(&self, residuals: Vec<Vec<f64>>, level: usize, tau: f64) -> PyResult<Vec<Vec<f64>>> {
        rows(&self.inner.soft_assign(&matrix(&residuals)?, level, tau).map_err(py_err)?)
    }

    fn hard_assign(&self, residuals: Vec<Vec<f64>>, level: usize) -> PyResult<Vec<u32>> {
        self.inner.hard_assign(&matrix(&residuals)?, level).map_err(py_err)
    }

    /// Soft assignment distributions along the residual chain, per level.
    fn soft_identifiers(&self, items: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let q = self
            .inner
            .quantize(&matrix(&items)?, tau, QuantMode::Soft)
            .map_err(py_err)?;
        q.distributions.iter().map(rows).collect()
    }

    /// Hard identifiers as (codes, dedup) per item.
    fn identifiers(&self, items: Vec<Vec<f64>>) -> PyResult<Vec<(Vec<u32>, u32)>> {
        let ids = self.inner.assign_identifiers(&matrix(&items)?, None).map_err(py_err)?;
        Ok(ids.items().iter().map(|i| (i.codes.clone(), i.dedup)).collect())
    }
}

/// A stage-2 checkpoint for generation.
#[pyclass(name = "Recommender", unsendable)]
struct PyRecommender {
    inner: TrainedRecommender,
}

#[pymethods]
impl PyRecommender {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainedRecommender::load(&dir).map_err(py_err)?,
        })
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.identifiers.len()
    }

    /// Top items per history as (item, log-probability), best first.
    #[pyo3(signature = (histories, beam=30, top_n=10))]
    fn recommend(&self, histories: Vec<Vec<u32>>, beam: usize, top_n: usize) -> PyResult<Vec<Vec<(u32, f64)>>> {
        let ranked = constrained_beam_search(
            &self.inner.recommender,
            &self.inner.identifiers,
            &self.inner.trie,
            &histories,
            beam,
            top_n,
        )
        .map_err(py_err)?;
        Ok(ranked
            .into_iter()
            .map(|r| r.into_iter().map(|x| (x.item, x.score)).collect())
            .collect())
    }
}

#[pyfunction]
fn synth_embeddings(n_items: usize, dim: usize, n_clusters: usize, noise_scale: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let t = unigrec::embeddings::synth_embeddings(n_items, dim, n_clusters, noise_scale, seed).map_err(py_err)?;
    Ok((0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect())
}

#[pyfunction]
fn collision_rate(tuples: Vec<Vec<u32>>) -> f64 {
    analysis::collision_rate(&tuples)
}

#[pyfunction]
#[pyo3(signature = (tuples, codebook_size, base="natural"))]
fn usage_entropy(tuples: Vec<Vec<u32>>, codebook_size: usize, base: &str) -> PyResult<Vec<f64>> {
    let base = match base {
        "natural" => LogBase::Natural,
        "2" | "bits" => LogBase::Two,
        other => return Err(PyValueError::new_err(format!("unknown log base `{other}`"))),
    };
    analysis::usage_entropy(&tuples, codebook_size, base).map_err(py_err)
}

#[pyfunction]
fn recall_at_k(ranked: Vec<u32>, target: u32, k: usize) -> f64 {
    eval::recall_at_k(&ranked, target, k)
}

#[pyfunction]
fn ndcg_at_k(ranked: Vec<u32>, target: u32, k: usize) -> f64 {
    eval::ndcg_at_k(&ranked, target, k)
}

#[pyfunction]
fn anneal_temperature(step: i64, total_step: u64, tau_max: f64, tau_min: f64) -> PyResult<f64> {
    tokenizer::anneal_temperature(step, total_step, tau_max, tau_min).map_err(py_err)
}

#[pymodule]
fn pyunigrec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyRecommender>()?;
    m.add_function(wrap_pyfunction!(synth_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(collision_rate, m)?)?;
    m.add_function(wrap_pyfunction!(usage_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(anneal_temperature, m)?)?;
    Ok(())
}
