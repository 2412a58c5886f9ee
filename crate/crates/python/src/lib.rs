//! Python bindings. Matrices cross the boundary as lists of row lists.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use spotlight::attention_eval::{budget_from_rate, hash_topk, mean_iou, oracle_topk, AttentionInstance, Retriever};
use spotlight::bitcodes::{self, CodeMatrix, HashCode, ScoreVector};
use spotlight::hashers::{Checkpoint, LinearHasher, MlpHasher};
use spotlight::ranking_loss::{self, RankingLossConfig};
use spotlight::synthkv::{ConeSpec, QkDump};
use spotlight::trainer::{train_hasher, LossKind, TrainConfig, TrainData};

fn py_err(e: spotlight::Error) -> PyErr {
    use spotlight::Error as E;
    match e {
        E::Io(_) => PyIOError::new_err(e.to_string()),
        E::NonFinite(_) | E::Diverged { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix<T: spotlight::Real>(rows: &[Vec<T>]) -> PyResult<DMatrix<T>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have differing lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn to_rows<T: spotlight::Real>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[pyclass(name = "CodeMatrix", module = "spotlight_py", frozen)]
struct PyCodeMatrix {
    inner: CodeMatrix,
}

#[pymethods]
impl PyCodeMatrix {
    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn length_bits(&self) -> usize {
        self.inner.length_bits()
    }

    fn row_words(&self, i: usize) -> PyResult<Vec<u32>> {
        if i >= self.inner.rows() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.inner.row_words(i).to_vec())
    }

    /// Row-major bits, inverse of `pack_bits`.
    fn unpack(&self) -> Vec<bool> {
        bitcodes::unpack_bits(&self.inner)
    }

    /// NXOR agreement counts of row `query_row` of `query` against every row.
    fn scores(&self, query: &PyCodeMatrix, query_row: usize) -> PyResult<Vec<u32>> {
        if query_row >= query.inner.rows() {
            return Err(PyValueError::new_err(format!("row {query_row} out of range")));
        }
        let code = query.inner.row(query_row);
        Ok(bitcodes::nxor_scores(&code, &self.inner).map_err(py_err)?.into_inner())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CodeMatrix::load(path).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("CodeMatrix(rows={}, length_bits={})", self.inner.rows(), self.inner.length_bits())
    }
}

/// Packs row-major bits with `d` columns per row into 32-bit words.
#[pyfunction]
fn pack_bits(bits: Vec<bool>, d: usize) -> PyResult<PyCodeMatrix> {
    Ok(PyCodeMatrix {
        inner: bitcodes::pack_bits(&bits, d).map_err(py_err)?,
    })
}

/// Agreement counts of a packed query code (its words) against `index`.
#[pyfunction]
fn nxor_scores(query_words: Vec<u32>, index: &PyCodeMatrix) -> PyResult<Vec<u32>> {
    let code = HashCode::from_words(query_words).map_err(py_err)?;
    Ok(bitcodes::nxor_scores(&code, &index.inner).map_err(py_err)?.into_inner())
}

/// Indices of the `k` largest scores, ties to the lower index.
#[pyfunction]
fn top_k_indices(scores: Vec<u32>, length_bits: usize, k: usize) -> PyResult<Vec<usize>> {
    let scores = ScoreVector::new(scores, length_bits).map_err(py_err)?;
    bitcodes::top_k_indices(&scores, k).map_err(py_err)
}

#[pyfunction(name = "budget_from_rate")]
fn py_budget_from_rate(rate: f64, n: usize) -> usize {
    budget_from_rate(rate, n)
}

#[pyclass(name = "LinearHasher", module = "spotlight_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLinearHasher {
    inner: LinearHasher<f32>,
}

#[pymethods]
impl PyLinearHasher {
    /// Random-rotation LSH with `bits` output bits.
    #[staticmethod]
    #[pyo3(signature = (d, bits, seed, gamma = 64.0))]
    fn qr_init(d: usize, bits: usize, seed: u64, gamma: f32) -> PyResult<Self> {
        Ok(Self {
            inner: LinearHasher::qr_init(d, bits, gamma, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn projection(&self) -> Vec<Vec<f32>> {
        to_rows(self.inner.projection())
    }

    fn hash(&self, x: Vec<Vec<f32>>) -> PyResult<PyCodeMatrix> {
        Ok(PyCodeMatrix {
            inner: self.inner.hash(&to_matrix(&x)?).map_err(py_err)?,
        })
    }
}

#[pyclass(name = "MlpHasher", module = "spotlight_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMlpHasher {
    inner: MlpHasher<f32>,
}

#[pymethods]
impl PyMlpHasher {
    #[staticmethod]
    #[pyo3(signature = (d, hidden, bits, seed, gamma = 64.0))]
    fn random(d: usize, hidden: usize, bits: usize, seed: u64, gamma: f32) -> PyResult<Self> {
        Ok(Self {
            inner: MlpHasher::random(d, hidden, bits, gamma, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim()
    }

    #[getter]
    fn code_bits(&self) -> usize {
        self.inner.code_bits()
    }

    #[getter]
    fn gamma(&self) -> f32 {
        self.inner.gamma()
    }

    /// Pre-activations `W2 · SiLU(x W1 + b1)` for each row of `x`.
    fn forward(&self, x: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        Ok(to_rows(&self.inner.forward(&to_matrix(&x)?).map_err(py_err)?))
    }

    fn soft_codes(&self, x: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        Ok(to_rows(&self.inner.soft_codes(&to_matrix(&x)?).map_err(py_err)?))
    }

    fn hash(&self, x: Vec<Vec<f32>>) -> PyResult<PyCodeMatrix> {
        Ok(PyCodeMatrix {
            inner: self.inner.hash(&to_matrix(&x)?).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::Mlp(self.inner.clone()).save(path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        match Checkpoint::load(path).map_err(py_err)? {
            Checkpoint::Mlp(inner) => Ok(Self { inner }),
            other => Err(PyValueError::new_err(format!(
                "{path} holds a {} checkpoint, not mlp",
                other.kind_name()
            ))),
        }
    }
}

#[pyclass(name = "QkDump", module = "spotlight_py", frozen)]
struct PyQkDump {
    inner: QkDump,
}

#[pymethods]
impl PyQkDump {
    #[new]
    fn new(queries: Vec<Vec<f32>>, keys: Vec<Vec<f32>>) -> PyResult<Self> {
        Ok(Self {
            inner: QkDump::new(to_matrix(&queries)?, to_matrix(&keys)?).map_err(py_err)?,
        })
    }

    /// Two-cone synthetic data; `seed` fixes both the cone axes and samples.
    #[staticmethod]
    #[pyo3(signature = (dim, n_queries, n_keys, seed, spread = 0.3, axis_cos = 0.0))]
    fn generate(dim: usize, n_queries: usize, n_keys: usize, seed: u64, spread: f64, axis_cos: f64) -> PyResult<Self> {
        let spec = ConeSpec::with_geometry(dim, spread, axis_cos, seed).map_err(py_err)?;
        Ok(Self {
            inner: QkDump::generate(&spec, n_queries, n_keys, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_queries(&self) -> usize {
        self.inner.n_queries()
    }

    #[getter]
    fn n_keys(&self) -> usize {
        self.inner.n_keys()
    }

    fn queries(&self) -> Vec<Vec<f32>> {
        to_rows(&self.inner.queries)
    }

    fn keys(&self) -> Vec<Vec<f32>> {
        to_rows(&self.inner.keys)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        spotlight::synthkv::write_dump(path, &self.inner).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: spotlight::synthkv::read_dump(path).map_err(py_err)?,
        })
    }
}

fn causal(dump: &PyQkDump) -> PyResult<AttentionInstance> {
    AttentionInstance::causal_from_dump(&dump.inner, None).map_err(py_err)
}

fn retriever<'a>(hasher: &'a Bound<'_, PyAny>) -> PyResult<Box<dyn Retriever + 'a>> {
    if let Ok(h) = hasher.cast::<PyMlpHasher>() {
        return Ok(Box::new(h.get().inner.clone()));
    }
    if let Ok(h) = hasher.cast::<PyLinearHasher>() {
        return Ok(Box::new(h.get().inner.clone()));
    }
    Err(PyValueError::new_err("expected an MlpHasher or LinearHasher"))
}

/// Exact causal top-`k` key indices for every query of `dump`.
#[pyfunction]
fn oracle_top_k(dump: &PyQkDump, k: usize) -> PyResult<Vec<Vec<usize>>> {
    Ok(oracle_topk(&causal(dump)?, k).map_err(py_err)?.sets)
}

/// Hash-based causal top-`k` key indices for every query of `dump`.
#[pyfunction]
fn hash_top_k(dump: &PyQkDump, hasher: &Bound<'_, PyAny>, k: usize) -> PyResult<Vec<Vec<usize>>> {
    let r = retriever(hasher)?;
    Ok(hash_topk(&causal(dump)?, r.as_ref(), k).map_err(py_err)?.sets)
}

/// Mean per-query IoU of the hasher's top-`k` against the oracle.
#[pyfunction(name = "mean_iou")]
fn py_mean_iou(dump: &PyQkDump, hasher: &Bound<'_, PyAny>, k: usize) -> PyResult<f64> {
    let r = retriever(hasher)?;
    mean_iou(&causal(dump)?, r.as_ref(), k).map_err(py_err)
}

/// Returns `(loss, violation_rate)` of the pairwise ranking loss.
#[pyfunction(name = "ranking_loss")]
#[pyo3(signature = (draft, truth, offsets, seed = 0, beta = 1.0, alpha = 3.0, maskout = 0.98))]
fn py_ranking_loss(
    draft: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
    offsets: Vec<usize>,
    seed: u64,
    beta: f64,
    alpha: f64,
    maskout: f64,
) -> PyResult<(f64, f64)> {
    let cfg = RankingLossConfig {
        beta,
        alpha,
        maskout,
        ..RankingLossConfig::default()
    };
    ranking_loss::ranking_loss(&to_matrix(&draft)?, &to_matrix(&truth)?, &offsets, &cfg, seed).map_err(py_err)
}

/// Trains an MLP hasher on a token-aligned dump with the ranking loss.
/// Returns the trained hasher and the per-iteration losses.
#[pyfunction]
#[pyo3(signature = (hasher, dump, iters, seed = 0, seq_len = 2048, query_subsample = 16, max_oth = 512, max_lr = 1e-3))]
#[allow(clippy::too_many_arguments)]
fn train_mlp(
    py: Python<'_>,
    hasher: &PyMlpHasher,
    dump: &PyQkDump,
    iters: usize,
    seed: u64,
    seq_len: usize,
    query_subsample: usize,
    max_oth: usize,
    max_lr: f64,
) -> PyResult<(PyMlpHasher, Vec<f64>)> {
    let cfg = TrainConfig {
        num_iters: iters,
        warmup_iters: TrainConfig::default().warmup_iters.min(iters),
        seq_len,
        max_lr,
        loss: LossKind::Ranking,
        seed,
        ..TrainConfig::default()
    };
    let loss = RankingLossConfig {
        query_subsample: Some(query_subsample),
        max_oth: Some(max_oth),
        ..RankingLossConfig::default()
    };
    let model = hasher.inner.clone();
    let data = &dump.inner;
    let (trained, report) = py
        .detach(|| train_hasher(model, TrainData::Dump(data), &loss, &cfg, None))
        .map_err(py_err)?;
    Ok((
        PyMlpHasher { inner: trained },
        report.records.iter().map(|r| r.loss).collect(),
    ))
}

#[pymodule]
fn spotlight_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCodeMatrix>()?;
    m.add_class::<PyLinearHasher>()?;
    m.add_class::<PyMlpHasher>()?;
    m.add_class::<PyQkDump>()?;
    m.add_function(wrap_pyfunction!(pack_bits, m)?)?;
    m.add_function(wrap_pyfunction!(nxor_scores, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_indices, m)?)?;
    m.add_function(wrap_pyfunction!(py_budget_from_rate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(hash_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(py_mean_iou, m)?)?;
    m.add_function(wrap_pyfunction!(py_ranking_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train_mlp, m)?)?;
    Ok(())
}
