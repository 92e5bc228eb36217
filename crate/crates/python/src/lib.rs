//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use mvocab_core::bow::{self, BowMatrix, BowVector};
use mvocab_core::reduction::{self, ReductionOptions};
use mvocab_core::search::{self, QueryTruth};
use mvocab_core::vocabulary::{self, KMeansParams, Provenance};
use mvocab_core::{DescriptorMatrix, Error};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn descriptors(rows: Vec<Vec<f32>>) -> PyResult<DescriptorMatrix> {
    DescriptorMatrix::from_rows(&rows).map_err(py_err)
}

/// k-means visual vocabulary.
#[pyclass(module = "mvocab")]
struct Vocabulary(vocabulary::Vocabulary);

#[pymethods]
impl Vocabulary {
    #[staticmethod]
    #[pyo3(signature = (rows, k, seed=0, max_iters=25, restarts=1))]
    fn train(rows: Vec<Vec<f32>>, k: usize, seed: u64, max_iters: usize, restarts: usize) -> PyResult<Self> {
        let x = descriptors(rows)?;
        let params = KMeansParams {
            max_iters,
            restarts,
            ..KMeansParams::new(k, seed)
        };
        let prov = Provenance {
            seed,
            ..Default::default()
        };
        vocabulary::kmeans_train(&x, &params, prov)
            .map(|r| Vocabulary(r.vocabulary))
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        vocabulary::Vocabulary::load(&path).map(Vocabulary).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    fn centroids(&self) -> Vec<Vec<f32>> {
        self.0.centroids().chunks(self.0.d()).map(<[f32]>::to_vec).collect()
    }

    /// Nearest word id per row (lowest id on ties).
    fn quantize(&self, rows: Vec<Vec<f32>>) -> PyResult<Vec<u32>> {
        vocabulary::quantize(&descriptors(rows)?, &self.0)
            .map(|a| a.word_ids)
            .map_err(py_err)
    }

    fn objective(&self, rows: Vec<Vec<f32>>) -> PyResult<f64> {
        vocabulary::kmeans_objective(&descriptors(rows)?, &self.0).map_err(py_err)
    }
}

/// Joint PCA + whitening model.
#[pyclass(module = "mvocab")]
struct ReductionModel(reduction::ReductionModel);

fn dense(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]))
}

#[pymethods]
impl ReductionModel {
    #[staticmethod]
    fn train(rows: Vec<Vec<f64>>, d_out: usize) -> PyResult<Self> {
        reduction::train_reduction(&dense(&rows)?, d_out, &ReductionOptions::default())
            .map(ReductionModel)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        reduction::ReductionModel::load(&path).map(ReductionModel).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d
    }

    #[getter]
    fn d_out(&self) -> usize {
        self.0.d_out
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.0.eigenvalues.clone()
    }

    #[getter]
    fn floored(&self) -> bool {
        self.0.floored
    }

    /// Returns `(values, zero_flag)`.
    fn reduce(&self, values: Vec<f64>) -> PyResult<(Vec<f32>, bool)> {
        reduction::reduce(&BowVector::from_f64("", &values), &self.0)
            .map(|s| (s.values, s.zero))
            .map_err(py_err)
    }

    fn whitening_check(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        reduction::whitening_check(&dense(&rows)?, &self.0).map_err(py_err)
    }
}

/// Exhaustive cosine search over unit-norm (or zero) vectors.
#[pyclass(module = "mvocab")]
struct Index(search::Index);

#[pymethods]
impl Index {
    #[new]
    fn new(ids: Vec<String>, vectors: Vec<Vec<f32>>) -> PyResult<Self> {
        if ids.len() != vectors.len() {
            return Err(PyValueError::new_err("ids and vectors differ in length"));
        }
        let mut m = BowMatrix::new(vectors.first().map_or(0, Vec::len));
        for (id, v) in ids.iter().zip(&vectors) {
            m.push(id, v).map_err(py_err)?;
        }
        search::Index::build(m).map(Index).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// `(id, score)` pairs, best first.
    fn query(&self, q: Vec<f32>, top: usize) -> PyResult<Vec<(String, f64)>> {
        self.0.query(&q, top).map_err(py_err)
    }
}

#[pyfunction]
fn quantization_complexity(ks: Vec<usize>) -> usize {
    bow::quantization_complexity(ks)
}

#[pyfunction]
fn unique_assignments(per_vocab: Vec<Vec<u32>>) -> PyResult<usize> {
    let slices: Vec<&[u32]> = per_vocab.iter().map(Vec::as_slice).collect();
    bow::unique_assignments(&slices).map_err(py_err)
}

#[pyfunction]
fn ssr(values: Vec<f32>, beta: f64) -> PyResult<Vec<f32>> {
    bow::ssr(&values, beta).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (ranked, positives, junk=Vec::new(), query_id="", exclude_self=false))]
fn average_precision(
    ranked: Vec<String>,
    positives: Vec<String>,
    junk: Vec<String>,
    query_id: &str,
    exclude_self: bool,
) -> PyResult<f64> {
    let gt = QueryTruth::new(query_id, positives, junk, exclude_self);
    search::average_precision(&ranked, &gt).map_err(py_err)
}

/// Runs the command line front end; returns `(exit_code, stdout_text)`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("mvocab".to_string()).chain(args);
    let code = mvocab_core::cli::run(argv, &mut out);
    (code, String::from_utf8_lossy(&out).into_owned())
}

#[pymodule]
fn mvocab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<ReductionModel>()?;
    m.add_class::<Index>()?;
    m.add_function(wrap_pyfunction!(quantization_complexity, m)?)?;
    m.add_function(wrap_pyfunction!(unique_assignments, m)?)?;
    m.add_function(wrap_pyfunction!(ssr, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
