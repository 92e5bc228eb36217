//! Joint PCA of concatenated BOW vectors, whitening, and re-normalization
//! into short vectors.
//!
//! Training centers the rows and finds the leading principal directions
//! either from the `N x N` gram matrix (cheap when `N < D`, the usual BOW
//! case) or from the `D x D` covariance. Both use the 1/N convention so
//! eigenvalues are on the same scale. For a gram eigenvector `u` with
//! eigenvalue `l`, the matching covariance eigenvector is `Yc^T u`, whose
//! norm is `sqrt(N l)`.
//!
//! A short vector is `t / |t|` with `t = diag(l^-1/2) P^T (x - mean)`.

use std::fs;
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::binio::{self, Decoder, Encoder};
use crate::bow::{BowMatrix, BowVector};
use crate::error::{Error, Result};
use crate::linalg::{self, TopEigen};

const MODEL_MAGIC: &[u8; 4] = b"MVRD";
const FLAG_FLOORED: u32 = 1;

/// Eigenvalues at or below this fraction of the largest are numerically zero.
pub const ZERO_TOL: f64 = 1e-12;
/// Kept eigenvalues are raised to at least this fraction of the largest.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Whitened norms below this produce a flagged zero vector.
pub const ZERO_NORM: f64 = 1e-12;
const LANCZOS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Route {
    /// Gram matrix when `N < D`, covariance otherwise.
    #[default]
    Auto,
    Gram,
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    /// Lanczos when the eigenproblem size exceeds `4 * d_out`, dense otherwise.
    #[default]
    Auto,
    Dense,
    Lanczos,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReductionOptions {
    pub route: Route,
    pub solver: Solver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionModel {
    pub d: usize,
    pub d_out: usize,
    pub mean: Vec<f64>,
    /// Non-increasing, strictly positive.
    pub eigenvalues: Vec<f64>,
    /// `d x d_out`, column-major, orthonormal columns.
    pub basis: Vec<f64>,
    /// Some eigenvalues were raised to the floor.
    pub floored: bool,
}

/// Reduced, whitened, unit-norm representation of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortVector {
    pub image_id: String,
    pub values: Vec<f32>,
    pub zero: bool,
}

impl ReductionModel {
    pub fn column(&self, j: usize) -> &[f64] {
        &self.basis[j * self.d..(j + 1) * self.d]
    }

    /// True for components whose eigenvalue sits at the floor.
    pub fn is_floored(&self, j: usize) -> bool {
        self.floored && self.eigenvalues[j] <= EIGEN_FLOOR * self.eigenvalues[0]
    }

    /// Whitened projection before re-normalization.
    pub fn whiten(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        (0..self.d_out)
            .map(|j| linalg::dot(self.column(j), &centered) / self.eigenvalues[j].sqrt())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(MODEL_MAGIC);
        enc.u32(self.d as u32);
        enc.u32(self.d_out as u32);
        enc.u32(if self.floored { FLAG_FLOORED } else { 0 });
        enc.f32s(self.mean.iter().map(|&v| v as f32));
        enc.f64s(self.eigenvalues.iter().copied());
        enc.f32s(self.basis.iter().map(|&v| v as f32));
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::with_header(bytes, MODEL_MAGIC, "reduction model file")?;
        let d = dec.u32()? as usize;
        let d_out = dec.u32()? as usize;
        let flags = dec.u32()?;
        let mean = dec.f32s(d)?;
        let eigenvalues = dec.f64s(d_out)?;
        let basis = dec.f32s(binio::checked_len(d as u64, d_out as u64, "reduction model file")?)?;
        dec.finish()?;
        if d_out == 0 || d_out > d {
            return Err(Error::Corruption(format!(
                "reduction model file: D={d} D'={d_out}"
            )));
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0 && l.is_finite()))
            || mean.iter().chain(&basis).any(|v| !v.is_finite())
        {
            return Err(Error::Data(
                "reduction model file: non-finite values or non-positive eigenvalues".into(),
            ));
        }
        Ok(ReductionModel {
            d,
            d_out,
            mean: mean.into_iter().map(f64::from).collect(),
            eigenvalues,
            basis: basis.into_iter().map(f64::from).collect(),
            floored: flags & FLAG_FLOORED != 0,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Learns the mean, the top `d_out` principal directions, and their
/// eigenvalues from the rows of `y` (`N x D`).
pub fn train_reduction(
    y: &DMatrix<f64>,
    d_out: usize,
    opts: &ReductionOptions,
) -> Result<ReductionModel> {
    let (n, d) = y.shape();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("training matrix has non-finite values".into()));
    }
    if d_out == 0 || d_out > d {
        return Err(Error::Parameter(format!(
            "output dimension {d_out} must lie in [1, {d}]"
        )));
    }
    if n < d_out + 1 {
        return Err(Error::Parameter(format!(
            "need at least {} training vectors for D'={d_out}, got {n}",
            d_out + 1
        )));
    }
    let mean: Vec<f64> = (0..d).map(|j| y.column(j).sum() / n as f64).collect();
    let mut centered = y.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }

    let use_gram = match opts.route {
        Route::Auto => n < d,
        Route::Gram => true,
        Route::Covariance => false,
    };
    let (top, mut vectors) = if use_gram {
        let gram = (&centered * centered.transpose()) / n as f64;
        let top = top_eigen(gram, d_out, opts.solver);
        check_rank(&top, d_out)?;
        let mut cols = Vec::with_capacity(d_out);
        for i in 0..d_out {
            let p = centered.tr_mul(&top.vectors.column(i).into_owned());
            cols.push(p.as_slice().to_vec());
        }
        (top, cols)
    } else {
        let cov = centered.tr_mul(&centered) / n as f64;
        let top = top_eigen(cov, d_out, opts.solver);
        check_rank(&top, d_out)?;
        let cols = (0..d_out)
            .map(|i| top.vectors.column(i).iter().copied().collect())
            .collect();
        (top, cols)
    };
    debug!(
        "reduction trained via {} route: N={n} D={d} D'={d_out} lambda1={:.6e}",
        if use_gram { "gram" } else { "covariance" },
        top.values[0]
    );

    let mut basis = Vec::with_capacity(d * d_out);
    for col in vectors.iter_mut() {
        linalg::normalize_in_place(col);
        linalg::fix_sign(col);
        basis.extend_from_slice(col);
    }
    let lambda1 = top.values[0];
    let mut floored = false;
    let eigenvalues = top.values[..d_out]
        .iter()
        .map(|&l| {
            if l < EIGEN_FLOOR * lambda1 {
                floored = true;
                EIGEN_FLOOR * lambda1
            } else {
                l
            }
        })
        .collect();
    Ok(ReductionModel {
        d,
        d_out,
        mean,
        eigenvalues,
        basis,
        floored,
    })
}

/// Training entry point for encoded images. Zero vectors (images without
/// descriptors) are left out.
pub fn train_reduction_from_bow(
    y: &BowMatrix,
    d_out: usize,
    opts: &ReductionOptions,
) -> Result<ReductionModel> {
    let rows: Vec<usize> = (0..y.len()).filter(|&i| !y.is_zero_row(i)).collect();
    if rows.len() < y.len() {
        debug!("excluding {} zero vectors from reduction training", y.len() - rows.len());
    }
    let m = DMatrix::from_fn(rows.len(), y.dim, |r, c| y.row(rows[r])[c] as f64);
    train_reduction(&m, d_out, opts)
}

fn top_eigen(a: DMatrix<f64>, k: usize, solver: Solver) -> TopEigen {
    let m = a.nrows();
    let lanczos = match solver {
        Solver::Auto => m > 4 * k,
        Solver::Dense => false,
        Solver::Lanczos => true,
    };
    if lanczos {
        linalg::lanczos_top_eigen(m, k, LANCZOS_TOL, |x, out| {
            let r = &a * DVector::from_column_slice(x);
            out.copy_from_slice(r.as_slice());
        })
    } else {
        linalg::dense_top_eigen(a, k)
    }
}

fn check_rank(top: &TopEigen, d_out: usize) -> Result<()> {
    let lambda1 = top.values.first().copied().unwrap_or(0.0);
    let usable = top
        .values
        .iter()
        .take_while(|&&l| lambda1 > 0.0 && l > ZERO_TOL * lambda1)
        .count();
    if usable < d_out {
        return Err(Error::RankDeficient {
            available: usable,
            requested: d_out,
        });
    }
    Ok(())
}

/// Projects, whitens, and re-normalizes one vector.
pub fn reduce(x: &BowVector, m: &ReductionModel) -> Result<ShortVector> {
    if x.dim() != m.d {
        return Err(Error::Parameter(format!(
            "vector dimension {} does not match model dimension {}",
            x.dim(),
            m.d
        )));
    }
    let xs: Vec<f64> = x.values.iter().map(|&v| v as f64).collect();
    let t = m.whiten(&xs);
    let norm = linalg::norm(&t);
    Ok(if norm < ZERO_NORM || x.zero {
        ShortVector {
            image_id: x.image_id.clone(),
            values: vec![0.0; m.d_out],
            zero: true,
        }
    } else {
        ShortVector {
            image_id: x.image_id.clone(),
            values: t.iter().map(|v| (v / norm) as f32).collect(),
            zero: false,
        }
    })
}

/// Reduces every row, in parallel. Zero input rows stay zero.
pub fn reduce_matrix(y: &BowMatrix, m: &ReductionModel) -> Result<BowMatrix> {
    let shorts = (0..y.len())
        .into_par_iter()
        .map(|i| reduce(&y.vector(i), m))
        .collect::<Result<Vec<_>>>()?;
    let mut out = BowMatrix::new(m.d_out);
    for s in shorts {
        out.push(&s.image_id, &s.values)?;
    }
    Ok(out)
}

/// Variance (1/N) of each whitened component over the training rows, before
/// re-normalization. Unfloored components come out at 1.
pub fn whitening_check(y: &DMatrix<f64>, m: &ReductionModel) -> Result<Vec<f64>> {
    let (n, d) = y.shape();
    if d != m.d {
        return Err(Error::Parameter("dimension mismatch".into()));
    }
    if n == 0 {
        return Err(Error::Data("no training rows".into()));
    }
    let whitened: Vec<Vec<f64>> = (0..n)
        .map(|i| m.whiten(&y.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    Ok((0..m.d_out)
        .map(|j| {
            let mu = whitened.iter().map(|t| t[j]).sum::<f64>() / n as f64;
            whitened.iter().map(|t| (t[j] - mu).powi(2)).sum::<f64>() / n as f64
        })
        .collect())
}
