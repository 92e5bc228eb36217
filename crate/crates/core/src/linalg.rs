//! Small dense linear algebra helpers and top-k symmetric eigensolvers.
//!
//! Two solvers share one contract: given a symmetric positive semi-definite
//! operator, return its `k` largest eigenvalues in descending order with
//! orthonormal eigenvectors. [`dense_top_eigen`] diagonalizes the full matrix;
//! [`lanczos_top_eigen`] only needs matrix-vector products and grows a fully
//! reorthogonalized Krylov basis until every requested Ritz pair has
//! converged (in the worst case the basis spans the whole space, which makes
//! the result exact).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Eigenpairs sorted by descending eigenvalue. `vectors` is `n x k`.
#[derive(Debug, Clone)]
pub struct TopEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `v` to unit L2 norm in place. Returns the original norm; a zero
/// vector is left untouched.
pub fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flips `v` so that its largest-magnitude component is positive. Ties in
/// magnitude resolve to the lowest index.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn sorted_top(eig: SymmetricEigen<f64, nalgebra::Dyn>, k: usize) -> TopEigen {
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the solver's order for exactly equal eigenvalues.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let k = k.min(n);
    let values = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), k, |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    TopEigen { values, vectors }
}

/// Top-`k` eigenpairs of a dense symmetric matrix.
pub fn dense_top_eigen(a: DMatrix<f64>, k: usize) -> TopEigen {
    sorted_top(SymmetricEigen::new(a), k)
}

/// Top-`k` eigenpairs of the symmetric operator `apply` (which writes `A x`
/// into its second argument) of size `n`.
///
/// `rel_tol` bounds the Ritz residual `||A y - theta y||` relative to the
/// largest Ritz value. The start vector comes from a fixed seed so results
/// are reproducible.
pub fn lanczos_top_eigen<F>(n: usize, k: usize, rel_tol: f64, mut apply: F) -> TopEigen
where
    F: FnMut(&[f64], &mut [f64]),
{
    let k = k.min(n);
    if n == 0 || k == 0 {
        return TopEigen {
            values: vec![],
            vectors: DMatrix::zeros(n, 0),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c61_6e63_7a6f_7300);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();

    let mut q = random_orthogonal_unit(n, &basis, &mut rng).expect("n > 0");
    let mut w = vec![0.0; n];
    let check_every = (k / 4).max(8);

    loop {
        apply(&q, &mut w);
        let j = basis.len();
        let a = dot(&q, &w);
        w.iter_mut().zip(&q).for_each(|(wi, qi)| *wi -= a * qi);
        if j > 0 {
            let b = beta[j - 1];
            w.iter_mut()
                .zip(&basis[j - 1])
                .for_each(|(wi, qi)| *wi -= b * qi);
        }
        basis.push(q);
        alpha.push(a);
        // Two passes of classical Gram-Schmidt against the whole basis.
        for _ in 0..2 {
            for v in &basis {
                let c = dot(v, &w);
                w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= c * vi);
            }
        }
        let b = norm(&w);
        let m = basis.len();
        let full = m == n;

        if m >= k && (full || m.is_multiple_of(check_every) || b == 0.0) {
            let ritz = tridiagonal_eigen(&alpha, &beta);
            let scale = ritz.values[0].abs().max(f64::MIN_POSITIVE);
            let converged = full
                || (0..k).all(|i| (b * ritz.vectors[(m - 1, i)]).abs() <= rel_tol * scale);
            if converged {
                return assemble(&basis, ritz, k);
            }
        }

        let scale = alpha.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        if b <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            // Invariant subspace: restart with a fresh direction orthogonal
            // to everything found so far.
            beta.push(0.0);
            match random_orthogonal_unit(n, &basis, &mut rng) {
                Some(next) => q = next,
                None => return assemble(&basis, tridiagonal_eigen(&alpha, &beta[..m - 1]), k),
            }
        } else {
            beta.push(b);
            q = w.iter().map(|x| x / b).collect();
        }
        w.iter_mut().for_each(|x| *x = 0.0);
    }
}

fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> TopEigen {
    let m = alpha.len();
    let t = DMatrix::from_fn(m, m, |r, c| {
        if r == c {
            alpha[r]
        } else if r + 1 == c {
            beta[r]
        } else if c + 1 == r {
            beta[c]
        } else {
            0.0
        }
    });
    dense_top_eigen(t, m)
}

fn assemble(basis: &[Vec<f64>], ritz: TopEigen, k: usize) -> TopEigen {
    let n = basis[0].len();
    let k = k.min(ritz.values.len());
    let mut vectors = DMatrix::zeros(n, k);
    for c in 0..k {
        let mut y = vec![0.0; n];
        for (j, v) in basis.iter().enumerate() {
            let s = ritz.vectors[(j, c)];
            y.iter_mut().zip(v).for_each(|(yi, vi)| *yi += s * vi);
        }
        normalize_in_place(&mut y);
        vectors.set_column(c, &DVector::from_vec(y));
    }
    TopEigen {
        values: ritz.values[..k].to_vec(),
        vectors,
    }
}

fn random_orthogonal_unit(n: usize, basis: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    if basis.len() >= n {
        return None;
    }
    for _ in 0..8 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        for _ in 0..2 {
            for b in basis {
                let c = dot(b, &v);
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= c * bi);
            }
        }
        if normalize_in_place(&mut v) > 1e-8 {
            return Some(v);
        }
    }
    None
}
