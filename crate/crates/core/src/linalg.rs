//! Small dense linear-algebra helpers shared by the solvers.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

/// Spectral (operator 2-) norm via the eigenvalues of `A' A`.
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let gram = a.transpose() * a;
    let (_, hi) = symmetric_eigen_bounds(&gram);
    hi.max(0.0).sqrt()
}

/// (min, max) eigenvalue of a symmetric matrix.
pub fn symmetric_eigen_bounds(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = a.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Largest real part of the (possibly complex) spectrum.
pub fn max_real_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Symmetric part `(A + A') / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()).scale(0.5)
}

/// Kronecker product `a (x) b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc))
                .copy_from(&(b.scale(aij)));
        }
    }
    out
}

/// Column-major vectorization of a matrix.
pub fn vectorize(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of `vectorize` for an m x m matrix.
pub fn unvectorize(v: &DVector<f64>, m: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(m, m, v.as_slice())
}

/// The m^2 x m^2 matrix of the linear map
/// `G -> F' G + G F + sum_l S_l' G S_l + sum_j w_j C_j' G C_j + shift G`
/// acting on vectorized m x m matrices.
pub fn lyapunov_like_operator(
    f: &DMatrix<f64>,
    quad_terms: &[(f64, &DMatrix<f64>)],
    shift: f64,
) -> DMatrix<f64> {
    let m = f.nrows();
    let eye = DMatrix::<f64>::identity(m, m);
    let ft = f.transpose();
    let mut op = kron(&eye, &ft) + kron(&ft, &eye);
    for (w, c) in quad_terms {
        let ct = c.transpose();
        op += kron(&ct, &ct).scale(*w);
    }
    for d in 0..m * m {
        op[(d, d)] += shift;
    }
    op
}

/// Solves `op * vec(G) = vec(rhs)`, symmetrizing the result.
/// Returns `None` when the operator is singular.
pub fn solve_vectorized(op: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = rhs.nrows();
    let sol = op.clone().lu().solve(&vectorize(rhs))?;
    Some(symmetrize(&unvectorize(&sol, m)))
}

/// Symmetric positive-definite inverse through Cholesky, falling back
/// to LU for indefinite input.
pub fn inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.inverse());
    }
    a.clone().try_inverse()
}

/// Deterministic pairwise sum; the result depends only on the element
/// order, not on how work was scheduled.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Mean and standard error of the mean.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}
