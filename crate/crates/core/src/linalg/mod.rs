//! Dense real linear algebra: centering, symmetric eigendecomposition,
//! singular value decomposition and the symmetric inverse square root used to
//! whiten covariance matrices.
//!
//! Everything is `f64`. The matrices in this crate are at most a few hundred
//! rows square, so the decompositions are plain cyclic Jacobi sweeps: small,
//! deterministic and accurate to machine precision.

mod matrix;

pub use matrix::{gemm, gemm_into, Matrix};

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Default eigenvalue floor for [`sym_inv_sqrt`], relative to the largest eigenvalue.
pub const DEFAULT_RELATIVE_CLAMP: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

/// Thin singular value decomposition `M = U diag(σ) Vᵀ`, σ descending.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, &s) in self.singular_values.iter().enumerate() {
            us.col_mut(j).iter_mut().for_each(|x| *x *= s);
        }
        us.matmul_t(&self.v)
    }
}

/// Sum with Neumaier compensation.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Subtracts the per-row mean (over samples) from a `d x N` matrix.
///
/// Rows whose mean is below the rounding floor of the row (`ε · max|x|`) are
/// treated as already centered and reported with mean 0, which makes the
/// operation exactly idempotent.
pub fn center_columns(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::Empty("cannot center an empty matrix".into()));
    }
    let n = x.cols() as f64;
    let mean: Vec<f64> = (0..x.rows())
        .map(|i| {
            let m = compensated_sum((0..x.cols()).map(|j| x[(i, j)])) / n;
            let scale = (0..x.cols()).fold(0.0f64, |a, j| a.max(x[(i, j)].abs()));
            if m.abs() <= f64::EPSILON * scale {
                0.0
            } else {
                m
            }
        })
        .collect();
    Ok((x.sub_row_vector(&mean), mean))
}

/// Flips signs so that the largest-magnitude entry of every column is positive.
/// Returns the applied signs.
pub(crate) fn canonical_signs(m: &mut Matrix) -> Vec<f64> {
    let mut signs = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let col = m.col_mut(j);
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        let s = if best < 0.0 { -1.0 } else { 1.0 };
        if s < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        signs.push(s);
    }
    signs
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(S + Sᵀ)/2` first. Eigenvectors follow the
/// largest-entry-positive sign convention.
pub fn sym_eig(s: &Matrix) -> Result<SymEigResult> {
    if !s.is_square() {
        return Err(Error::dim(format!(
            "sym_eig needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("sym_eig input".into()));
    }
    let n = s.rows();
    let mut a = s.symmetrize();
    let mut v = Matrix::identity(n);
    let norm = a.frobenius_norm();

    let mut converged = n <= 1 || norm == 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                routine: "sym_eig",
                iterations: sweeps,
            });
        }
        sweeps += 1;
        let mut off = 0.0;
        for q in 1..n {
            for p in 0..q {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= f64::EPSILON * norm * 1e-2 {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // skip rotations that cannot change the diagonal in floating point
                if apq.abs() <= f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()).max(f64::MIN_POSITIVE)
                {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
        converged = !rotated;
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag = a.diag();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let mut eigenvectors = v.select_columns(&order);
    canonical_signs(&mut eigenvectors);
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors,
    })
}

/// `V diag(max(λ, clamp)^{-1/2}) Vᵀ` for a symmetric positive (semi)definite `S`.
///
/// Fails if any eigenvalue is below `-clamp`.
pub fn sym_inv_sqrt(s: &Matrix, clamp: f64) -> Result<Matrix> {
    if !(clamp > 0.0) {
        return Err(Error::invalid(format!("clamp must be positive, got {clamp}")));
    }
    let eig = sym_eig(s)?;
    Ok(inv_sqrt_from_eig(&eig, clamp)?)
}

/// [`sym_inv_sqrt`] with the clamp set to [`DEFAULT_RELATIVE_CLAMP`] times the
/// largest eigenvalue.
pub fn sym_inv_sqrt_default(s: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(s)?;
    let top = eig.eigenvalues.first().copied().unwrap_or(0.0).abs();
    let clamp = (DEFAULT_RELATIVE_CLAMP * top).max(f64::MIN_POSITIVE);
    inv_sqrt_from_eig(&eig, clamp)
}

fn inv_sqrt_from_eig(eig: &SymEigResult, clamp: f64) -> Result<Matrix> {
    if let Some(&low) = eig.eigenvalues.last() {
        if low < -clamp {
            return Err(Error::Indefinite {
                eigenvalue: low,
                clamp,
            });
        }
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let f = 1.0 / l.max(clamp).sqrt();
        scaled.col_mut(j).iter_mut().for_each(|x| *x *= f);
    }
    Ok(scaled.matmul_t(&eig.eigenvectors).symmetrize())
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// For an `m x n` input the factors are `U: m x k`, `V: n x k` with
/// `k = min(m, n)`. Columns of `U` follow the largest-entry-positive sign
/// convention, with `V` flipped to match.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose())?;
        let mut out = SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
        let signs = canonical_signs(&mut out.u);
        apply_signs(&mut out.v, &signs);
        return Ok(out);
    }
    let mut out = svd_tall(m)?;
    let signs = canonical_signs(&mut out.u);
    apply_signs(&mut out.v, &signs);
    Ok(out)
}

fn apply_signs(m: &mut Matrix, signs: &[f64]) {
    for (j, &s) in signs.iter().enumerate() {
        if s < 0.0 {
            m.col_mut(j).iter_mut().for_each(|v| *v = -*v);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let rows = m.rows();
    let data = m.data_mut();
    let (lo, hi) = data.split_at_mut(q * rows);
    let cp = &mut lo[p * rows..(p + 1) * rows];
    let cq = &mut hi[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

// rows >= cols
fn svd_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, n) = m.shape();
    let mut u = m.clone();
    let mut v = Matrix::identity(n);
    // Inner products carry rounding error of order rows·eps.
    let tol = rows.max(1) as f64 * f64::EPSILON;
    // columns below this squared norm are numerically zero
    let negligible = (f64::EPSILON * m.frobenius_norm()).powi(2);
    let mut sweeps = 0;
    loop {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                routine: "svd",
                iterations: sweeps,
            });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = dot(u.col(p), u.col(p));
                let beta = dot(u.col(q), u.col(q));
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(u.col(p), u.col(q));
                if gamma == 0.0 || gamma.abs() <= tol * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut u, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(u.col(j), u.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let singular_values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u = u.select_columns(&order);
    let v = v.select_columns(&order);

    let mut degenerate = Vec::new();
    for (j, &s) in singular_values.iter().enumerate() {
        if s * s > negligible && s > f64::MIN_POSITIVE * 1e10 {
            u.col_mut(j).iter_mut().for_each(|x| *x /= s);
        } else {
            degenerate.push(j);
        }
    }
    // zero singular values leave no direction behind; complete U orthonormally
    for j in degenerate {
        complete_column(&mut u, j, rows)?;
    }
    Ok(SvdResult {
        u,
        singular_values,
        v,
    })
}

/// Replaces column `j` with a unit vector orthogonal to every other column.
fn complete_column(u: &mut Matrix, j: usize, rows: usize) -> Result<()> {
    let others: Vec<usize> = (0..u.cols()).filter(|&c| c != j).collect();
    for e in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[e] = 1.0;
        // two Gram-Schmidt passes
        for _ in 0..2 {
            for &c in &others {
                let col = u.col(c);
                let norm2 = dot(col, col);
                if norm2 < 0.5 {
                    continue;
                }
                let proj = dot(col, &cand);
                cand.iter_mut().zip(col).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 1e-3 {
            u.col_mut(j)
                .iter_mut()
                .zip(&cand)
                .for_each(|(x, y)| *x = y / norm);
            return Ok(());
        }
    }
    Err(Error::NoConvergence {
        routine: "svd basis completion",
        iterations: rows,
    })
}
