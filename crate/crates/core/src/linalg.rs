//! Small dense helpers for the normal-equation systems used by the fits.
//!
//! Matrices are row-major `Vec<f64>` of size `p * p`; `p` is at most a few dozen.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Lower Cholesky factor of a symmetric matrix, or `None` when a pivot falls
/// below `rel_tol` times the largest diagonal entry.
pub fn cholesky(a: &[f64], p: usize, rel_tol: f64) -> Option<Vec<f64>> {
    let scale = (0..p).map(|i| a[i * p + i].abs()).fold(0.0, f64::max);
    if p > 0 && scale == 0.0 {
        return None;
    }
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if s <= rel_tol * scale {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Some(l)
}

pub fn cholesky_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..p {
        for k in 0..i {
            y[i] -= l[i * p + k] * y[k];
        }
        y[i] /= l[i * p + i];
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            y[i] -= l[k * p + i] * y[k];
        }
        y[i] /= l[i * p + i];
    }
    y
}

pub fn cholesky_inverse(l: &[f64], p: usize) -> Vec<f64> {
    let mut inv = vec![0.0; p * p];
    let mut e = vec![0.0; p];
    for j in 0..p {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(l, p, &e);
        for i in 0..p {
            inv[i * p + j] = col[i];
        }
    }
    inv
}

/// Moore–Penrose solution `A⁺ b` for symmetric positive semidefinite `A`.
/// Returns the solution and the numerical rank.
pub fn pinv_solve_symmetric(a: &[f64], p: usize, b: &[f64]) -> (Vec<f64>, usize) {
    let m = DMatrix::from_row_slice(p, p, a);
    let eig = SymmetricEigen::new(m);
    let max_ev = eig
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let cutoff = max_ev * 1e-12 * p as f64;
    let bv = DVector::from_column_slice(b);
    let mut x = DVector::zeros(p);
    let mut rank = 0;
    for k in 0..p {
        let ev = eig.eigenvalues[k];
        if ev > cutoff {
            rank += 1;
            let v = eig.eigenvectors.column(k);
            x += v * (v.dot(&bv) / ev);
        }
    }
    (x.iter().copied().collect(), rank)
}

/// Ratio of largest to smallest singular value of a general square matrix.
pub fn condition_number(a: &[f64], p: usize) -> f64 {
    let m = DMatrix::from_row_slice(p, p, a);
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves a general square system by LU with partial pivoting.
pub fn lu_solve(a: &[f64], p: usize, b: &[f64]) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(p, p, a);
    let x = m.lu().solve(&DVector::from_column_slice(b))?;
    Some(x.iter().copied().collect())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `acc += w * x xᵀ` on the upper triangle.
#[inline]
pub fn add_outer_upper(acc: &mut [f64], x: &[f64], w: f64) {
    let p = x.len();
    for i in 0..p {
        let wi = w * x[i];
        let row = &mut acc[i * p..(i + 1) * p];
        for j in i..p {
            row[j] += wi * x[j];
        }
    }
}

pub fn symmetrize_from_upper(a: &mut [f64], p: usize) {
    for i in 0..p {
        for j in 0..i {
            a[i * p + j] = a[j * p + i];
        }
    }
}
