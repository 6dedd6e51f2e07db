//! Small dense kernels on row-major `p x p` slices.
//!
//! State dimensions here are tiny (two or three), so these loops beat a
//! general matrix library in the Gibbs hot path and allocate nothing.

use crate::error::{Error, Result};

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = M v` for a row-major square `M`.
#[inline]
pub(crate) fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let p = v.len();
    for (i, o) in out.iter_mut().enumerate().take(p) {
        *o = dot(&m[i * p..(i + 1) * p], v);
    }
}

/// `v' M v`.
#[inline]
pub(crate) fn quad_form(m: &[f64], v: &[f64]) -> f64 {
    let p = v.len();
    let mut acc = 0.0;
    for i in 0..p {
        acc += v[i] * dot(&m[i * p..(i + 1) * p], v);
    }
    acc
}

pub(crate) fn symmetrize(m: &mut [f64], p: usize) {
    for i in 0..p {
        for j in (i + 1)..p {
            let avg = 0.5 * (m[i * p + j] + m[j * p + i]);
            m[i * p + j] = avg;
            m[j * p + i] = avg;
        }
    }
}

pub(crate) fn identity(p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * p];
    for i in 0..p {
        out[i * p + i] = 1.0;
    }
    out
}

/// In-place lower Cholesky factor. Entries above the diagonal are zeroed.
///
/// Pivots that fall below `-tol * max_diag` fail; tiny negative pivots from
/// rounding are clamped to zero so positive semi-definite inputs still factor.
pub(crate) fn cholesky_in_place(m: &mut [f64], p: usize) -> Result<()> {
    let max_diag = (0..p).map(|i| m[i * p + i].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    for j in 0..p {
        let mut d = m[j * p + j];
        for k in 0..j {
            d -= m[j * p + k] * m[j * p + k];
        }
        if d < -tol || d.is_nan() {
            return Err(Error::Numerical(format!(
                "matrix not positive semi-definite (pivot {d:e} at {j})"
            )));
        }
        let d = d.max(0.0).sqrt();
        m[j * p + j] = d;
        for i in (j + 1)..p {
            let mut s = m[i * p + j];
            for k in 0..j {
                s -= m[i * p + k] * m[j * p + k];
            }
            m[i * p + j] = if d > 0.0 { s / d } else { 0.0 };
        }
        for k in (j + 1)..p {
            m[j * p + k] = 0.0;
        }
    }
    Ok(())
}

/// Strict Cholesky for systems that must be solved: fails on any
/// non-positive pivot.
pub(crate) fn cholesky_strict(m: &mut [f64], p: usize) -> Result<()> {
    for j in 0..p {
        let mut d = m[j * p + j];
        for k in 0..j {
            d -= m[j * p + k] * m[j * p + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Numerical(format!(
                "matrix not positive definite (pivot {d:e} at {j})"
            )));
        }
        let d = d.sqrt();
        m[j * p + j] = d;
        for i in (j + 1)..p {
            let mut s = m[i * p + j];
            for k in 0..j {
                s -= m[i * p + k] * m[j * p + k];
            }
            m[i * p + j] = s / d;
        }
        for k in (j + 1)..p {
            m[j * p + k] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L L' x = b` in place given the lower factor `L`.
pub(crate) fn cholesky_solve(l: &[f64], b: &mut [f64]) {
    let p = b.len();
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * p + k] * b[k];
        }
        b[i] = s / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in (i + 1)..p {
            s -= l[k * p + i] * b[k];
        }
        b[i] = s / l[i * p + i];
    }
}

/// Solves `L' x = b` in place given the lower factor `L`.
pub(crate) fn solve_lower_transpose(l: &[f64], b: &mut [f64]) {
    let p = b.len();
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in (i + 1)..p {
            s -= l[k * p + i] * b[k];
        }
        b[i] = s / l[i * p + i];
    }
}

/// Inverse of a symmetric positive-definite matrix.
#[cfg(test)]
pub(crate) fn spd_inverse(m: &[f64], p: usize) -> Result<Vec<f64>> {
    let mut l = m.to_vec();
    cholesky_strict(&mut l, p)?;
    let mut inv = vec![0.0; p * p];
    let mut col = vec![0.0; p];
    for j in 0..p {
        col.iter_mut().for_each(|c| *c = 0.0);
        col[j] = 1.0;
        cholesky_solve(&l, &mut col);
        for i in 0..p {
            inv[i * p + j] = col[i];
        }
    }
    symmetrize(&mut inv, p);
    Ok(inv)
}

/// Extreme eigenvalues of a symmetric matrix by cyclic Jacobi sweeps.
pub(crate) fn symmetric_eigenvalues(m: &[f64], p: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..p {
            for j in (i + 1)..p {
                off += a[i * p + j] * a[i * p + j];
            }
        }
        if off < 1e-30 {
            break;
        }
        for i in 0..p {
            for j in (i + 1)..p {
                let aij = a[i * p + j];
                if aij.abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (a[j * p + j] - a[i * p + i]) / aij;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..p {
                    let aki = a[k * p + i];
                    let akj = a[k * p + j];
                    a[k * p + i] = c * aki - s * akj;
                    a[k * p + j] = s * aki + c * akj;
                }
                for k in 0..p {
                    let aik = a[i * p + k];
                    let ajk = a[j * p + k];
                    a[i * p + k] = c * aik - s * ajk;
                    a[j * p + k] = s * aik + c * ajk;
                }
            }
        }
    }
    (0..p).map(|i| a[i * p + i]).collect()
}
