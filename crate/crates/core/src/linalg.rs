//! Small dense linear-algebra helpers.

use nalgebra::DMatrix;

use crate::error::{SfError, SfResult};

/// Frobenius norm of a row-major square matrix.
fn frob(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Principal square root of a symmetric positive semidefinite matrix.
///
/// `m` is row-major d x d. Symmetry is enforced up to a relative tolerance;
/// eigenvalues that are slightly negative from rounding are clamped to
/// zero, while genuinely negative ones are an error. The result is checked
/// to square back to the input.
pub fn spd_sqrt(m: &[f64], d: usize, out: &mut [f64]) -> SfResult<()> {
    if m.len() != d * d || out.len() != d * d {
        return Err(SfError::Structural(
            "spd_sqrt needs d*d input and output buffers".into(),
        ));
    }
    if d == 0 {
        return Ok(());
    }
    let scale = frob(m).max(1e-300);
    for i in 0..d {
        for j in (i + 1)..d {
            let gap = (m[i * d + j] - m[j * d + i]).abs();
            if gap > 1e-10 * scale {
                return Err(SfError::Numerical(format!(
                    "matrix is not symmetric: |m[{i}][{j}] - m[{j}][{i}]| = {gap:.3e}"
                )));
            }
        }
    }
    // Symmetrize before the eigendecomposition so tiny asymmetries cannot
    // leak into complex arithmetic.
    let sym = DMatrix::from_fn(d, d, |i, j| 0.5 * (m[i * d + j] + m[j * d + i]));
    let eig = sym.symmetric_eigen();
    let tol = 1e-10 * scale;
    let mut roots = Vec::with_capacity(d);
    for &lam in eig.eigenvalues.iter() {
        if lam < -tol {
            return Err(SfError::Numerical(format!(
                "matrix has negative eigenvalue {lam:.6e}; not positive semidefinite"
            )));
        }
        roots.push(lam.max(0.0).sqrt());
    }
    // S = V diag(sqrt(lambda)) V^T
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += eig.eigenvectors[(i, k)] * roots[k] * eig.eigenvectors[(j, k)];
            }
            out[i * d + j] = s;
        }
    }
    // Residual check: S*S must reproduce m.
    let mut resid: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += out[i * d + k] * out[k * d + j];
            }
            let r = s - 0.5 * (m[i * d + j] + m[j * d + i]);
            resid += r * r;
        }
    }
    if resid.sqrt() > 1e-8 * (1.0 + scale) {
        return Err(SfError::Numerical(format!(
            "square-root residual {:.3e} exceeds tolerance",
            resid.sqrt()
        )));
    }
    Ok(())
}

/// y = M x for a row-major d x d matrix.
#[inline]
pub fn mat_vec(m: &[f64], x: &[f64], d: usize, y: &mut [f64]) {
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += m[i * d + j] * x[j];
        }
        y[i] = s;
    }
}

/// Euclidean norm.
#[inline]
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_of_diagonal_is_elementwise() {
        let m = [4.0, 0.0, 0.0, 9.0];
        let mut s = [0.0; 4];
        spd_sqrt(&m, 2, &mut s).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-12);
        assert!((s[3] - 3.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12 && s[2].abs() < 1e-12);
    }

    #[test]
    fn sqrt_squares_back_for_generic_spd() {
        // m = A A^T for A = [[1, 2], [0, 3]] is spd.
        let m = [5.0, 6.0, 6.0, 9.0];
        let mut s = [0.0; 4];
        spd_sqrt(&m, 2, &mut s).unwrap();
        let mut sq = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += s[i * 2 + k] * s[k * 2 + j];
                }
                sq[i * 2 + j] = acc;
            }
        }
        for (a, b) in sq.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Symmetry of the root itself.
        assert!((s[1] - s[2]).abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let asym = [1.0, 2.0, 0.0, 1.0];
        let mut out = [0.0; 4];
        assert!(spd_sqrt(&asym, 2, &mut out).is_err());

        let indef = [1.0, 0.0, 0.0, -1.0];
        assert!(spd_sqrt(&indef, 2, &mut out).is_err());
    }

    #[test]
    fn tolerates_tiny_negative_eigenvalue() {
        let eps = 1e-14;
        let m = [1.0, 0.0, 0.0, -eps];
        let mut out = [0.0; 4];
        spd_sqrt(&m, 2, &mut out).unwrap();
        assert!(out[3].abs() < 1e-6);
    }

    #[test]
    fn scalar_case() {
        let m = [2.0];
        let mut out = [0.0];
        spd_sqrt(&m, 1, &mut out).unwrap();
        assert!((out[0] - std::f64::consts::SQRT_2).abs() < 1e-14);
    }
}
