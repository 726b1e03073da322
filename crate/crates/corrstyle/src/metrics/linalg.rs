//! Dense symmetric eigendecomposition (cyclic Jacobi) and the PSD matrix
//! square root built on it. Feature dimensions here are small (<= a few
//! hundred), so Jacobi is plenty.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Eigenvalues and eigenvectors of a symmetric matrix.
/// Columns of `vectors` are the eigenvectors, `values[i]` matches column `i`.
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Array2<f64>,
}

pub fn symmetric_eigen(matrix: &Array2<f64>) -> Result<SymmetricEigen> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::shape("symmetric_eigen", "square matrix", format!("{:?}", matrix.dim())));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (matrix[[i, j]] - matrix[[j, i]]).abs() > 1e-6 * (1.0 + matrix[[i, j]].abs()) {
                return Err(Error::Numerical("symmetric_eigen: matrix is not symmetric".into()));
            }
        }
    }
    let mut a = matrix.clone();
    // Symmetrize exactly so rotations stay stable.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
    let mut v = Array2::eye(n);

    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let values = (0..n).map(|i| a[[i, i]]).collect();
    Ok(SymmetricEigen { values, vectors: v })
}

pub fn symmetric_eigenvalues(matrix: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(matrix)?.values)
}

/// Square root of a symmetric PSD matrix. Negative eigenvalues within
/// `clip_tol` of zero are clipped; anything more negative is an error.
pub fn psd_sqrt(matrix: &Array2<f64>, clip_tol: f64) -> Result<Array2<f64>> {
    let eig = symmetric_eigen(matrix)?;
    let n = matrix.nrows();
    let scale = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut out = Array2::zeros((n, n));
    for (idx, &lambda) in eig.values.iter().enumerate() {
        if lambda < -clip_tol * scale {
            return Err(Error::Numerical(format!(
                "psd_sqrt: eigenvalue {lambda:.3e} is negative beyond tolerance"
            )));
        }
        let root = lambda.max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += root * eig.vectors[[i, idx]] * eig.vectors[[j, idx]];
            }
        }
    }
    Ok(out)
}
