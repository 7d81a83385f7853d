//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition numbers above this are reported as singular.
pub const MAX_CONDITION: f64 = 1e12;

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

/// max|C - Cᵀ| must stay below 1e-12·(1 + max|C|).
pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            actual: m.ncols(),
            context: "square matrix",
        });
    }
    let n = m.nrows();
    let mut defect = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            defect = defect.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    let tolerance = 1e-12 * (1.0 + max_abs(m));
    if defect <= tolerance {
        Ok(())
    } else {
        Err(Error::NotSymmetric { defect, tolerance })
    }
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Symmetric and smallest eigenvalue ≥ −1e-10·(1 + trace).
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matrix entries"));
    }
    check_symmetric(m)?;
    let tolerance = 1e-10 * (1.0 + m.trace().abs());
    let min_eigenvalue = min_eigenvalue(m);
    if min_eigenvalue >= -tolerance {
        Ok(())
    } else {
        Err(Error::NotPositiveSemidefinite {
            min_eigenvalue,
            tolerance,
        })
    }
}

/// Symmetric square root; slightly negative eigenvalues (above −1e-10·trace)
/// are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let floor = -1e-10 * m.trace().abs().max(f64::MIN_POSITIVE);
    let mut roots = eig.eigenvalues.clone();
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        if *l < floor {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: *l,
                tolerance: -floor,
            });
        }
        roots[i] = l.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Inverse of a symmetric positive matrix through its eigendecomposition.
pub fn sym_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let lmin = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &l| a.min(l.abs()));
    let condition = if lmin > 0.0 {
        lmax / lmin
    } else {
        f64::INFINITY
    };
    if !(condition <= MAX_CONDITION) || lmax == 0.0 {
        return Err(Error::Singular { condition });
    }
    let inv = eig.eigenvalues.map(|l| 1.0 / l);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose())
}

/// Largest entry of |a − b|.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn max_abs_entry(m: &DMatrix<f64>) -> f64 {
    max_abs(m)
}
