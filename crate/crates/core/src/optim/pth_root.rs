use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest `|A_ij − A_ji|` tolerated, relative to `max(1, max|A_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// `(A + eps·I)^(−1/p)` for symmetric positive semidefinite `A`, via a
/// symmetric eigendecomposition. Diagonal inputs skip the decomposition and
/// are exact.
pub fn inverse_pth_root(a: &DMatrix<f64>, p: u32, eps: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::InvalidArgument(format!(
            "inverse_pth_root of non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if p == 0 {
        return Err(Error::InvalidArgument(
            "root order p must be positive".into(),
        ));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "damping must be non-negative, got {eps}"
        )));
    }
    let scale = a.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let mut asym = 0.0f64;
    let mut diagonal = true;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
            diagonal &= a[(i, j)] == 0.0 && a[(j, i)] == 0.0;
        }
    }
    if !asym.is_finite() || asym > SYMMETRY_TOL * scale {
        return Err(Error::Asymmetric(asym));
    }
    let exponent = -1.0 / p as f64;
    let root = |lambda: f64| -> Result<f64> {
        let shifted = lambda + eps;
        if !(shifted > 0.0) {
            return Err(Error::NegativeEigenvalue(lambda));
        }
        Ok(shifted.powf(exponent))
    };
    if diagonal {
        let mut x = DMatrix::zeros(n, n);
        for i in 0..n {
            x[(i, i)] = root(a[(i, i)])?;
        }
        return Ok(x);
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let r = root(lambda)?;
        scaled.column_mut(j).scale_mut(r);
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}
