//! Symmetric-matrix helpers: PSD projection, symmetric square roots, and
//! row-major (de)serialization for dense matrices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 0.5 * (M + M').
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Nearest (in Frobenius norm) positive semidefinite matrix: symmetrize and
/// clip negative eigenvalues at zero.
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    recompose(&eig.eigenvectors, &clipped)
}

/// Symmetric PSD square root via spectral decomposition; negative
/// eigenvalues are clipped at zero before taking the root.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    recompose(&eig.eigenvectors, &roots)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = symmetrize(m);
    sym.symmetric_eigen().eigenvalues.fold(f64::INFINITY, |a, b| a.min(b))
}

/// Solve H x = rhs for symmetric positive definite H.
pub fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::internal("scale matrix is singular despite floor"))?;
    Ok(chol.solve(rhs))
}

fn recompose(vectors: &DMatrix<f64>, values: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (c, v) in values.iter().enumerate() {
        scaled.column_mut(c).scale_mut(*v);
    }
    &scaled * vectors.transpose()
}

/// Row-major wire format for a dense matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatDoc {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatDoc { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::validation(format!(
                "matrix payload has {} entries, expected {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// serde adapter: a `DMatrix<f64>` field stored as a row-major `MatDoc`.
pub mod serde_mat {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatDoc::from_matrix(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let doc = MatDoc::deserialize(d)?;
        doc.to_matrix().map_err(serde::de::Error::custom)
    }
}

/// serde adapter for `Vec<DMatrix<f64>>` fields.
pub mod serde_mats {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        ms: &[DMatrix<f64>],
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let docs: Vec<MatDoc> = ms.iter().map(MatDoc::from_matrix).collect();
        docs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<DMatrix<f64>>, D::Error> {
        let docs = Vec::<MatDoc>::deserialize(d)?;
        docs.iter().map(|doc| doc.to_matrix().map_err(serde::de::Error::custom)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sqrt_of_diagonal_is_diagonal_of_roots() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let h = sqrt_psd(&m);
        assert_abs_diff_eq!(h[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h[(1, 1)], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sqrt_squares_back_to_input_for_psd() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.5]);
        let h = sqrt_psd(&a);
        let back = &h * &h;
        for r in 0..2 {
            for c in 0..2 {
                assert_abs_diff_eq!(back[(r, c)], a[(r, c)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn psd_projection_is_idempotent() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]); // eigenvalues 3, -1
        let p = psd_project(&a);
        assert!(min_eigenvalue(&p) >= -1e-12);
        let p2 = psd_project(&p);
        for r in 0..2 {
            for c in 0..2 {
                assert_abs_diff_eq!(p2[(r, c)], p[(r, c)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matdoc_round_trip_is_exact() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let doc = MatDoc::from_matrix(&m);
        assert_eq!(doc.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(doc.to_matrix().unwrap(), m);
    }
}
