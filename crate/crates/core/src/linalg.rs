//! Dense decompositions on `ndarray` matrices, backed by `nalgebra`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

pub(crate) fn to_na(a: &ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// `(a + aᵀ) / 2`.
pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub struct Spd {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    n: usize,
}

impl Spd {
    pub fn new(a: &ArrayView2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::shape(format!(
                "expected a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let chol = nalgebra::Cholesky::new(to_na(a))
            .ok_or_else(|| Error::Model("matrix is not positive definite".into()))?;
        Ok(Self { chol, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_vec(&self, b: &ArrayView1<f64>) -> Array1<f64> {
        let v = DVector::from_iterator(b.len(), b.iter().copied());
        let x = self.chol.solve(&v);
        Array1::from_iter(x.iter().copied())
    }

    pub fn solve_mat(&self, b: &ArrayView2<f64>) -> Array2<f64> {
        from_na(&self.chol.solve(&to_na(b)))
    }

    pub fn inverse(&self) -> Array2<f64> {
        symmetrize(&from_na(&self.chol.inverse()))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }

    /// Lower triangular factor `L` with `A = L Lᵀ`.
    pub fn lower(&self) -> Array2<f64> {
        from_na(&self.chol.l())
    }

    /// `L⁻¹ B L⁻ᵀ` for symmetric `B`.
    pub fn whiten(&self, b: &ArrayView2<f64>) -> Array2<f64> {
        let l = self.chol.l();
        let x = l
            .solve_lower_triangular(&to_na(b))
            .expect("cholesky factor has a positive diagonal");
        let y = l
            .solve_lower_triangular(&x.transpose())
            .expect("cholesky factor has a positive diagonal");
        symmetrize(&from_na(&y))
    }

    /// Solves `Lᵀ X = B`.
    pub fn solve_upper_t(&self, b: &ArrayView2<f64>) -> Array2<f64> {
        let l = self.chol.l();
        from_na(
            &l.tr_solve_lower_triangular(&to_na(b))
                .expect("cholesky factor has a positive diagonal"),
        )
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
/// Eigenvectors are the columns of the returned matrix.
pub fn sym_eig(a: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let eig = nalgebra::SymmetricEigen::new(to_na(a));
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Solves the general square system `a x = b`.
pub fn solve_general(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let lu = to_na(a).lu();
    let v = DVector::from_iterator(b.len(), b.iter().copied());
    lu.solve(&v)
        .map(|x| Array1::from_iter(x.iter().copied()))
        .ok_or_else(|| Error::Model("singular system".into()))
}

/// Euclidean norm of each row.
pub fn row_norms(a: &ArrayView2<f64>) -> Array1<f64> {
    a.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

/// Scales `v` to unit norm; the zero vector maps to itself.
pub fn length_norm(v: &ArrayView1<f64>) -> Array1<f64> {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        v.mapv(|x| x / n)
    } else {
        v.to_owned()
    }
}

/// Orthonormal basis of the column space of `a` (thin QR).
pub fn orthonormal_columns(a: &ArrayView2<f64>) -> Array2<f64> {
    let qr = to_na(a).qr();
    from_na(&qr.q())
}

/// Singular values of `a`, descending.
pub fn singular_values(a: &ArrayView2<f64>) -> Array1<f64> {
    let svd = to_na(a).svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Array1::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_and_inverts() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let spd = Spd::new(&a.view()).unwrap();
        let x = spd.solve_vec(&array![1.0, 2.0].view());
        let back = a.dot(&x);
        assert!((back[0] - 1.0).abs() < 1e-12 && (back[1] - 2.0).abs() < 1e-12);
        let inv = spd.inverse();
        let eye = a.dot(&inv);
        assert!((eye[[0, 0]] - 1.0).abs() < 1e-12 && eye[[0, 1]].abs() < 1e-12);
        assert!((spd.log_det() - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn not_positive_definite_is_rejected() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(Spd::new(&a.view()).is_err());
    }

    #[test]
    fn eigenvalues_sorted_descending() {
        let a = array![[1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 3.0]];
        let (vals, vecs) = sym_eig(&a.view());
        assert_eq!(vals.to_vec(), vec![5.0, 3.0, 1.0]);
        assert!((vecs[[1, 0]].abs() - 1.0).abs() < 1e-12);
    }
}
