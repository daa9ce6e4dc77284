//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

/// Replaces `m` by `(m + m')/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Relative pivot below which a Cholesky factorization is treated as
/// singular.
const PIVOT_TOL: f64 = 1e-13;

/// Cholesky factorization of the symmetrized `m`, rejecting numerically
/// singular matrices (a squared pivot tiny relative to the largest diagonal).
pub fn cholesky_checked(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let scale = s.diagonal().iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    let chol = s.cholesky()?;
    let l = chol.l_dirty();
    for i in 0..l.nrows() {
        let p = l[(i, i)] * l[(i, i)];
        if !(p.is_finite() && p > PIVOT_TOL * scale) {
            return None;
        }
    }
    Some(chol)
}

/// Inverse of a symmetric positive-definite matrix, `None` when the
/// Cholesky factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let chol = cholesky_checked(m)?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    if inv.iter().all(|v| v.is_finite()) {
        Some(inv)
    } else {
        None
    }
}

/// Ordinary least squares. Returns the coefficients and `(X'X)^{-1}`, or
/// `None` when `X` is rank deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let xtx = x.transpose() * x;
    let inv = spd_inverse(&xtx)?;
    let coef = &inv * (x.transpose() * y);
    Some((coef, inv))
}

/// Serde adapter writing a matrix as a list of rows.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use nalgebra::DMatrix;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
            m.as_ref().map(super::to_rows).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
            let rows = Option::<Vec<Vec<f64>>>::deserialize(d)?;
            rows.map(|r| super::from_rows(&r).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}
