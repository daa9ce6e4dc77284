//! Normal equations `A Δ = U` of the scoring algorithm.
//!
//! With fixed subject effects the information matrix is block arrowhead:
//! each subject intercept couples only with the trip-level coefficients.
//! The system is solved through the Schur complement on the β block, and
//! the full inverse (needed for variances) is formed blockwise.

use nalgebra::{DMatrix, DVector};

use super::NaReason;
use crate::linalg::spd_inverse;

pub(crate) enum NormalSystem {
    Dense {
        inv: DMatrix<f64>,
    },
    Arrow {
        /// `A_{ν_s ν_s}`
        diag: Vec<f64>,
        /// row `s` holds `A_{β ν_s}'`
        cross: DMatrix<f64>,
        /// `(A_ββ − Σ_s A_{βν_s} A_{ν_sβ} / A_{ν_sν_s})^{-1}`
        schur_inv: DMatrix<f64>,
    },
}

impl NormalSystem {
    pub(crate) fn dense(a: DMatrix<f64>) -> Result<Self, NaReason> {
        let inv = spd_inverse(&a).ok_or(NaReason::Singular)?;
        Ok(NormalSystem::Dense { inv })
    }

    pub(crate) fn arrow(diag: Vec<f64>, cross: DMatrix<f64>, m: DMatrix<f64>) -> Result<Self, NaReason> {
        if diag.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(NaReason::Singular);
        }
        let p = m.nrows();
        let mut schur = m;
        for (s, &d) in diag.iter().enumerate() {
            for i in 0..p {
                let ci = cross[(s, i)] / d;
                for j in 0..p {
                    schur[(i, j)] -= ci * cross[(s, j)];
                }
            }
        }
        let schur_inv = spd_inverse(&schur).ok_or(NaReason::Singular)?;
        Ok(NormalSystem::Arrow {
            diag,
            cross,
            schur_inv,
        })
    }

    pub(crate) fn dim(&self) -> usize {
        match self {
            NormalSystem::Dense { inv } => inv.nrows(),
            NormalSystem::Arrow { diag, schur_inv, .. } => diag.len() + schur_inv.nrows(),
        }
    }

    /// `A^{-1} g`.
    pub(crate) fn solve(&self, g: &DVector<f64>) -> DVector<f64> {
        match self {
            NormalSystem::Dense { inv } => inv * g,
            NormalSystem::Arrow {
                diag,
                cross,
                schur_inv,
            } => {
                let n = diag.len();
                let p = schur_inv.nrows();
                let mut t = DVector::from_iterator(p, g.iter().skip(n).copied());
                for s in 0..n {
                    let gs = g[s] / diag[s];
                    if gs != 0.0 {
                        for i in 0..p {
                            t[i] -= cross[(s, i)] * gs;
                        }
                    }
                }
                let xb = schur_inv * t;
                let mut out = DVector::zeros(n + p);
                for s in 0..n {
                    let mut v = g[s];
                    for i in 0..p {
                        v -= cross[(s, i)] * xb[i];
                    }
                    out[s] = v / diag[s];
                }
                for i in 0..p {
                    out[n + i] = xb[i];
                }
                out
            }
        }
    }

    /// Full `A^{-1}`.
    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        match self {
            NormalSystem::Dense { inv } => inv.clone(),
            NormalSystem::Arrow {
                diag,
                cross,
                schur_inv,
            } => {
                let n = diag.len();
                let p = schur_inv.nrows();
                // E = D^{-1} C, so A^{-1} = [[D^{-1} + E S E', -E S], [-S E', S]]
                let e = DMatrix::from_fn(n, p, |s, i| cross[(s, i)] / diag[s]);
                let es = &e * schur_inv;
                let mut out = DMatrix::zeros(n + p, n + p);
                let top = &es * e.transpose();
                for s in 0..n {
                    for r in 0..n {
                        out[(s, r)] = top[(s, r)];
                    }
                    out[(s, s)] += 1.0 / diag[s];
                    for i in 0..p {
                        out[(s, n + i)] = -es[(s, i)];
                        out[(n + i, s)] = -es[(s, i)];
                    }
                }
                for i in 0..p {
                    for j in 0..p {
                        out[(n + i, n + j)] = schur_inv[(i, j)];
                    }
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn arrow_case() -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let diag = vec![4.0, 6.0, 5.0];
        let cross = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 1.2, 0.7, 0.2]);
        let m = DMatrix::from_row_slice(2, 2, &[9.0, 1.0, 1.0, 7.0]);
        let mut full = DMatrix::zeros(5, 5);
        for s in 0..3 {
            full[(s, s)] = diag[s];
            for i in 0..2 {
                full[(s, 3 + i)] = cross[(s, i)];
                full[(3 + i, s)] = cross[(s, i)];
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                full[(3 + i, 3 + j)] = m[(i, j)];
            }
        }
        (diag, cross, m, full)
    }

    #[test]
    fn arrow_inverse_matches_dense() {
        let (diag, cross, m, full) = arrow_case();
        let sys = NormalSystem::arrow(diag, cross, m).unwrap();
        let dense = full.clone().try_inverse().unwrap();
        let inv = sys.inverse();
        for i in 0..5 {
            for j in 0..5 {
                assert_relative_eq!(inv[(i, j)], dense[(i, j)], epsilon = 1e-12);
            }
        }
        let g = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5, -0.25]);
        let x = sys.solve(&g);
        let y = &dense * &g;
        for i in 0..5 {
            assert_relative_eq!(x[i], y[i], epsilon = 1e-12);
        }
        assert_eq!(sys.dim(), 5);
    }

    #[test]
    fn singular_schur_block_is_na() {
        let diag = vec![1.0, 1.0];
        let cross = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let m = DMatrix::from_row_slice(1, 1, &[2.0]);
        assert_eq!(NormalSystem::arrow(diag, cross, m).err(), Some(NaReason::Singular));
    }

    #[test]
    fn empty_beta_block() {
        let sys = NormalSystem::arrow(vec![2.0, 4.0], DMatrix::zeros(2, 0), DMatrix::zeros(0, 0)).unwrap();
        let x = sys.solve(&DVector::from_vec(vec![1.0, 1.0]));
        assert_eq!(x.as_slice(), &[0.5, 0.25]);
    }
}
