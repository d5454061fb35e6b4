//! Block-arrow solves for the penalized Fisher matrix.
//!
//! With the flat ordering (border, b_1, …, b_n) the Fisher matrix is
//!
//! ```text
//! [ A    C_1 … C_n ]
//! [ C_1ᵀ D_1       ]
//! [ ⋮        ⋱     ]
//! [ C_nᵀ       D_n ]
//! ```
//!
//! where the border collects intercept, coefficients and baseline terms and
//! every D_i is the q×q random-effect block of one subject. Everything is
//! reduced through the Schur complement S = A − Σ C_i D_i⁻¹ C_iᵀ, so a solve
//! costs O(n·d² + d³) instead of O((d + qn)³).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Ridge added to the Schur complement when it is not positive definite.
pub const SCHUR_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct BlockArrow {
    c: Vec<DMatrix<f64>>,
    d_inv: Vec<DMatrix<f64>>,
    schur: Cholesky<f64, Dyn>,
    /// Set when the Schur complement needed a ridge to factor.
    pub regularized: bool,
}

impl BlockArrow {
    /// Factor from the border block `a`, couplings `c[i]` (d×q) and random
    /// blocks `d[i]` (q×q, must be positive definite).
    pub fn new(a: DMatrix<f64>, c: Vec<DMatrix<f64>>, d: Vec<DMatrix<f64>>) -> Result<Self> {
        let dim = a.nrows();
        let mut d_inv = Vec::with_capacity(d.len());
        for (i, di) in d.into_iter().enumerate() {
            let inv = if di.nrows() == 1 {
                let v = di[(0, 0)];
                if !(v > 0.0) {
                    return Err(Error::numerical(format!(
                        "random-effect block {i} is not positive definite"
                    )));
                }
                DMatrix::from_element(1, 1, 1.0 / v)
            } else {
                Cholesky::new(di)
                    .ok_or_else(|| {
                        Error::numerical(format!(
                            "random-effect block {i} is not positive definite"
                        ))
                    })?
                    .inverse()
            };
            d_inv.push(inv);
        }

        let mut schur = a;
        for (ci, di) in c.iter().zip(&d_inv) {
            if ci.ncols() == 1 {
                let w = di[(0, 0)];
                let col = ci.column(0);
                // rank-one downdate S -= w c cᵀ
                for k in 0..dim {
                    let ck = col[k] * w;
                    if ck != 0.0 {
                        for l in 0..dim {
                            schur[(l, k)] -= ck * col[l];
                        }
                    }
                }
            } else {
                schur -= ci * di * ci.transpose();
            }
        }
        schur = (&schur + schur.transpose()) * 0.5;

        let mut regularized = false;
        let chol = match Cholesky::new(schur.clone()) {
            Some(ch) => ch,
            None => {
                regularized = true;
                let mut ridge = SCHUR_RIDGE;
                loop {
                    let mut m = schur.clone();
                    for k in 0..dim {
                        m[(k, k)] += ridge;
                    }
                    if let Some(ch) = Cholesky::new(m) {
                        break ch;
                    }
                    ridge *= 100.0;
                    if ridge > 1e4 {
                        return Err(Error::numerical(
                            "Fisher matrix could not be factored even after ridge regularization",
                        ));
                    }
                }
            }
        };
        Ok(Self {
            c,
            d_inv,
            schur: chol,
            regularized,
        })
    }

    pub fn border_dim(&self) -> usize {
        self.schur.l_dirty().nrows()
    }

    pub fn n_blocks(&self) -> usize {
        self.d_inv.len()
    }

    /// Solve F x = r; `rhs_b` and the returned random part are subject-major.
    pub fn solve(&self, rhs_border: &DVector<f64>, rhs_b: &[f64]) -> (DVector<f64>, Vec<f64>) {
        let q = self.d_inv.first().map_or(0, |d| d.nrows());
        let mut r = rhs_border.clone();
        for (i, (ci, di)) in self.c.iter().zip(&self.d_inv).enumerate() {
            let rb = DVector::from_column_slice(&rhs_b[i * q..(i + 1) * q]);
            r -= ci * (di * rb);
        }
        let x_border = self.schur.solve(&r);
        let mut x_b = Vec::with_capacity(rhs_b.len());
        for (i, (ci, di)) in self.c.iter().zip(&self.d_inv).enumerate() {
            let rb = DVector::from_column_slice(&rhs_b[i * q..(i + 1) * q]);
            let xi = di * (rb - ci.transpose() * &x_border);
            x_b.extend(xi.iter());
        }
        (x_border, x_b)
    }

    /// Diagonal block i of F⁻¹:
    /// D_i⁻¹ + D_i⁻¹ C_iᵀ S⁻¹ C_i D_i⁻¹.
    pub fn random_block_inverse(&self, i: usize) -> DMatrix<f64> {
        let di = &self.d_inv[i];
        let g = &self.c[i] * di; // d×q
        let sg = self.schur.solve(&g);
        di + g.transpose() * sg
    }

    /// Border block of F⁻¹, i.e. S⁻¹.
    pub fn border_inverse(&self) -> DMatrix<f64> {
        self.schur.inverse()
    }
}
