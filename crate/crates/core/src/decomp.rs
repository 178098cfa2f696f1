//! Thin SVD, thin QR and minimum-norm least squares.
//!
//! Factors follow a fixed sign convention: the entry of largest magnitude in
//! every column of `U` (SVD) or `Q` (QR) is nonnegative, so repeated runs give
//! bit-identical factors.

use nalgebra::linalg::QR;

use crate::error::{Error, Result};
use crate::matstore::ensure_finite;
use crate::{Mat, Vector};

/// Thin SVD `A ~ U diag(sigma) V^T` keeping the leading `rank` triplets.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Mat,
    pub sigma: Vector,
    pub v: Mat,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Keeps the `r` leading singular triplets.
    pub fn truncate(&self, r: usize) -> ThinSvd {
        let r = r.min(self.rank());
        ThinSvd {
            u: self.u.columns(0, r).into_owned(),
            sigma: self.sigma.rows(0, r).into_owned(),
            v: self.v.columns(0, r).into_owned(),
        }
    }

    pub fn reconstruct(&self) -> Mat {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }

    /// `V diag(sigma)^{-1} U^T`.
    pub fn pseudo_inverse(&self) -> Mat {
        let mut vs = self.v.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            vs.column_mut(j).scale_mut(1.0 / *s);
        }
        vs * self.u.transpose()
    }
}

#[derive(Debug, Clone)]
pub struct ThinQr {
    pub q: Mat,
    pub r: Mat,
}

/// Default relative rank tolerance `max(a, b) * eps`.
pub fn default_rtol(rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON
}

/// Full thin SVD with all `min(a, b)` triplets, sorted by decreasing
/// singular value. Tall inputs are reduced by a QR factorization first.
pub fn svd_all(a: &Mat) -> Result<ThinSvd> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::DimensionMismatch("SVD of an empty matrix".into()));
    }
    ensure_finite(a, "SVD input")?;

    let (mut u, sigma, mut v) = if rows > 2 * cols {
        let qr = QR::new(a.clone());
        let q = qr.q();
        let (ur, s, vr) = small_svd(qr.r())?;
        (q * ur, s, vr)
    } else {
        small_svd(a.clone())?
    };

    // sort descending
    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let sigma = Vector::from_iterator(k, order.iter().map(|&i| sigma[i]));
    u = Mat::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    v = Mat::from_columns(&order.iter().map(|&i| v.column(i)).collect::<Vec<_>>());

    for j in 0..k {
        if needs_flip(u.column(j).iter()) {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
    Ok(ThinSvd { u, sigma, v })
}

fn small_svd(a: Mat) -> Result<(Mat, Vector, Mat)> {
    let (rows, cols) = a.shape();
    let fa = faer::Mat::<f64>::from_fn(rows, cols, |i, j| a[(i, j)]);
    let svd = fa
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let k = rows.min(cols);
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    let u = Mat::from_fn(rows, k, |i, j| fu[(i, j)]);
    let v = Mat::from_fn(cols, k, |i, j| fv[(i, j)]);
    let sigma = Vector::from_fn(k, |i, _| fs[i]);
    Ok((u, sigma, v))
}

fn needs_flip<'a>(col: impl Iterator<Item = &'a f64>) -> bool {
    let mut best = 0.0f64;
    let mut sign_neg = false;
    for &x in col {
        if x.abs() > best {
            best = x.abs();
            sign_neg = x < 0.0;
        }
    }
    sign_neg
}

/// Thin SVD truncated to the numerical rank: singular values
/// `sigma_i > rtol * sigma_1` are kept. `None` selects [`default_rtol`].
pub fn thin_svd(a: &Mat, rtol: Option<f64>) -> Result<ThinSvd> {
    let rtol = rtol.unwrap_or_else(|| default_rtol(a.nrows(), a.ncols()));
    if rtol.is_nan() || rtol < 0.0 {
        return Err(Error::Config(format!("rank tolerance must be >= 0, got {rtol}")));
    }
    let full = svd_all(a)?;
    let s1 = full.sigma.get(0).copied().unwrap_or(0.0);
    let d = full.sigma.iter().take_while(|&&s| s > rtol * s1 && s > 0.0).count();
    Ok(full.truncate(d))
}

/// Thin Householder QR of a tall or square matrix.
pub fn thin_qr(a: &Mat) -> Result<ThinQr> {
    let (rows, cols) = a.shape();
    if rows < cols {
        return Err(Error::DimensionMismatch(format!(
            "thin QR needs rows >= cols, got {rows}x{cols}"
        )));
    }
    if cols == 0 {
        return Err(Error::DimensionMismatch("QR of an empty matrix".into()));
    }
    ensure_finite(a, "QR input")?;
    let qr = QR::new(a.clone());
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..cols {
        if needs_flip(q.column(j).iter()) {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    Ok(ThinQr { q, r })
}

/// Minimum-norm least-squares solution `G = Y Omega^+` of
/// `min ||Y - G Omega||_F`.
pub fn solve_ls(y: &Mat, omega: &Mat, rtol: Option<f64>) -> Result<Mat> {
    if y.ncols() != omega.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "Y has {} columns, Omega has {}",
            y.ncols(),
            omega.ncols()
        )));
    }
    if omega.iter().all(|v| *v == 0.0) {
        return Ok(Mat::zeros(y.nrows(), omega.nrows()));
    }
    let svd = thin_svd(omega, rtol)?;
    // (Y V) Sigma^{-1} U^T keeps the intermediate at rank size
    let mut yv = y * &svd.v;
    for (j, s) in svd.sigma.iter().enumerate() {
        yv.column_mut(j).scale_mut(1.0 / *s);
    }
    Ok(yv * svd.u.transpose())
}
