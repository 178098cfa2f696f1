//! Dynamic mode decomposition with control.
//!
//! The full-order fit `[A~ B~] = Y Omega^+` is kept in factored form since
//! `A~` is `n x n`. The reduced model projects it onto the leading `r` left
//! singular vectors of `Y`.

use crate::decomp::{thin_svd, ThinSvd};
use crate::error::{Error, Result};
use crate::matstore::{stack_omega, Method, NormSpec, RomModel};
use crate::Mat;

/// Least-squares operators `A~ = W Phi1^T`, `B~ = W Phi2^T` with
/// `W = Y V~ Sigma~^{-1}`.
#[derive(Debug, Clone)]
pub struct DmdcFull {
    /// `Y V~ Sigma~^{-1}`, n x d.
    pub y_v_sinv: Mat,
    /// State block of the left factor of `Omega`, n x d.
    pub phi1: Mat,
    /// Input block of the left factor of `Omega`, p x d.
    pub phi2: Mat,
}

impl DmdcFull {
    pub fn rank(&self) -> usize {
        self.phi1.ncols()
    }

    /// `A~ x` without forming `A~`.
    pub fn apply_a(&self, x: &Mat) -> Mat {
        &self.y_v_sinv * self.phi1.tr_mul(x)
    }

    pub fn b_tilde(&self) -> Mat {
        &self.y_v_sinv * self.phi2.transpose()
    }

    /// Dense `A~`; only sensible for small state dimensions.
    pub fn a_tilde(&self) -> Mat {
        &self.y_v_sinv * self.phi1.transpose()
    }

    /// `Y - A~ X - B~ U`.
    pub fn residual(&self, x: &Mat, y: &Mat, u: &Mat) -> Mat {
        y - self.apply_a(x) - self.b_tilde() * u
    }
}

#[derive(Debug, Clone)]
pub struct DmdcReduced {
    pub a_hat: Mat,
    pub b_hat: Mat,
    pub phi_r: Mat,
}

impl DmdcReduced {
    pub fn rank(&self) -> usize {
        self.phi_r.ncols()
    }
}

fn check_shapes(x: &Mat, y: &Mat, u: &Mat) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::DimensionMismatch(format!(
            "X is {}x{} but Y is {}x{}",
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    if u.ncols() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "U has {} columns, X has {}",
            u.ncols(),
            x.ncols()
        )));
    }
    if x.nrows() == 0 || u.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::DimensionMismatch("empty state, input or time axis".into()));
    }
    Ok(())
}

fn omega_factors(x: &Mat, y: &Mat, u: &Mat, rtol: Option<f64>) -> Result<(DmdcFull, ThinSvd)> {
    check_shapes(x, y, u)?;
    let omega = stack_omega(x, u)?;
    let svd = thin_svd(&omega, rtol)?;
    if svd.rank() == 0 {
        return Err(Error::Rank("Omega = [X; U] is zero".into()));
    }
    let n = x.nrows();
    let mut y_v_sinv = y * &svd.v;
    for (j, s) in svd.sigma.iter().enumerate() {
        y_v_sinv.column_mut(j).scale_mut(1.0 / *s);
    }
    let full = DmdcFull {
        y_v_sinv,
        phi1: svd.u.rows(0, n).into_owned(),
        phi2: svd.u.rows(n, u.nrows()).into_owned(),
    };
    Ok((full, svd))
}

/// Full-order DMDc fit from the shifted snapshots and inputs.
pub fn dmdc_full(x: &Mat, y: &Mat, u: &Mat, rtol: Option<f64>) -> Result<DmdcFull> {
    omega_factors(x, y, u, rtol).map(|(full, _)| full)
}

/// Rank-`r` DMDc model in the span of the leading left singular vectors of
/// `Y`.
pub fn dmdc_reduced(x: &Mat, y: &Mat, u: &Mat, r: usize, rtol: Option<f64>) -> Result<DmdcReduced> {
    let (full, _) = omega_factors(x, y, u, rtol)?;
    let ysvd = thin_svd(y, rtol)?;
    if r == 0 || r > ysvd.rank() {
        return Err(Error::Rank(format!(
            "requested r = {r} but rank Y = {}",
            ysvd.rank()
        )));
    }
    let ysvd = ysvd.truncate(r);
    // Sigma_r V_r^T (Y V~ Sigma~^{-1}) = Phi_r^T W since Phi_r^T Y = Sigma_r V_r^T
    let proj = ysvd.u.tr_mul(&full.y_v_sinv);
    let a_hat = &proj * full.phi1.tr_mul(&ysvd.u);
    let b_hat = &proj * full.phi2.transpose();
    Ok(DmdcReduced {
        a_hat,
        b_hat,
        phi_r: ysvd.u,
    })
}

pub fn dmdc_as_rom(d: &DmdcReduced, dt_sample: f64, norm_spec: Option<NormSpec>) -> Result<RomModel> {
    RomModel::new(
        d.phi_r.clone(),
        d.a_hat.clone(),
        d.b_hat.clone(),
        Method::Dmdc,
        dt_sample,
        norm_spec,
    )
}
