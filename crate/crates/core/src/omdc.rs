//! Optimal mode decomposition with control.
//!
//! Fits `x_{k+1} ~ L M L^T x_k + L P u_k` with orthonormal `L` by minimizing
//! `|Y - L M L^T X - L P U|_F^2`. For fixed `L` the optimal `P` and `M` have
//! closed forms; with
//!
//! ```text
//! Q  = I - U^T (U U^T)^{-1} U,   X^ = X Q,   Y^ = Y Q
//! P* = L^T Y U^T (U U^T)^{-1} - M L^T X U^T (U U^T)^{-1}
//! M* = L^T Y^ X^^T L (L^T X^ X^^T L)^{-1}
//! ```
//!
//! the remaining problem in `L` is invariant under `L -> L R` and is solved on
//! the Grassmann manifold. The snapshot matrix is first factored as
//! `S = Qbar Rbar`, so the optimization runs on `m`-row data and its cost per
//! iteration does not depend on the state dimension.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::decomp::{svd_all, thin_qr, thin_svd};
use crate::error::{Error, Result};
use crate::grassmann::{cg_minimize, CgOptions, CgReport, Objective};
use crate::matstore::{split_snapshots, Method, RomModel, SnapshotSet};
use crate::Mat;

/// Largest accepted condition number of `U U^T` and of the projected Gram
/// `L^T X^ X^^T L`.
pub const MAX_CONDITION: f64 = 1e12;
/// Relative size of the ridge added to an ill-conditioned projected Gram
/// during iteration.
pub const RIDGE_FACTOR: f64 = 1e-12;

fn condition_number(sym: &Mat) -> f64 {
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Input-deflated data and the Gram products needed by the cost and its
/// gradient. Rows may be full state coordinates or QR-reduced coordinates.
#[derive(Debug, Clone)]
pub struct OmdcData {
    x: Mat,
    y: Mat,
    u: Mat,
    x_hat: Mat,
    y_hat: Mat,
    /// `U^T C^{-T}` with `U U^T = C C^T`, so that `I - Q = W W^T`.
    w: Mat,
    /// `Y U^T (U U^T)^{-1}` and `X U^T (U U^T)^{-1}`.
    y_ut_inv: Mat,
    x_ut_inv: Mat,
    /// `Y^ X^^T`.
    yx_hat: Mat,
    /// `X^ X^^T`.
    xx_hat: Mat,
    /// `Y U^T (U U^T)^{-1} U Y^T`.
    y_pi_y: Mat,
    y_norm_sq: f64,
}

/// `M*` and the intermediates shared by the cost and the gradient.
struct Elimination {
    m: Mat,
    ridged: bool,
}

impl OmdcData {
    pub fn new(x: &Mat, y: &Mat, u: &Mat) -> Result<Self> {
        if x.shape() != y.shape() || u.ncols() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "X {}x{}, Y {}x{}, U {}x{}",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols(),
                u.nrows(),
                u.ncols()
            )));
        }
        if u.nrows() == 0 || x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::DimensionMismatch("empty state, input or time axis".into()));
        }
        let uut = u * u.transpose();
        let condition = condition_number(&uut);
        if condition.is_nan() || condition > MAX_CONDITION {
            return Err(Error::InputRank { condition });
        }
        let chol = Cholesky::new(uut).ok_or(Error::InputRank {
            condition: f64::INFINITY,
        })?;
        // W = U^T C^{-T}  <=>  C W^T = U
        let w = chol
            .l()
            .solve_lower_triangular(u)
            .ok_or(Error::InputRank {
                condition: f64::INFINITY,
            })?
            .transpose();
        let ut_inv = chol.solve(u).transpose();

        let xw = x * &w;
        let yw = y * &w;
        let x_hat = x - &xw * w.transpose();
        let y_hat = y - &yw * w.transpose();
        let yx_hat = &y_hat * x_hat.transpose();
        let xx_hat = &x_hat * x_hat.transpose();
        let y_pi_y = &yw * yw.transpose();
        Ok(Self {
            x: x.clone(),
            y: y.clone(),
            u: u.clone(),
            y_ut_inv: y * &ut_inv,
            x_ut_inv: x * &ut_inv,
            x_hat,
            y_hat,
            w,
            yx_hat,
            xx_hat,
            y_pi_y,
            y_norm_sq: y.norm_squared(),
        })
    }

    /// Row dimension of the stored data.
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn y_norm_sq(&self) -> f64 {
        self.y_norm_sq
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn y(&self) -> &Mat {
        &self.y
    }

    pub fn u(&self) -> &Mat {
        &self.u
    }

    pub fn x_hat(&self) -> &Mat {
        &self.x_hat
    }

    pub fn y_hat(&self) -> &Mat {
        &self.y_hat
    }

    /// The `(m-1) x (m-1)` projector `Q = I - U^T (U U^T)^{-1} U`.
    pub fn projector(&self) -> Mat {
        let k = self.w.nrows();
        Mat::identity(k, k) - &self.w * self.w.transpose()
    }

    fn check_l(&self, l: &Mat) -> Result<()> {
        if l.nrows() != self.dim() || l.ncols() == 0 || l.ncols() > l.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "L is {}x{}, data has {} rows",
                l.nrows(),
                l.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Factorizes the projected Gram `B = L^T X^ X^^T L`. With `strict` an
    /// ill-conditioned `B` is an error; otherwise a small ridge is added.
    fn gram_factor(b: &Mat, strict: bool) -> Result<(Cholesky<f64, nalgebra::Dyn>, bool)> {
        let condition = condition_number(b);
        let mut ridged = false;
        let mut b = b.clone();
        if condition.is_nan() || condition > MAX_CONDITION {
            if strict {
                return Err(Error::ProjectedRank { condition });
            }
            let r = b.nrows();
            let lambda = RIDGE_FACTOR * b.trace().max(f64::MIN_POSITIVE) / r as f64;
            for i in 0..r {
                b[(i, i)] += lambda;
            }
            ridged = true;
        }
        let chol = Cholesky::new(b).ok_or(Error::ProjectedRank { condition })?;
        Ok((chol, ridged))
    }

    fn eliminate(&self, l: &Mat, strict: bool) -> Result<Elimination> {
        self.check_l(l)?;
        let lx = l.tr_mul(&self.x_hat);
        let ly = l.tr_mul(&self.y_hat);
        let a = &ly * lx.transpose();
        let b = &lx * lx.transpose();
        let (chol, ridged) = Self::gram_factor(&b, strict)?;
        // M B = A with B symmetric
        let m = chol.solve(&a.transpose()).transpose();
        Ok(Elimination { m, ridged })
    }

    /// `M*` for the given modes; fails if the projected Gram is singular.
    pub fn optimal_m(&self, l: &Mat) -> Result<Mat> {
        self.eliminate(l, true).map(|e| e.m)
    }

    /// `P*` for the given modes and system matrix.
    pub fn optimal_p(&self, l: &Mat, m: &Mat) -> Result<Mat> {
        self.check_l(l)?;
        if m.shape() != (l.ncols(), l.ncols()) {
            return Err(Error::DimensionMismatch("M must be r x r".into()));
        }
        Ok(l.tr_mul(&self.y_ut_inv) - m * l.tr_mul(&self.x_ut_inv))
    }

    /// `|(I - L L^T) Y|^2 + |L^T Y^ - M L^T X^|^2`, the two orthogonal parts
    /// of the residual after eliminating `P`.
    fn residual_cost(&self, l: &Mat, m: &Mat) -> f64 {
        let lty = l.tr_mul(&self.y);
        let off = (&self.y - l * lty).norm_squared();
        let lx = l.tr_mul(&self.x_hat);
        let ly = l.tr_mul(&self.y_hat);
        off + (ly - m * lx).norm_squared()
    }

    /// Cost `F(L)` with `M = M*(L)` and `P = P*(L, M*)`.
    pub fn cost(&self, l: &Mat) -> Result<f64> {
        let e = self.eliminate(l, true)?;
        Ok(self.residual_cost(l, &e.m))
    }

    /// Like [`OmdcData::cost`] but regularizes a near-singular projected Gram
    /// instead of failing. Returns whether the ridge was used.
    pub fn cost_guarded(&self, l: &Mat) -> Result<(f64, bool)> {
        let e = self.eliminate(l, false)?;
        Ok((self.residual_cost(l, &e.m), e.ridged))
    }

    /// Trace expansion
    /// `|Y|^2 - tr(L^T Y Pi Y^T L) - tr(A B^{-1} A^T)` with
    /// `A = L^T Y^ X^^T L`, `B = L^T X^ X^^T L`, evaluated from the Gram caches.
    pub fn cost_from_grams(&self, l: &Mat) -> Result<f64> {
        self.check_l(l)?;
        let a = l.tr_mul(&(&self.yx_hat * l));
        let b = l.tr_mul(&(&self.xx_hat * l));
        let (chol, _) = Self::gram_factor(&b, true)?;
        let b_inv_at = chol.solve(&a.transpose());
        let pi_term = l.tr_mul(&(&self.y_pi_y * l)).trace();
        Ok(self.y_norm_sq - pi_term - (a * b_inv_at).trace())
    }

    fn gradient_impl(&self, l: &Mat, strict: bool) -> Result<(Mat, bool)> {
        self.check_l(l)?;
        let dl = &self.yx_hat * l;
        let dtl = self.yx_hat.tr_mul(l);
        let el = &self.xx_hat * l;
        let pil = &self.y_pi_y * l;
        let a = l.tr_mul(&dl);
        let b = l.tr_mul(&el);
        let (chol, ridged) = Self::gram_factor(&b, strict)?;
        let r = l.ncols();
        let b_inv = chol.solve(&Mat::identity(r, r));
        let m = &a * &b_inv;
        let grad = pil * -2.0 - &dl * (&b_inv * a.transpose()) * 2.0 - &dtl * &m * 2.0
            + el * (m.transpose() * &m) * 2.0;
        Ok((grad, ridged))
    }

    /// Euclidean derivative `dF/dL` of the cost with `M*`, `P*` eliminated:
    ///
    /// ```text
    /// -2 Y Pi Y^T L - 2 D L B^{-1} A^T - 2 D^T L A B^{-1} + 2 E L B^{-1} A^T A B^{-1}
    /// ```
    ///
    /// with `D = Y^ X^^T`, `E = X^ X^^T`, `A = L^T D L`, `B = L^T E L` and
    /// `Pi = U^T (U U^T)^{-1} U`.
    pub fn gradient(&self, l: &Mat) -> Result<Mat> {
        self.gradient_impl(l, true).map(|(g, _)| g)
    }
}

/// Full residual `|Y - L M L^T X - L P U|_F^2` for arbitrary matrices.
pub fn model_cost(l: &Mat, m: &Mat, p: &Mat, x: &Mat, y: &Mat, u: &Mat) -> f64 {
    (y - l * (m * l.tr_mul(x)) - l * (p * u)).norm_squared()
}

/// Scaled objective handed to the manifold optimizer. Costs are divided by
/// `|Y|_F^2` so tolerances do not depend on the units of the data.
pub struct OmdcObjective<'a> {
    data: &'a OmdcData,
    scale: f64,
    ridge_events: AtomicUsize,
}

impl<'a> OmdcObjective<'a> {
    pub fn new(data: &'a OmdcData) -> Self {
        let y2 = data.y_norm_sq();
        Self {
            data,
            scale: if y2 > 0.0 { 1.0 / y2 } else { 1.0 },
            ridge_events: AtomicUsize::new(0),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn ridge_events(&self) -> usize {
        self.ridge_events.load(Ordering::Relaxed)
    }
}

impl Objective for OmdcObjective<'_> {
    fn cost(&self, l: &Mat) -> Result<f64> {
        let (c, ridged) = self.data.cost_guarded(l)?;
        if ridged {
            self.ridge_events.fetch_add(1, Ordering::Relaxed);
        }
        Ok(c * self.scale)
    }

    fn euclidean_gradient(&self, l: &Mat) -> Result<Mat> {
        let (g, ridged) = self.data.gradient_impl(l, false)?;
        if ridged {
            self.ridge_events.fetch_add(1, Ordering::Relaxed);
        }
        Ok(g * self.scale)
    }
}

/// OMDc data in QR coordinates: `S = Qbar Rbar`, `X = Qbar Xbar`,
/// `Y = Qbar Ybar`.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    pub qbar: Mat,
    pub rbar: Mat,
    pub data: OmdcData,
}

impl ReducedProblem {
    pub fn xbar(&self) -> &Mat {
        self.data.x()
    }

    pub fn ybar(&self) -> &Mat {
        self.data.y()
    }

    /// `L = Qbar Lbar`.
    pub fn lift_modes(&self, lbar: &Mat) -> Mat {
        &self.qbar * lbar
    }
}

pub fn reduce_problem(s: &Mat, u: &Mat) -> Result<ReducedProblem> {
    let (n, m) = s.shape();
    if m < 2 {
        return Err(Error::InsufficientSnapshots { columns: m });
    }
    if n < m {
        return Err(Error::DimensionMismatch(format!(
            "QR reduction needs n >= m, got n = {n}, m = {m}"
        )));
    }
    let qr = thin_qr(s)?;
    let (xbar, ybar) = split_snapshots(&qr.r)?;
    let data = OmdcData::new(&xbar, &ybar, u)?;
    Ok(ReducedProblem {
        qbar: qr.q,
        rbar: qr.r,
        data,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OmdcOptions {
    pub cg: CgOptions,
    /// Relative rank tolerance for the snapshot rank check.
    pub rtol: Option<f64>,
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolvePath {
    /// Optimization in the `m`-dimensional QR coordinates.
    Reduced,
    /// Optimization in full state coordinates (used when `n < m`).
    Full,
}

#[derive(Debug, Clone)]
pub struct OmdcFit {
    pub model: RomModel,
    pub report: CgReport,
    /// Unscaled final cost `|Y - L M L^T X - L P U|_F^2`.
    pub cost: f64,
    pub ridge_events: usize,
    pub path: SolvePath,
}

/// Problem data in whichever coordinates the optimization runs.
enum Workspace {
    Reduced(ReducedProblem),
    Full(OmdcData),
}

impl Workspace {
    fn build(s: &Mat, u: &Mat) -> Result<Self> {
        if s.nrows() >= s.ncols() {
            reduce_problem(s, u).map(Workspace::Reduced)
        } else {
            let (x, y) = split_snapshots(s)?;
            OmdcData::new(&x, &y, u).map(Workspace::Full)
        }
    }

    fn data(&self) -> &OmdcData {
        match self {
            Workspace::Reduced(p) => &p.data,
            Workspace::Full(d) => d,
        }
    }

    /// Matrix whose leading left singular vectors seed the optimization.
    fn seed_matrix<'a>(&'a self, s: &'a Mat) -> &'a Mat {
        match self {
            Workspace::Reduced(p) => &p.rbar,
            Workspace::Full(_) => s,
        }
    }

    fn lift(&self, l: &Mat) -> Mat {
        match self {
            Workspace::Reduced(p) => p.lift_modes(l),
            Workspace::Full(_) => l.clone(),
        }
    }

    fn path(&self) -> SolvePath {
        match self {
            Workspace::Reduced(_) => SolvePath::Reduced,
            Workspace::Full(_) => SolvePath::Full,
        }
    }
}

fn check_rank(s: &Mat, r: usize, rtol: Option<f64>) -> Result<()> {
    let rank = thin_svd(s, rtol)?.rank();
    if r == 0 || r >= rank {
        return Err(Error::Rank(format!(
            "OMDc needs 1 <= r < rank S, got r = {r}, rank S = {rank}"
        )));
    }
    Ok(())
}

/// Identifies a rank-`r` OMDc model, seeding the optimization with the
/// leading left singular vectors of the snapshot data.
pub fn omdc_identify(snap: &SnapshotSet, r: usize, opts: &OmdcOptions) -> Result<OmdcFit> {
    let ws = Workspace::build(snap.s(), snap.u())?;
    check_rank(ws.seed_matrix(snap.s()), r, opts.rtol)?;
    let seed = svd_all(ws.seed_matrix(snap.s()))?.u.columns(0, r).into_owned();
    run(snap, ws, seed, opts)
}

/// Like [`omdc_identify`] with an explicit starting point, given in the
/// coordinates the optimization runs in (QR coordinates when `n >= m`).
pub fn omdc_identify_from(snap: &SnapshotSet, l0: &Mat, opts: &OmdcOptions) -> Result<OmdcFit> {
    let ws = Workspace::build(snap.s(), snap.u())?;
    check_rank(ws.seed_matrix(snap.s()), l0.ncols(), opts.rtol)?;
    run(snap, ws, l0.clone(), opts)
}

fn run(snap: &SnapshotSet, ws: Workspace, l0: Mat, opts: &OmdcOptions) -> Result<OmdcFit> {
    let data = ws.data();
    let objective = OmdcObjective::new(data);
    let (l_opt, mut report) = cg_minimize(&objective, &l0, &opts.cg)?;
    let scale = objective.scale();
    for c in report.cost_history.iter_mut() {
        *c /= scale;
    }
    report.final_cost /= scale;
    report.final_grad_norm /= scale;
    for g in report.grad_norm_history.iter_mut() {
        *g /= scale;
    }

    // the final model is validated without regularization
    let m = data.optimal_m(&l_opt)?;
    let p = data.optimal_p(&l_opt, &m)?;
    let cost = data.residual_cost(&l_opt, &m);
    let l_full = ws.lift(&l_opt);
    let model = RomModel::new(
        l_full,
        m,
        p,
        Method::Omdc,
        snap.dt_sample(),
        snap.norm_spec().cloned(),
    )?;
    Ok(OmdcFit {
        model,
        report,
        cost,
        ridge_events: objective.ridge_events(),
        path: ws.path(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut s = seed;
        Mat::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn identical_input_rows_rejected() {
        let x = pseudo_random(3, 6, 1);
        let y = pseudo_random(3, 6, 2);
        let mut u = pseudo_random(2, 6, 3);
        let row = u.row(0).into_owned();
        u.row_mut(1).copy_from(&row);
        assert!(matches!(OmdcData::new(&x, &y, &u), Err(Error::InputRank { .. })));
    }

    #[test]
    fn orthonormal_inputs_projector() {
        let q = thin_qr(&pseudo_random(6, 2, 7)).unwrap().q;
        let u = q.transpose();
        let d = OmdcData::new(&pseudo_random(3, 6, 1), &pseudo_random(3, 6, 2), &u).unwrap();
        let want = Mat::identity(6, 6) - u.transpose() * &u;
        assert!((d.projector() - want).norm() < 1e-13);
    }

    #[test]
    fn zero_data_gives_zero_p() {
        let d = OmdcData::new(&Mat::zeros(3, 5), &Mat::zeros(3, 5), &pseudo_random(1, 5, 4)).unwrap();
        let l = thin_qr(&pseudo_random(3, 2, 5)).unwrap().q;
        let p = d.optimal_p(&l, &Mat::zeros(2, 2)).unwrap();
        assert_eq!(p, Mat::zeros(2, 1));
    }

    #[test]
    fn steady_data_gives_identity_m() {
        let x = pseudo_random(4, 8, 11);
        let u = pseudo_random(1, 8, 12);
        let d = OmdcData::new(&x, &x, &u).unwrap();
        let l = thin_qr(&pseudo_random(4, 2, 13)).unwrap().q;
        let m = d.optimal_m(&l).unwrap();
        assert!((m - Mat::identity(2, 2)).norm() < 1e-9);
    }

    #[test]
    fn scalar_m_is_regression() {
        let x = pseudo_random(1, 7, 21);
        let y = pseudo_random(1, 7, 22);
        let u = pseudo_random(1, 7, 23);
        let d = OmdcData::new(&x, &y, &u).unwrap();
        let m = d.optimal_m(&Mat::from_element(1, 1, 1.0)).unwrap();
        let want = d.y_hat().dot(d.x_hat()) / d.x_hat().norm_squared();
        assert!((m[(0, 0)] - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn orthogonal_subspace_explains_nothing() {
        // data lives in the first two coordinates
        let mut x = Mat::zeros(4, 6);
        let mut y = Mat::zeros(4, 6);
        x.rows_mut(0, 2).copy_from(&pseudo_random(2, 6, 31));
        y.rows_mut(0, 2).copy_from(&pseudo_random(2, 6, 32));
        let u = pseudo_random(1, 6, 33);
        let d = OmdcData::new(&x, &y, &u).unwrap();
        let l = Mat::from_fn(4, 2, |i, j| if i == j + 2 { 1.0 } else { 0.0 });
        // projected Gram is zero here, so use the guarded path
        let (c, ridged) = d.cost_guarded(&l).unwrap();
        assert!(ridged);
        assert!((c - y.norm_squared()).abs() < 1e-12 * y.norm_squared());
        assert!(matches!(d.cost(&l), Err(Error::ProjectedRank { .. })));
    }

    #[test]
    fn reduce_rejects_wide() {
        let err = reduce_problem(&pseudo_random(3, 5, 1), &pseudo_random(1, 4, 2));
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn reduced_orthonormal_snapshots() {
        let s = thin_qr(&pseudo_random(9, 5, 3)).unwrap().q;
        let p = reduce_problem(&s, &pseudo_random(1, 4, 4)).unwrap();
        assert!(p.rbar.upper_triangle() == p.rbar);
        for j in 0..5 {
            assert!((p.rbar[(j, j)].abs() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.ybar().column(0), p.rbar.column(1));
        assert_eq!(p.xbar().column(3), p.rbar.column(3));
    }
}
