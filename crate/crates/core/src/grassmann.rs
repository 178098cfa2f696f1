//! Optimization over `r`-dimensional subspaces of `R^n`.
//!
//! A point on the Grassmann manifold is represented by an `n x r` matrix `L`
//! with orthonormal columns; any `L R` with orthogonal `R` represents the same
//! point. Tangent vectors are horizontal matrices `H` with `L^T H = 0`.
//! Geodesics and parallel transport are expressed through the thin SVD
//! `H = U S V^T`:
//!
//! ```text
//! L(t)  = L V cos(tS) V^T + U sin(tS) V^T
//! tau H = (-L V sin(tS) + U cos(tS)) S V^T
//! tau G = G - (L V sin(tS) + U (I - cos(tS))) U^T G
//! ```
//!
//! [`cg_minimize`] runs nonlinear conjugate gradient with the Polak-Ribiere
//! factor and an Armijo backtracking search along the geodesic.

use serde::{Deserialize, Serialize};

use crate::decomp::{svd_all, thin_qr};
use crate::error::{Error, Result};
use crate::{Mat, Vector};

/// Relative tolerance on `|L^T H|_F / |H|_F` for a direction to count as
/// horizontal.
pub const HORIZONTAL_TOL: f64 = 1e-8;

/// Cost function on the Grassmann manifold together with its Euclidean
/// derivative with respect to the representative `L`.
pub trait Objective {
    fn cost(&self, l: &Mat) -> Result<f64>;
    fn euclidean_gradient(&self, l: &Mat) -> Result<Mat>;
}

/// Adapts a pair of closures to [`Objective`].
pub struct FnObjective<C, G> {
    pub cost: C,
    pub gradient: G,
}

impl<C, G> Objective for FnObjective<C, G>
where
    C: Fn(&Mat) -> Result<f64>,
    G: Fn(&Mat) -> Result<Mat>,
{
    fn cost(&self, l: &Mat) -> Result<f64> {
        (self.cost)(l)
    }

    fn euclidean_gradient(&self, l: &Mat) -> Result<Mat> {
        (self.gradient)(l)
    }
}

/// Horizontal direction at a base point with its cached thin SVD.
#[derive(Debug, Clone)]
pub struct TangentDirection {
    h: Mat,
    u: Mat,
    sigma: Vector,
    v: Mat,
}

impl TangentDirection {
    pub fn new(base: &Mat, h: Mat) -> Result<Self> {
        if base.shape() != h.shape() {
            return Err(Error::DimensionMismatch(format!(
                "direction is {}x{}, base point is {}x{}",
                h.nrows(),
                h.ncols(),
                base.nrows(),
                base.ncols()
            )));
        }
        let hn = h.norm();
        if hn > 0.0 {
            let ratio = base.tr_mul(&h).norm() / hn;
            if ratio > HORIZONTAL_TOL {
                return Err(Error::Tangency { ratio });
            }
        }
        let svd = svd_all(&h)?;
        Ok(Self {
            h,
            u: svd.u,
            sigma: svd.sigma,
            v: svd.v,
        })
    }

    pub fn matrix(&self) -> &Mat {
        &self.h
    }

    pub fn singular_values(&self) -> &Vector {
        &self.sigma
    }

    pub fn norm(&self) -> f64 {
        self.h.norm()
    }

    fn scaled_columns(m: &Mat, d: impl Fn(usize) -> f64) -> Mat {
        let mut out = m.clone();
        for j in 0..out.ncols() {
            out.column_mut(j).scale_mut(d(j));
        }
        out
    }
}

/// Point `L(t)` on the geodesic leaving `l` in direction `dir`.
pub fn geodesic(l: &Mat, dir: &TangentDirection, t: f64) -> Mat {
    let s = &dir.sigma;
    let lv = l * &dir.v;
    let a = TangentDirection::scaled_columns(&lv, |j| (t * s[j]).cos());
    let b = TangentDirection::scaled_columns(&dir.u, |j| (t * s[j]).sin());
    (a + b) * dir.v.transpose()
}

/// Projects a Euclidean derivative onto the horizontal space at `l`.
pub fn manifold_gradient(l: &Mat, dfdl: &Mat) -> Mat {
    // Near a critical point dF/dL is almost vertical and one pass leaves a
    // vertical remainder of order eps |dF/dL|; the second pass removes it.
    let once = dfdl - l * l.tr_mul(dfdl);
    &once - l * l.tr_mul(&once)
}

/// Parallel transport of the direction itself and of `g_prev` along the
/// geodesic to `geodesic(l_prev, dir, t)`.
pub fn transport(l_prev: &Mat, dir: &TangentDirection, g_prev: &Mat, t: f64) -> (Mat, Mat) {
    let s = &dir.sigma;
    let lv = l_prev * &dir.v;
    let tau_h = {
        let a = TangentDirection::scaled_columns(&lv, |j| -(t * s[j]).sin() * s[j]);
        let b = TangentDirection::scaled_columns(&dir.u, |j| (t * s[j]).cos() * s[j]);
        (a + b) * dir.v.transpose()
    };
    let tau_g = {
        let a = TangentDirection::scaled_columns(&lv, |j| (t * s[j]).sin());
        let b = TangentDirection::scaled_columns(&dir.u, |j| 1.0 - (t * s[j]).cos());
        g_prev - (a + b) * dir.u.tr_mul(g_prev)
    };
    (tau_h, tau_g)
}

/// Polak-Ribiere conjugacy factor, normalized by the current gradient.
pub fn pr_gamma(g: &Mat, tau_g_prev: &Mat) -> f64 {
    let denom = g.dot(g);
    if denom < 1e-300 {
        return 0.0;
    }
    (g - tau_g_prev).dot(g) / denom
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineSearchOptions {
    /// First trial step; `None` uses `1 / |H|_F`.
    pub initial_step: Option<f64>,
    pub contraction: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
    /// Number of step doublings tried when the first trial is accepted.
    pub max_expansions: usize,
}

impl Default for LineSearchOptions {
    fn default() -> Self {
        Self {
            initial_step: None,
            contraction: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 40,
            max_expansions: 8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LineSearchResult {
    pub step: f64,
    pub cost: f64,
    pub evaluations: usize,
}

/// Armijo backtracking along the geodesic from `l` in direction `dir`.
///
/// `slope` is the directional derivative `tr(G^T H)` and must be negative.
/// An accepted first trial is followed by doubling while the cost keeps
/// falling and the Armijo condition holds; the result is then refined by
/// one quadratic interpolation step when that lowers the cost further.
pub fn line_search<O: Objective + ?Sized>(
    obj: &O,
    l: &Mat,
    dir: &TangentDirection,
    f0: f64,
    slope: f64,
    opts: &LineSearchOptions,
) -> Result<LineSearchResult> {
    if slope.is_nan() || slope >= 0.0 {
        return Err(Error::NotDescent { slope });
    }
    let c1 = opts.sufficient_decrease;
    let armijo = |t: f64, f: f64| f <= f0 + c1 * t * slope;
    let mut evals = 0;
    let mut eval = |t: f64| -> Option<f64> {
        evals += 1;
        obj.cost(&geodesic(l, dir, t)).ok().filter(|f| f.is_finite())
    };

    let mut t = opts.initial_step.unwrap_or(1.0 / dir.norm());
    let mut accepted = None;
    for b in 0..=opts.max_backtracks {
        if let Some(f) = eval(t) {
            if armijo(t, f) && f < f0 {
                accepted = Some((t, f, b));
                break;
            }
        }
        t *= opts.contraction;
    }
    let (mut t, mut f, backtracks) = accepted.ok_or(Error::LineSearch {
        backtracks: opts.max_backtracks,
    })?;

    if backtracks == 0 {
        for _ in 0..opts.max_expansions {
            let t2 = t / opts.contraction;
            match eval(t2) {
                Some(f2) if f2 < f && armijo(t2, f2) => {
                    t = t2;
                    f = f2;
                }
                _ => break,
            }
        }
    }

    // minimizer of the parabola through (0, f0) with slope `slope` and (t, f)
    let curv = f - f0 - slope * t;
    if curv > 0.0 {
        let tq = -slope * t * t / (2.0 * curv);
        if tq > 0.0 && (tq - t).abs() > 1e-3 * t && tq < 4.0 * t {
            if let Some(fq) = eval(tq) {
                if fq < f && armijo(tq, fq) {
                    t = tq;
                    f = fq;
                }
            }
        }
    }
    Ok(LineSearchResult {
        step: t,
        cost: f,
        evaluations: evals,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CgOptions {
    pub max_iters: usize,
    /// Stop when `|G|_F` falls to this value.
    pub grad_tol: f64,
    /// Stop when the relative cost decrease over `stall_window` iterations
    /// falls to this value.
    pub rel_cost_tol: f64,
    pub stall_window: usize,
    /// Iterations between forced restarts; `None` uses the manifold
    /// dimension `r (n - r)`.
    pub restart_period: Option<usize>,
    /// Iterations between re-orthonormalizations of `L`.
    pub reorth_period: usize,
    pub line_search: LineSearchOptions,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            grad_tol: 1e-10,
            rel_cost_tol: 1e-10,
            stall_window: 5,
            restart_period: None,
            reorth_period: 50,
            line_search: LineSearchOptions::default(),
        }
    }
}

impl CgOptions {
    fn validate(&self) -> Result<()> {
        let ls = &self.line_search;
        let ok = self.max_iters > 0
            && self.grad_tol >= 0.0
            && self.rel_cost_tol >= 0.0
            && self.stall_window > 0
            && self.restart_period.is_none_or(|p| p > 0)
            && self.reorth_period > 0
            && ls.initial_step.is_none_or(|t| t > 0.0)
            && ls.contraction > 0.0
            && ls.contraction < 1.0
            && ls.sufficient_decrease > 0.0
            && ls.sufficient_decrease < 1.0
            && ls.max_backtracks > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid CG options: tolerances must be >= 0, counts and steps > 0".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    CostStagnation,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    pub final_cost: f64,
    pub final_grad_norm: f64,
    pub cost_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub termination: Termination,
    pub restarts: usize,
    pub steepest_descent_fallbacks: usize,
    pub cost_evaluations: usize,
}

impl CgReport {
    pub fn converged(&self) -> bool {
        self.termination != Termination::MaxIterations
    }
}

fn check_orthonormal(l: &Mat) -> Result<()> {
    let r = l.ncols();
    if r == 0 || r > l.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "base point is {}x{}; need 1 <= r <= n",
            l.nrows(),
            r
        )));
    }
    let drift = (l.tr_mul(l) - Mat::identity(r, r)).norm();
    if drift > 1e-8 {
        return Err(Error::Numerical(format!(
            "initial point is not orthonormal: |L^T L - I| = {drift:.3e}"
        )));
    }
    Ok(())
}

fn horizontal(l: &Mat, h: Mat) -> Mat {
    manifold_gradient(l, &h)
}

/// Conjugate gradient on the Grassmann manifold starting from `l0`.
///
/// Each iteration searches along the geodesic in the current direction,
/// transports the previous gradient and direction to the new point and
/// combines them with the new gradient through [`pr_gamma`]. The direction is
/// reset to steepest descent every `restart_period` iterations and whenever
/// it is not a descent direction. If the line search fails along a conjugate
/// direction it is retried along the negative gradient; failing that, the
/// run ends with [`Error::Stalled`].
pub fn cg_minimize<O: Objective + ?Sized>(obj: &O, l0: &Mat, opts: &CgOptions) -> Result<(Mat, CgReport)> {
    opts.validate()?;
    check_orthonormal(l0)?;
    let (n, r) = l0.shape();
    let restart_period = opts.restart_period.unwrap_or((r * (n - r)).max(1));

    let mut l = l0.clone();
    let mut f = obj.cost(&l)?;
    let mut g = manifold_gradient(&l, &obj.euclidean_gradient(&l)?);
    let mut h = -&g;
    let mut step: Option<f64> = opts.line_search.initial_step;
    let mut since_restart = 0;

    let mut report = CgReport {
        iterations: 0,
        final_cost: f,
        final_grad_norm: g.norm(),
        cost_history: vec![f],
        grad_norm_history: vec![g.norm()],
        termination: Termination::MaxIterations,
        restarts: 0,
        steepest_descent_fallbacks: 0,
        cost_evaluations: 1,
    };

    loop {
        let gnorm = g.norm();
        if gnorm <= opts.grad_tol {
            report.termination = Termination::GradientTolerance;
            break;
        }
        if report.iterations >= opts.max_iters {
            report.termination = Termination::MaxIterations;
            break;
        }

        let mut slope = g.dot(&h);
        if slope >= 0.0 || since_restart >= restart_period {
            h = -&g;
            slope = -gnorm * gnorm;
            since_restart = 0;
            report.restarts += 1;
        }
        let steepest = since_restart == 0;

        let mut dir = TangentDirection::new(&l, h.clone())?;
        let mut ls_opts = opts.line_search.clone();
        ls_opts.initial_step = step;
        let ls = match line_search(obj, &l, &dir, f, slope, &ls_opts) {
            Ok(ls) => ls,
            Err(Error::LineSearch { .. }) if !steepest => {
                report.steepest_descent_fallbacks += 1;
                h = -&g;
                slope = -gnorm * gnorm;
                since_restart = 0;
                dir = TangentDirection::new(&l, h.clone())?;
                ls_opts.initial_step = None;
                match line_search(obj, &l, &dir, f, slope, &ls_opts) {
                    Ok(ls) => ls,
                    Err(Error::LineSearch { .. }) => {
                        report.final_cost = f;
                        report.final_grad_norm = gnorm;
                        return Err(Error::Stalled {
                            report: Box::new(report),
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::LineSearch { .. }) => {
                report.final_cost = f;
                report.final_grad_norm = gnorm;
                return Err(Error::Stalled {
                    report: Box::new(report),
                });
            }
            Err(e) => return Err(e),
        };
        report.cost_evaluations += ls.evaluations;

        let t = ls.step;
        let mut l_next = geodesic(&l, &dir, t);
        let mut f_next = ls.cost;
        if (report.iterations + 1).is_multiple_of(opts.reorth_period) {
            l_next = thin_qr(&l_next)?.q;
            f_next = obj.cost(&l_next)?.min(ls.cost);
            report.cost_evaluations += 1;
        }
        let g_next = manifold_gradient(&l_next, &obj.euclidean_gradient(&l_next)?);
        let (tau_h, tau_g) = transport(&l, &dir, &g, t);
        let gamma = pr_gamma(&g_next, &tau_g);
        h = horizontal(&l_next, -&g_next + tau_h * gamma);

        l = l_next;
        f = f_next;
        g = g_next;
        step = Some(t);
        since_restart += 1;
        report.iterations += 1;
        report.cost_history.push(f);
        report.grad_norm_history.push(g.norm());

        let k = report.cost_history.len();
        if k > opts.stall_window {
            let prev = report.cost_history[k - 1 - opts.stall_window];
            let rel = (prev - f) / f.abs().max(f64::MIN_POSITIVE);
            if rel <= opts.rel_cost_tol {
                report.termination = Termination::CostStagnation;
                break;
            }
        }
    }

    report.final_cost = f;
    report.final_grad_norm = g.norm();
    Ok((l, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(n: usize, i: usize) -> Mat {
        let mut m = Mat::zeros(n, 1);
        m[(i, 0)] = 1.0;
        m
    }

    #[test]
    fn geodesic_at_zero_and_stationary() {
        let l = thin_qr(&Mat::from_fn(5, 2, |i, j| ((i + 1) * (j + 2)) as f64 + (i * i) as f64)).unwrap().q;
        let h = manifold_gradient(&l, &Mat::from_fn(5, 2, |i, j| (i as f64 - j as f64).sin()));
        let dir = TangentDirection::new(&l, h).unwrap();
        assert!((geodesic(&l, &dir, 0.0) - &l).norm() <= 1e-12);

        let zero = TangentDirection::new(&l, Mat::zeros(5, 2)).unwrap();
        for t in [0.3, 1.0, 7.0] {
            assert!((geodesic(&l, &zero, t) - &l).norm() <= 1e-12);
        }
    }

    #[test]
    fn great_circle() {
        let theta = 0.7;
        let l = e(4, 0);
        let dir = TangentDirection::new(&l, e(4, 1) * theta).unwrap();
        let got = geodesic(&l, &dir, 1.0);
        let want = e(4, 0) * theta.cos() + e(4, 1) * theta.sin();
        assert!((got - want).norm() < 1e-14);
    }

    #[test]
    fn non_horizontal_direction_rejected() {
        let l = e(3, 0);
        let h = e(3, 0) + e(3, 1);
        assert!(matches!(TangentDirection::new(&l, h), Err(Error::Tangency { .. })));
    }

    #[test]
    fn gradient_projection_cases() {
        let l = thin_qr(&Mat::from_fn(6, 2, |i, j| (i * 3 + j * 5 % 7) as f64 + 0.5 * j as f64)).unwrap().q;
        let vertical = &l * Mat::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        assert!(manifold_gradient(&l, &vertical).norm() < 1e-14);
        let hz = manifold_gradient(&l, &Mat::from_fn(6, 2, |i, j| (i + 2 * j) as f64));
        assert!((manifold_gradient(&l, &hz) - &hz).norm() < 1e-13);
    }

    #[test]
    fn zero_step_transport_is_identity() {
        let l = e(3, 0);
        let h = e(3, 1) * 0.4 + e(3, 2) * -0.2;
        let g = e(3, 2) * 1.5;
        let dir = TangentDirection::new(&l, h.clone()).unwrap();
        let (th, tg) = transport(&l, &dir, &g, 0.0);
        assert!((th - h).norm() < 1e-15);
        assert!((tg - &g).norm() < 1e-15);

        let zero = TangentDirection::new(&l, Mat::zeros(3, 1)).unwrap();
        let (th, tg) = transport(&l, &zero, &g, 0.9);
        assert!(th.norm() == 0.0);
        assert!((tg - g).norm() < 1e-15);
    }

    #[test]
    fn great_circle_transport_matches_rotation() {
        // on the unit sphere, transport along the e1-e2 circle rotates the
        // plane by the travelled angle and leaves e3 fixed
        let theta = 0.9;
        let l = e(3, 0);
        let h = e(3, 1) * 0.5;
        let g = e(3, 1) * 0.3 + e(3, 2) * 0.8;
        let dir = TangentDirection::new(&l, h.clone()).unwrap();
        let t = theta / 0.5;
        let (th, tg) = transport(&l, &dir, &g, t);
        let (c, s) = (theta.cos(), theta.sin());
        let rot = Mat::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        assert!((th - &rot * &h).norm() < 1e-10);
        assert!((tg - &rot * &g).norm() < 1e-10);
    }

    #[test]
    fn gamma_edge_cases() {
        let g = Mat::from_row_slice(2, 1, &[1.0, -2.0]);
        assert_eq!(pr_gamma(&g, &g), 0.0);
        assert!((pr_gamma(&g, &Mat::zeros(2, 1)) - 1.0).abs() < 1e-15);
        assert_eq!(pr_gamma(&Mat::zeros(2, 1), &g), 0.0);
    }

    #[test]
    fn line_search_requires_descent() {
        let obj = FnObjective {
            cost: |l: &Mat| Ok(l[(0, 0)]),
            gradient: |l: &Mat| Ok(Mat::zeros(l.nrows(), l.ncols())),
        };
        let l = e(2, 0);
        let dir = TangentDirection::new(&l, Mat::zeros(2, 1)).unwrap();
        let err = line_search(&obj, &l, &dir, 1.0, 0.0, &LineSearchOptions::default());
        assert!(matches!(err, Err(Error::NotDescent { .. })));
    }

    #[test]
    fn minimizer_start_terminates_immediately() {
        let d = Mat::from_diagonal(&Vector::from_vec(vec![5.0, 3.0, 1.0, 0.5]));
        let obj = FnObjective {
            cost: |l: &Mat| Ok(-(l.transpose() * &d * l).trace()),
            gradient: |l: &Mat| Ok(&d * l * -2.0),
        };
        let l0 = Mat::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let (_, rep) = cg_minimize(&obj, &l0, &CgOptions::default()).unwrap();
        assert!(rep.iterations <= 1);
        assert_eq!(rep.termination, Termination::GradientTolerance);
    }
}
