mod common;

use common::{gaussian, linear_system, orthonormal, rel_diff, rng};
use omdc_core::decomp::svd_all;
use omdc_core::dmdc::dmdc_reduced;
use omdc_core::grassmann::{cg_minimize, manifold_gradient, CgOptions, FnObjective, Termination};
use omdc_core::matstore::split_snapshots;
use omdc_core::omdc::{
    model_cost, omdc_identify, omdc_identify_from, reduce_problem, OmdcData, OmdcOptions, SolvePath,
};
use omdc_core::{Mat, SnapshotSet, Vector};

fn random_data(seed: u64, n: usize, p: usize, k: usize) -> OmdcData {
    let mut rng = rng(seed);
    let x = gaussian(&mut rng, n, k);
    let y = gaussian(&mut rng, n, k);
    let u = gaussian(&mut rng, p, k);
    OmdcData::new(&x, &y, &u).unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    let data = random_data(21, 12, 2, 30);
    let l = orthonormal(&mut rng(22), 12, 3);
    let g = data.gradient(&l).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..12 {
        for j in 0..3 {
            let mut lp = l.clone();
            let mut lm = l.clone();
            lp[(i, j)] += h;
            lm[(i, j)] -= h;
            let fd = (data.cost_from_grams(&lp).unwrap() - data.cost_from_grams(&lm).unwrap()) / (2.0 * h);
            worst = worst.max((fd - g[(i, j)]).abs() / g.amax());
        }
    }
    assert!(worst < 1e-7, "max relative deviation {worst:e}");
}

#[test]
fn cost_forms_agree_on_the_manifold() {
    let data = random_data(23, 10, 2, 25);
    let mut rng = rng(24);
    for _ in 0..10 {
        let l = orthonormal(&mut rng, 10, 4);
        let m = data.optimal_m(&l).unwrap();
        let p = data.optimal_p(&l, &m).unwrap();
        let direct = model_cost(&l, &m, &p, data.x(), data.y(), data.u());
        let residual = data.cost(&l).unwrap();
        let traces = data.cost_from_grams(&l).unwrap();
        assert!((residual - direct).abs() <= 1e-10 * direct);
        assert!((traces - direct).abs() <= 1e-9 * direct);
    }
}

#[test]
fn eliminated_operators_are_minimizers() {
    let data = random_data(25, 9, 2, 30);
    let mut rng = rng(26);
    let l = orthonormal(&mut rng, 9, 3);
    let m = data.optimal_m(&l).unwrap();
    let p = data.optimal_p(&l, &m).unwrap();
    let (x, y, u) = (data.x(), data.y(), data.u());
    let best = model_cost(&l, &m, &p, x, y, u);
    for _ in 0..100 {
        let mut dm = gaussian(&mut rng, 3, 3);
        dm *= 1e-4 / dm.norm();
        let mut dp = gaussian(&mut rng, 3, 2);
        dp *= 1e-4 / dp.norm();
        assert!(model_cost(&l, &(&m + &dm), &p, x, y, u) >= best);
        assert!(model_cost(&l, &m, &(&p + &dp), x, y, u) >= best);
    }
}

#[test]
fn optimal_p_has_zero_derivative() {
    let data = random_data(27, 6, 2, 20);
    let l = orthonormal(&mut rng(28), 6, 2);
    let m = data.optimal_m(&l).unwrap();
    let p = data.optimal_p(&l, &m).unwrap();
    let (x, y, u) = (data.x(), data.y(), data.u());
    let h = 1e-6;
    for i in 0..2 {
        for j in 0..2 {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[(i, j)] += h;
            pm[(i, j)] -= h;
            let d = (model_cost(&l, &m, &pp, x, y, u) - model_cost(&l, &m, &pm, x, y, u)) / (2.0 * h);
            assert!(d.abs() < 1e-8 * y.norm_squared(), "dF/dP = {d:e}");
        }
    }
}

#[test]
fn full_basis_matches_input_deflated_least_squares() {
    let data = random_data(29, 4, 1, 20);
    let l = Mat::identity(4, 4);
    let m = data.optimal_m(&l).unwrap();
    // Y^ = M X^ in the least-squares sense
    let xh = data.x_hat();
    let yh = data.y_hat();
    let oracle = (xh * xh.transpose()).cholesky().unwrap().solve(&(xh * yh.transpose())).transpose();
    assert!(rel_diff(&m, &oracle) < 1e-10);
    // P given M by plain normal equations on the input rows
    let p = data.optimal_p(&l, &m).unwrap();
    let u = data.u();
    let resid = data.y() - &m * data.x();
    let p_oracle = (u * u.transpose()).cholesky().unwrap().solve(&(u * resid.transpose())).transpose();
    assert!(rel_diff(&p, &p_oracle) < 1e-10);
}

#[test]
fn gradient_scales_quadratically_with_data() {
    let mut rng = rng(30);
    let x = gaussian(&mut rng, 8, 20);
    let y = gaussian(&mut rng, 8, 20);
    let u = gaussian(&mut rng, 2, 20);
    let l = orthonormal(&mut rng, 8, 3);
    let g1 = OmdcData::new(&x, &y, &u).unwrap().gradient(&l).unwrap();
    let g2 = OmdcData::new(&(&x * 2.0), &(&y * 2.0), &u).unwrap().gradient(&l).unwrap();
    assert!(rel_diff(&g2, &(&g1 * 4.0)) < 1e-12);
}

/// Snapshots of an exact rank-`r` system living in the span of `modes`.
fn low_rank_snapshots(seed: u64, n: usize, r: usize, m: usize) -> (Mat, Mat, Mat) {
    let mut rng = rng(seed);
    let modes = orthonormal(&mut rng, n, r);
    let sys = linear_system(&mut rng, r, 2, m);
    (modes.clone(), &modes * &sys.s, sys.u)
}

#[test]
fn exact_low_rank_data_has_zero_cost_at_true_modes() {
    let (modes, s, u) = low_rank_snapshots(31, 12, 3, 30);
    let (x, y) = split_snapshots(&s).unwrap();
    let data = OmdcData::new(&x, &y, &u).unwrap();
    let y2 = y.norm_squared();
    assert!(data.cost(&modes).unwrap() <= 1e-16 * y2 * 10.0);
    let g = manifold_gradient(&modes, &data.gradient(&modes).unwrap());
    assert!(g.norm() <= 1e-8 * y2);
}

#[test]
fn identification_recovers_exact_low_rank_system() {
    let (_, s, u) = low_rank_snapshots(33, 20, 3, 40);
    let (_, y) = split_snapshots(&s).unwrap();
    // one extra direction with negligible energy keeps r = 3 below rank S
    let mut rng = rng(34);
    let extra = orthonormal(&mut rng, 20, 1);
    let padded = &s + &extra * (gaussian(&mut rng, 1, 40) * 1e-12);
    let snap = SnapshotSet::unlabeled(padded, u, 1.0).unwrap();
    let fit = omdc_identify(&snap, 3, &OmdcOptions::default()).unwrap();
    assert!(fit.cost <= 1e-12 * y.norm_squared(), "cost {:e}", fit.cost);
}

#[test]
fn reduced_and_full_formulations_agree() {
    let mut rng = rng(35);
    for &(n, m) in &[(20, 12), (60, 25), (200, 30)] {
        let s = gaussian(&mut rng, n, m);
        let u = gaussian(&mut rng, 2, m - 1);
        let (x, y) = split_snapshots(&s).unwrap();
        let full = OmdcData::new(&x, &y, &u).unwrap();
        let red = reduce_problem(&s, &u).unwrap();
        assert!(rel_diff(&(&red.qbar * red.xbar()), &x) < 1e-12);
        for _ in 0..20 {
            let lbar = orthonormal(&mut rng, m, 3);
            let l = red.lift_modes(&lbar);
            let fr = red.data.cost(&lbar).unwrap();
            let ff = full.cost(&l).unwrap();
            assert!((fr - ff).abs() <= 1e-9 * ff);
            let gr = &red.qbar * red.data.gradient(&lbar).unwrap();
            let gf = full.gradient(&l).unwrap();
            assert!(rel_diff(&gr, &gf) < 1e-8);
        }
    }
}

#[test]
fn identification_is_rotation_invariant() {
    let mut rng = rng(36);
    let sys = linear_system(&mut rng, 30, 2, 20);
    let s = &sys.s + gaussian(&mut rng, 30, 20) * 1e-2;
    let snap = SnapshotSet::unlabeled(s.clone(), sys.u.clone(), 1.0).unwrap();
    let opts = OmdcOptions::default();
    let base = omdc_identify(&snap, 3, &opts).unwrap();
    assert_eq!(base.path, SolvePath::Reduced);
    let red = reduce_problem(&s, &sys.u).unwrap();
    let seed = svd_all(&red.rbar).unwrap().u.columns(0, 3).into_owned();
    let rot = orthonormal(&mut rng, 3, 3);
    let rotated = omdc_identify_from(&snap, &(seed * rot), &opts).unwrap();
    assert!((rotated.cost - base.cost).abs() <= 1e-6 * base.cost);
}

#[test]
fn omdc_never_loses_to_truncated_dmdc() {
    let mut rng = rng(37);
    for _ in 0..5 {
        let sys = linear_system(&mut rng, 15, 2, 40);
        let s = &sys.s + gaussian(&mut rng, 15, 40) * 0.05;
        let (x, y) = split_snapshots(&s).unwrap();
        let red = dmdc_reduced(&x, &y, &sys.u, 4, None).unwrap();
        let f_dmdc = model_cost(&red.phi_r, &red.a_hat, &red.b_hat, &x, &y, &sys.u);
        let snap = SnapshotSet::unlabeled(s, sys.u, 1.0).unwrap();
        let fit = omdc_identify(&snap, 4, &OmdcOptions::default()).unwrap();
        let f_omdc = model_cost(&fit.model.l, &fit.model.m, &fit.model.p, &x, &y, snap.u());
        assert!(f_omdc <= f_dmdc + 1e-10, "{f_omdc} > {f_dmdc}");
        assert!((f_omdc - fit.cost).abs() <= 1e-9 * f_omdc);
    }
}

#[test]
fn accepted_steps_decrease_the_cost() {
    let mut rng = rng(38);
    let sys = linear_system(&mut rng, 25, 2, 30);
    let s = &sys.s + gaussian(&mut rng, 25, 30) * 0.1;
    let snap = SnapshotSet::unlabeled(s, sys.u, 1.0).unwrap();
    let fit = omdc_identify(&snap, 5, &OmdcOptions::default()).unwrap();
    let h = &fit.report.cost_history;
    assert!(h.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()));
    assert!((fit.model.l.tr_mul(&fit.model.l) - Mat::identity(5, 5)).norm() < 1e-10);
}

#[test]
fn cg_finds_dominant_eigenspace() {
    let d = Vector::from_vec(vec![5.0, 1.0, 3.5, -2.0, 0.5, 2.0]);
    let dm = Mat::from_diagonal(&d);
    let obj = FnObjective {
        cost: |l: &Mat| Ok(-l.tr_mul(&(&dm * l)).trace()),
        gradient: |l: &Mat| Ok(&dm * l * -2.0),
    };
    let l0 = orthonormal(&mut rng(39), 6, 2);
    let opts = CgOptions {
        grad_tol: 1e-9,
        ..CgOptions::default()
    };
    let (l, report) = cg_minimize(&obj, &l0, &opts).unwrap();
    assert!((report.final_cost + 8.5).abs() < 1e-8);
    // span{e0, e2}
    let off: f64 = [1, 3, 4, 5].iter().map(|&i| l.row(i).norm_squared()).sum();
    assert!(off < 1e-8);
}

#[test]
fn cg_stops_at_a_minimizer() {
    let dm = Mat::from_diagonal(&Vector::from_vec(vec![4.0, 3.0, 1.0, 0.5]));
    let obj = FnObjective {
        cost: |l: &Mat| Ok(-l.tr_mul(&(&dm * l)).trace()),
        gradient: |l: &Mat| Ok(&dm * l * -2.0),
    };
    let l0 = Mat::identity(4, 2);
    let (_, report) = cg_minimize(&obj, &l0, &CgOptions::default()).unwrap();
    assert!(report.iterations <= 1);
    assert_eq!(report.termination, Termination::GradientTolerance);
}
