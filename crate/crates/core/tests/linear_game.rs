use capriv::dataset::{gen_linear_gaussian, split_and_batch, FeatureMatrix, LabelSet};
use capriv::linalg::{lstsq, thin_svd};
use capriv::linear_game::*;
use capriv::numopt::{pseudo_inverse, SymMatrix};
use capriv::Error;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn fm(m: DMatrix<f64>) -> FeatureMatrix {
    FeatureMatrix::new(m).unwrap()
}

fn labels(m: DMatrix<f64>) -> LabelSet {
    LabelSet::continuous(m).unwrap()
}

fn diag321() -> FeatureMatrix {
    fm(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0])))
}

#[test]
fn cross_moments_two_samples() {
    let x = fm(DMatrix::identity(2, 2));
    let y = labels(DMatrix::from_column_slice(2, 1, &[2.0, 4.0]));
    let m = cross_moments(&x, &y).unwrap();
    assert_eq!(m.c_xx, DMatrix::identity(2, 2) * 0.5);
    assert_eq!(m.c_xy, DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
    assert_eq!(m.n, 2);
}

#[test]
fn cross_moments_single_sample() {
    let x = fm(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
    let y = labels(DMatrix::from_element(1, 1, 3.0));
    let m = cross_moments(&x, &y).unwrap();
    assert_eq!(m.c_xx, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
    assert_eq!(m.c_xy, DMatrix::from_column_slice(2, 1, &[3.0, 6.0]));
}

#[test]
fn cross_moments_match_accumulation_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, p, d) = (37, 5, 3);
    let x = gaussian(&mut rng, n, p);
    let y = gaussian(&mut rng, n, d);
    let m = cross_moments(&fm(x.clone()), &labels(y.clone())).unwrap();
    let mut cxx = DMatrix::zeros(p, p);
    let mut cxy = DMatrix::zeros(p, d);
    for i in 0..n {
        for a in 0..p {
            for b in 0..p {
                cxx[(a, b)] += x[(i, a)] * x[(i, b)] / n as f64;
            }
            for b in 0..d {
                cxy[(a, b)] += x[(i, a)] * y[(i, b)] / n as f64;
            }
        }
    }
    assert!((m.c_xx - cxx).amax() < 1e-12);
    assert!((m.c_xy - cxy).amax() < 1e-12);
}

#[test]
fn cross_moments_reject_mismatch() {
    let x = fm(DMatrix::identity(3, 2));
    let y = labels(DMatrix::zeros(2, 1));
    assert!(cross_moments(&x, &y).is_err());
    let yb = LabelSet::binary(nalgebra::DVector::from_vec(vec![1.0, -1.0, 1.0])).unwrap();
    assert!(cross_moments(&x, &yb).is_err());
}

struct Instance {
    x: FeatureMatrix,
    y: LabelSet,
}

fn instance(seed: u64, n: usize, p: usize, d: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(&mut rng, n, p);
    let y = gaussian(&mut rng, n, d);
    Instance { x: fm(x), y: labels(y) }
}

#[test]
fn identity_compression_gives_ols() {
    let inst = instance(2, 50, 4, 2);
    let mom = cross_moments(&inst.x, &inst.y).unwrap();
    let theta = attacker_theta(&DMatrix::identity(4, 4), &mom).unwrap();
    let ols = lstsq(inst.x.values(), inst.y.as_continuous().unwrap()).unwrap();
    assert!((theta - ols).amax() < 1e-10);
}

#[test]
fn orthogonal_compression_keeps_predictions() {
    let inst = instance(3, 60, 5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let q = gaussian(&mut rng, 5, 5).qr().q();
    let mom = cross_moments(&inst.x, &inst.y).unwrap();
    let theta = attacker_theta(&q, &mom).unwrap();
    let ols = lstsq(inst.x.values(), inst.y.as_continuous().unwrap()).unwrap();
    let pa = inst.x.values() * &q * theta;
    let pb = inst.x.values() * ols;
    assert!((pa - pb).amax() < 1e-10);
}

#[test]
fn attacker_is_locally_optimal() {
    let inst = instance(4, 80, 6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let a = gaussian(&mut rng, 6, 3);
    let mom = cross_moments(&inst.x, &inst.y).unwrap();
    let theta = attacker_theta(&a, &mom).unwrap();
    // Gradient of (1/n)‖Y − XAΘ‖²: 2(AᵀC_xxA Θ − AᵀC_xy).
    let grad = (a.transpose() * &mom.c_xx * &a * &theta - a.transpose() * &mom.c_xy) * 2.0;
    assert!(grad.norm() <= 1e-8, "{}", grad.norm());
    let base = attacker_loss(&inst.x, &inst.y, &a, &theta).unwrap();
    for _ in 0..100 {
        let dir = gaussian(&mut rng, 3, 2);
        let delta = &dir * (1e-3 / dir.norm());
        assert!(base <= attacker_loss(&inst.x, &inst.y, &a, &(&theta + delta)).unwrap());
    }
}

#[test]
fn attacker_flags_singular_compression() {
    let inst = instance(5, 30, 3, 1);
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    let mom = cross_moments(&inst.x, &inst.y).unwrap();
    assert!(matches!(attacker_theta(&a, &mom), Err(Error::SingularCompression { .. })));
    assert!(matches!(best_reconstruction(&a, &inst.x), Err(Error::SingularCompression { .. })));
}

#[test]
fn identity_reconstruction() {
    let inst = instance(6, 20, 4, 1);
    let b = best_reconstruction(&DMatrix::identity(4, 4), &inst.x).unwrap();
    assert!((b - DMatrix::<f64>::identity(4, 4)).amax() < 1e-10);
}

#[test]
fn isotropic_data_reconstruction_is_pseudo_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = gaussian(&mut rng, 30, 5).qr().q();
    let x = fm(q * 2.5);
    let a = gaussian(&mut rng, 5, 3);
    let b = best_reconstruction(&a, &x).unwrap();
    assert!((b - pseudo_inverse(&a).unwrap()).amax() < 1e-10);
}

#[test]
fn reconstruction_is_least_squares_optimal() {
    let inst = instance(8, 40, 6, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let a = gaussian(&mut rng, 6, 4);
    let b = best_reconstruction(&a, &inst.x).unwrap();
    let xv = inst.x.values();
    let err = |b: &DMatrix<f64>| (xv * &a * b - xv).norm();
    let base = err(&b);
    for _ in 0..100 {
        let d = gaussian(&mut rng, 4, 6) * 1e-3;
        assert!(base <= err(&(&b + d)));
    }
}

#[test]
fn min_distortion_of_diagonal() {
    let svd = svd_cache(&diag321()).unwrap();
    assert!((min_feasible_distortion(&svd, 2).unwrap() - 1.0).abs() < 1e-12);
    assert!((min_feasible_distortion(&svd, 1).unwrap() - 5.0).abs() < 1e-12);
    assert_eq!(min_feasible_distortion(&svd, 3).unwrap(), 0.0);
    assert!(min_feasible_distortion(&svd, 0).is_err());
    assert!(min_feasible_distortion(&svd, 4).is_err());
}

#[test]
fn truncation_distortion_matches_tail() {
    let inst = instance(9, 20, 10, 1);
    let svd = svd_cache(&inst.x).unwrap();
    for k in [2, 5, 8] {
        let vk = svd.v.columns(0, k).into_owned();
        let sk = DMatrix::from_diagonal(&svd.s.rows(0, k).map(|s| 1.0 / (s * s)));
        let m = &vk * sk * vk.transpose();
        let tail = min_feasible_distortion(&svd, k).unwrap();
        assert!((release_distortion(&inst.x, &m) - tail).abs() <= 1e-9 * tail);
    }
}

#[test]
fn effective_rank_examples() {
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.5, 0.005]));
    assert_eq!(effective_rank(&d, 0.01), 2);
    assert_eq!(effective_rank(&DMatrix::zeros(3, 3), 0.01), 0);
    let inst = instance(10, 30, 6, 1);
    let svd = svd_cache(&inst.x).unwrap();
    for k in 1..=6 {
        let vk = svd.v.columns(0, k).into_owned();
        let sk = DMatrix::from_diagonal(&svd.s.rows(0, k).map(|s| 1.0 / (s * s)));
        assert_eq!(effective_rank(&(&vk * sk * vk.transpose()), 1e-6), k);
    }
}

#[test]
fn zero_budget_forces_identity_release() {
    let inst = instance(11, 25, 5, 1);
    let map = solve_release_map(&inst.x, &inst.y, 0.0, 0.1).unwrap();
    let svd = svd_cache(&inst.x).unwrap();
    let expected = &svd.v * DMatrix::from_diagonal(&svd.s.map(|s| 1.0 / (s * s))) * svd.v.transpose();
    assert!((map.m.as_matrix() - expected).amax() < 1e-8);
    let xt = release(&inst.x, map.m.as_matrix()).unwrap();
    assert!((xt.values() - inst.x.values()).amax() < 1e-8);
}

#[test]
fn uncorrelated_labels_and_large_budget_give_zero_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = gaussian(&mut rng, 30, 4);
    // Labels orthogonal to the centered column space.
    let mut y = gaussian(&mut rng, 30, 1);
    let design = capriv::linalg::with_intercept(&x);
    let coef = lstsq(&design, &y).unwrap();
    y -= &design * coef;
    let x = fm(x);
    let budget = x.values().norm_squared();
    let map = solve_release_map(&x, &labels(y), budget, 0.5).unwrap();
    assert!(map.m.as_matrix().amax() < 1e-12);
}

fn truncation_family(x: &FeatureMatrix, gamma: f64) -> Vec<DMatrix<f64>> {
    let svd = svd_cache(x).unwrap();
    (1..=svd.rank())
        .filter(|&j| min_feasible_distortion(&svd, j).unwrap() <= gamma)
        .map(|j| {
            let vj = svd.v.columns(0, j).into_owned();
            &vj * DMatrix::from_diagonal(&svd.s.rows(0, j).map(|s| 1.0 / (s * s))) * vj.transpose()
        })
        .collect()
}

#[test]
fn release_map_beats_truncation_family() {
    for seed in 0..3 {
        let data = gen_linear_gaussian(40, 8, 1, 0.1, seed).unwrap();
        let svd = svd_cache(&data.features).unwrap();
        let gamma = min_feasible_distortion(&svd, 4).unwrap();
        for beta in [1e-3, 1e-1, 1.0] {
            let map = solve_release_map(&data.features, &data.labels, gamma, beta).unwrap();
            let obj = release_objective(&data.features, &data.labels, map.m.as_matrix(), beta).unwrap();
            assert!((obj - map.objective).abs() <= 1e-9 * obj.abs().max(1.0));
            for r in truncation_family(&data.features, gamma) {
                let ref_obj = release_objective(&data.features, &data.labels, &r, beta).unwrap();
                assert!(obj <= ref_obj + 1e-6, "seed {seed} beta {beta}: {obj} > {ref_obj}");
            }
            assert!(map.kkt.max() <= 1e-6, "{:?}", map.kkt);
            assert!(map.m.min_eigenvalue().unwrap() >= -1e-8);
            assert!(map.distortion <= gamma + 1e-6);
            let direct = release_distortion(&data.features, map.m.as_matrix());
            assert!((direct - map.distortion).abs() <= 1e-8 * gamma.max(1.0));
        }
    }
}

#[test]
fn projected_gradient_agrees_with_multiplier_solver() {
    let data = gen_linear_gaussian(40, 6, 1, 0.1, 21).unwrap();
    let svd = svd_cache(&data.features).unwrap();
    let gamma = min_feasible_distortion(&svd, 3).unwrap() * 1.2;
    let fast = solve_release_map(&data.features, &data.labels, gamma, 0.05).unwrap();
    let opts = ReleaseOptions {
        solver: ReleaseSolver::ProjectedGradient,
        ..ReleaseOptions::default()
    };
    match solve_release_map_with(&data.features, &data.labels, gamma, 0.05, &opts, None) {
        Ok(slow) => {
            assert!(slow.objective >= fast.objective - 1e-6 * fast.objective.abs().max(1.0));
            assert!((slow.objective - fast.objective).abs() <= 1e-3 * fast.objective.abs().max(1.0));
        }
        Err(Error::NonConvergence { .. }) => {}
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn budget_gate_is_exact() {
    let inst = instance(13, 30, 6, 1);
    let svd = svd_cache(&inst.x).unwrap();
    for k in [2, 4] {
        let tail = min_feasible_distortion(&svd, k).unwrap();
        let below = LinearGameConfig::new(tail * (1.0 - 1e-9), k);
        match run_linear_game(&inst.x, &inst.y, &below) {
            Err(Error::InfeasibleDistortion { min_gamma, .. }) => assert_eq!(min_gamma, tail),
            other => panic!("expected InfeasibleDistortion, got {other:?}"),
        }
        let (_, map) = run_linear_game(&inst.x, &inst.y, &LinearGameConfig::new(tail, k)).unwrap();
        assert!(map.effective_rank <= k);
        assert!(map.distortion <= tail + 1e-6);
    }
}

#[test]
fn full_rank_zero_budget_releases_data() {
    let inst = instance(14, 30, 5, 1);
    let (xt, map) = run_linear_game(&inst.x, &inst.y, &LinearGameConfig::new(0.0, 5)).unwrap();
    assert_eq!(map.effective_rank, 5);
    assert!((xt.values() - inst.x.values()).amax() < 1e-8);
}

#[test]
fn beta_update_arithmetic() {
    assert_eq!(next_beta(1.0, 5, 3), 1.5);
    assert_eq!(next_beta(1.0, 2, 3), 0.75);
    assert_eq!(next_beta(1.0, 3, 3), 1.0);
}

#[test]
fn strict_rank_reports_closest() {
    let inst = instance(15, 30, 6, 1);
    let svd = svd_cache(&inst.x).unwrap();
    let tail = min_feasible_distortion(&svd, 2).unwrap();
    let cfg = LinearGameConfig {
        truncation_fallback: false,
        max_outer: 5,
        ..LinearGameConfig::new(tail, 2)
    };
    match run_linear_game(&inst.x, &inst.y, &cfg) {
        Err(Error::RankNotAttained { target, closest, .. }) => {
            assert_eq!(target, 2);
            assert!(closest > 2);
        }
        Ok((_, map)) => assert_eq!(map.effective_rank, 2),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn rank_targeting_within_budget_interval() {
    let data = gen_linear_gaussian(120, 8, 1, 0.1, 16).unwrap();
    let svd = svd_cache(&data.features).unwrap();
    for k in [2, 4, 6] {
        let (lo, hi) = rank_gamma_interval(&svd, k, 0.01).unwrap();
        let gamma = gamma_for_rank(&svd, k, 0.01).unwrap();
        assert!(lo <= gamma && gamma < hi);
        assert!(gamma >= min_feasible_distortion(&svd, k).unwrap());
        let (xt, map) = run_linear_game(&data.features, &data.labels, &LinearGameConfig::new(gamma, k)).unwrap();
        assert!(!map.fallback);
        assert_eq!(map.effective_rank, k);
        assert!(map.distortion <= gamma + 1e-6);
        assert!(map.m.min_eigenvalue().unwrap() >= -1e-8);
        let cut_rank = thin_svd(xt.values()).unwrap().s.iter().filter(|s| **s > 1e-6 * xt.values().norm()).count();
        assert!(cut_rank <= map.effective_rank);
    }
}

#[test]
fn noiseless_limit_of_noisy_objective() {
    let inst = instance(17, 30, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(170);
    let a = gaussian(&mut rng, 4, 2);
    let noise = NoiseSpec::new(SymMatrix::zeros(2)).unwrap();
    let (att, rec) = noisy_linear_objective(&a, &noise, &inst.x, &inst.y).unwrap();
    let mom = cross_moments(&inst.x, &inst.y).unwrap();
    let theta = attacker_theta(&a, &mom).unwrap();
    let b = best_reconstruction(&a, &inst.x).unwrap();
    let xv = inst.x.values();
    assert!((att - attacker_loss(&inst.x, &inst.y, &a, &theta).unwrap()).abs() < 1e-10);
    assert!((rec - (xv * &a * b - xv).norm_squared()).abs() < 1e-10 * rec.max(1.0));
}

#[test]
fn huge_noise_destroys_predictor() {
    let inst = instance(18, 12, 3, 1);
    let a = DMatrix::identity(3, 2);
    let noise = NoiseSpec::new(SymMatrix::new(DMatrix::identity(2, 2) * 1e12).unwrap()).unwrap();
    let (att, _) = noisy_linear_objective(&a, &noise, &inst.x, &inst.y).unwrap();
    let y = inst.y.as_continuous().unwrap();
    let baseline = y.norm_squared() / y.nrows() as f64;
    assert!((att - baseline).abs() <= 1e-3 * baseline);
}

#[test]
fn noisy_objective_matches_monte_carlo() {
    let inst = instance(19, 20, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(190);
    let a = gaussian(&mut rng, 3, 2);
    let l = DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.3, 0.4]);
    let sigma = &l * l.transpose();
    let noise = NoiseSpec::new(SymMatrix::new(sigma.clone()).unwrap()).unwrap();
    let (att, rec) = noisy_linear_objective(&a, &noise, &inst.x, &inst.y).unwrap();
    // Fixed minimizers from the closed forms, then average over draws of E.
    let xv = inst.x.values();
    let yv = inst.y.as_continuous().unwrap();
    let n = xv.nrows() as f64;
    let mom = cross_moments(&inst.x, &inst.y).unwrap();
    let theta = (a.transpose() * &mom.c_xx * &a + &sigma)
        .cholesky()
        .unwrap()
        .solve(&(a.transpose() * &mom.c_xy));
    let xtx = xv.transpose() * xv;
    let b = (a.transpose() * &xtx * &a + &sigma * n).cholesky().unwrap().solve(&(a.transpose() * &xtx));
    let draws = 100_000;
    let (mut att_mc, mut rec_mc) = (0.0, 0.0);
    let xa = xv * &a;
    for _ in 0..draws {
        let e = gaussian(&mut rng, xv.nrows(), 2) * l.transpose();
        let noisy = &xa + e;
        att_mc += (yv - &noisy * &theta).norm_squared() / n;
        rec_mc += (&noisy * &b - xv).norm_squared();
    }
    att_mc /= draws as f64;
    rec_mc /= draws as f64;
    assert!((att - att_mc).abs() <= 1e-2 * att, "{att} vs {att_mc}");
    assert!((rec - rec_mc).abs() <= 1e-2 * rec, "{rec} vs {rec_mc}");
}

#[test]
fn perfect_release_is_perfectly_attacked() {
    let data = gen_linear_gaussian(100, 5, 1, 0.0, 20).unwrap();
    // Labels are linear in the raw design, hence affine in the normalized one.
    let split = split_and_batch(&data.features, &data.labels, 0.8, 1000, 20).unwrap();
    let m = linear_attack_eval(&data.features, &data.features, &data.labels, &split).unwrap();
    assert!((m.r2 - 1.0).abs() < 1e-8);
    assert!(m.rmse < 1e-8);
    assert_eq!(m.distortion, 0.0);
}

#[test]
fn permuted_labels_are_not_predictable() {
    let data = gen_linear_gaussian(500, 10, 1, 0.1, 22).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(220);
    let mut order: Vec<usize> = (0..500).collect();
    order.shuffle(&mut rng);
    let y = data.labels.select_rows(&order);
    let split = split_and_batch(&data.features, &y, 0.8, 1000, 22).unwrap();
    let m = linear_attack_eval(&data.features, &data.features, &y, &split).unwrap();
    assert!(m.r2 <= 0.05, "{}", m.r2);
}

#[test]
fn released_maps_are_psd_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for seed in 0..5 {
        let inst = instance(100 + seed, 30, 5, 1);
        let svd = svd_cache(&inst.x).unwrap();
        let gamma = rng.random_range(0.0..1.0) * inst.x.values().norm_squared();
        let beta = 10f64.powf(rng.random_range(-3.0..1.0));
        let map = solve_release_map(&inst.x, &inst.y, gamma, beta).unwrap();
        assert!(map.m.min_eigenvalue().unwrap() >= -1e-8);
        assert!(map.distortion <= gamma + 1e-6);
        assert!(map.effective_rank <= svd.rank());
    }
}

#[test]
fn budget_far_above_rank_interval_falls_back_to_truncation() {
    let data = gen_linear_gaussian(96, 8, 1, 0.1, 30).unwrap();
    let svd = svd_cache(&data.features).unwrap();
    let (_, hi) = rank_gamma_interval(&svd, 4, 0.01).unwrap();
    let gamma = 0.3 * data.features.values().norm_squared();
    assert!(gamma > 2.0 * hi);
    // The β loop runs down to small penalties, where the inner solver must stay stable.
    for beta in [1e-3, 4e-4, 1e-4, 4e-5] {
        let map = solve_release_map(&data.features, &data.labels, gamma, beta).unwrap();
        assert!(map.distortion <= gamma + 1e-6);
    }
    let cfg = LinearGameConfig {
        beta0: 1000.0,
        ..LinearGameConfig::new(gamma, 4)
    };
    let (_, map) = run_linear_game(&data.features, &data.labels, &cfg).unwrap();
    assert!(map.fallback);
    assert_eq!(map.effective_rank, 4);
    assert!(map.distortion <= gamma + 1e-6);
}
