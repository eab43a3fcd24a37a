use capriv::dataset::{gen_planted_images, split_and_batch, FeatureMatrix, LabelSet};
use capriv::neural_game::*;
use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FD_STEP: f64 = 1e-5;
const FD_REL: f64 = 1e-4;

fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

fn random_labels(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

fn seeded(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::init(spec, &mut rng).unwrap();
    // Move batch norm off its identity initialization so every parameter matters.
    for layer in &mut params.layers {
        layer.b = RowDVector::from_fn(layer.b.len(), |_, _| rng.sample::<f64, _>(StandardNormal) * 0.3);
        if let Some(bn) = &mut layer.bn {
            let k = bn.scale.len();
            bn.scale = RowDVector::from_fn(k, |_, _| 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal));
            bn.shift = RowDVector::from_fn(k, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
            bn.running_mean = RowDVector::from_fn(k, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
            bn.running_var = RowDVector::from_fn(k, |_, _| 0.5 + rng.random::<f64>());
        }
    }
    params
}

fn assert_grad_close(analytic: &DVector<f64>, numeric: &DVector<f64>, what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    let rel = (analytic - numeric).norm() / analytic.norm().max(numeric.norm()).max(1e-12);
    assert!(rel <= FD_REL, "{what}: relative error {rel:e}");
    for i in 0..analytic.len() {
        let (a, f) = (analytic[i], numeric[i]);
        let scale = a.abs().max(f.abs()).max(1e-3);
        assert!((a - f).abs() <= FD_REL * scale, "{what}[{i}]: analytic {a}, numeric {f}");
    }
}

fn central_difference(flat: &DVector<f64>, mut f: impl FnMut(&DVector<f64>) -> f64) -> DVector<f64> {
    DVector::from_fn(flat.len(), |i, _| {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
    })
}

fn two_blobs(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
    let x = DMatrix::from_fn(n, 2, |i, _| 2.0 * y[i] + 0.3 * rng.sample::<f64, _>(StandardNormal));
    (x, y)
}

#[test]
fn single_linear_layer_is_affine() {
    let spec = MlpSpec::new(vec![3, 2], vec![Activation::Linear], vec![false]).unwrap();
    let mut params = MlpParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    params.layers[0].b = RowDVector::from_row_slice(&[0.5, -1.25]);
    let x = gaussian(5, 3, 2);
    let out = params.predict(&x, Mode::Train).unwrap();
    let mut expected = &x * &params.layers[0].w;
    for mut row in expected.row_iter_mut() {
        row += &params.layers[0].b;
    }
    assert_eq!(out, expected);
}

fn check_network_grads(spec: &MlpSpec, mode: Mode, seed: u64) {
    let params = seeded(spec, seed);
    let x = gaussian(7, spec.layer_dims[0], seed + 10);
    let out_dim = *spec.layer_dims.last().unwrap();
    let weights = gaussian(7, out_dim, seed + 20);
    let loss = |p: &MlpParams, x: &DMatrix<f64>| p.predict(x, mode).unwrap().component_mul(&weights).sum();
    let pass = params.forward(&x, mode).unwrap();
    let (grads, dinput) = params.backward(&pass, Upstream::Grad(&weights)).unwrap();

    let flat = params.flatten();
    let numeric = central_difference(&flat, |v| loss(&params.with_flat(v).unwrap(), &x));
    assert_grad_close(&grads.flatten(), &numeric, "parameters");

    let xflat = DVector::from_column_slice(x.as_slice());
    let numeric_x = central_difference(&xflat, |v| {
        loss(&params, &DMatrix::from_column_slice(x.nrows(), x.ncols(), v.as_slice()))
    });
    assert_grad_close(&DVector::from_column_slice(dinput.as_slice()), &numeric_x, "input");
}

#[test]
fn backward_matches_finite_differences_train_mode() {
    let spec = MlpSpec::new(
        vec![8, 4, 8],
        vec![Activation::LeakyRelu, Activation::Linear],
        vec![true, false],
    )
    .unwrap();
    check_network_grads(&spec, Mode::Train, 3);
    check_network_grads(&MlpSpec::holder(7, 4), Mode::Train, 4);
}

#[test]
fn backward_matches_finite_differences_inference_mode() {
    let spec = MlpSpec::new(
        vec![8, 4, 8],
        vec![Activation::Relu, Activation::Linear],
        vec![true, true],
    )
    .unwrap();
    check_network_grads(&spec, Mode::Inference, 5);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let spec = MlpSpec::attacker(8, 4);
    let params = seeded(&spec, 6);
    let x = gaussian(9, 8, 7);
    let classes: Vec<usize> = (0..9).map(|i| i % 2).collect();
    for mode in [Mode::Train, Mode::Inference] {
        let pass = params.forward(&x, mode).unwrap();
        let (grads, _) = params.backward(&pass, Upstream::CrossEntropy(&classes)).unwrap();
        let numeric = central_difference(&params.flatten(), |v| {
            cross_entropy(&params.with_flat(v).unwrap().predict(&x, mode).unwrap(), &classes)
        });
        assert_grad_close(&grads.flatten(), &numeric, "cross-entropy");
    }
}

#[test]
fn dead_relu_unit_gets_no_gradient() {
    let spec = MlpSpec::new(vec![3, 2, 1], vec![Activation::Relu, Activation::Linear], vec![false, false]).unwrap();
    let mut params = seeded(&spec, 8);
    params.layers[0].w.column_mut(0).fill(0.0);
    params.layers[0].b[0] = -1.0;
    let x = gaussian(6, 3, 9);
    let pass = params.forward(&x, Mode::Train).unwrap();
    let up = DMatrix::from_element(6, 1, 1.0);
    let (grads, _) = params.backward(&pass, Upstream::Grad(&up)).unwrap();
    assert!(grads.layers[0].w.column(0).iter().all(|&v| v == 0.0));
    assert_eq!(grads.layers[0].b[0], 0.0);
    assert!(grads.layers[0].w.column(1).iter().any(|&v| v != 0.0));
}

#[test]
fn batch_norm_rejects_single_row_batch() {
    let params = seeded(&MlpSpec::attacker(3, 4), 10);
    let x = gaussian(1, 3, 11);
    assert!(params.forward(&x, Mode::Train).is_err());
    assert!(params.forward(&x, Mode::Inference).is_ok());
}

#[test]
fn softmax_only_on_last_layer() {
    let bad = MlpSpec::new(vec![3, 2, 2], vec![Activation::Softmax, Activation::Linear], vec![false, false]);
    assert!(bad.is_err());
    assert!(MlpSpec::new(vec![3], vec![], vec![]).is_err());
}

#[test]
fn zero_epochs_leave_attacker_unchanged() {
    let h = seeded(&MlpSpec::attacker(2, 4), 12);
    let (x, y) = two_blobs(20, 13);
    assert_eq!(train_attacker(&h, &x, &y, 0).unwrap(), h);
}

#[test]
fn separable_toy_set_is_fit_exactly() {
    let (x, y) = two_blobs(20, 14);
    let h0 = MlpParams::init(&MlpSpec::attacker(2, 4), &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let h = train_attacker(&h0, &x, &y, 200).unwrap();
    assert_eq!(attacker_accuracy(&h, &x, &y).unwrap(), 1.0);
}

#[test]
fn attacker_loss_never_increases() {
    let x = gaussian(120, 5, 16);
    let y = random_labels(120, 17);
    let h0 = MlpParams::init(&MlpSpec::attacker(5, 10), &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
    let (_, losses) = train_attacker_traced(&h0, &x, &y, 80, 0.5).unwrap();
    assert!(losses.len() > 1);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "loss rose from {} to {}", w[0], w[1]);
    }
}

#[test]
fn random_labels_give_chance_held_out_accuracy() {
    let x = FeatureMatrix::new(gaussian(400, 5, 19)).unwrap();
    let y = LabelSet::binary(random_labels(400, 20)).unwrap();
    let split = split_and_batch(&x, &y, 0.5, 200, 21).unwrap();
    let m = nn_attack_eval(&x, &y, &split, &MlpSpec::attacker(5, 10), 100, 22).unwrap();
    assert!((m.test_accuracy - 0.5).abs() <= 0.1, "held-out accuracy {}", m.test_accuracy);
}

fn tiny_holder_setup(seed: u64) -> (MlpParams, MlpParams, HolderBatch) {
    let x = gaussian(10, 3, seed);
    let y = random_labels(10, seed + 1);
    let g = seeded(&MlpSpec::holder(3, 4), seed + 2);
    let mut h = seeded(&MlpSpec::attacker(3, 4), seed + 3);
    h.calibrate_running_stats(&x).unwrap();
    (g, h, HolderBatch::new(&x, &y).unwrap())
}

#[test]
fn penalties_vanish_at_the_budget() {
    let (g, h, batch) = tiny_holder_setup(30);
    let released = g.predict(&batch.input, Mode::Train).unwrap();
    let d = mean_sq_distortion(&released, &batch.target);
    let eval = holder_objective_and_grad(&g, &h, &batch, 7.0, 3.0, d).unwrap();
    assert_eq!(eval.distortion, d);
    assert_eq!(eval.loss, -eval.attacker_loss);
}

#[test]
fn zero_distortion_pays_the_quadratic_only() {
    let p = 3;
    let spec = MlpSpec::new(vec![p + 1, p], vec![Activation::Linear], vec![false]).unwrap();
    let mut g = MlpParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
    g.layers[0].w = DMatrix::from_fn(p + 1, p, |i, j| if i == j { 1.0 } else { 0.0 });
    let (_, h, batch) = tiny_holder_setup(32);
    let (beta, rho, gamma) = (2.5, 4.0, 0.6);
    let base = holder_objective_and_grad(&g, &h, &batch, 0.0, 0.0, gamma).unwrap();
    assert_eq!(base.distortion, 0.0);
    let quad = holder_loss(&g, &h, &batch, beta, 0.0, gamma).unwrap();
    let hinge = holder_loss(&g, &h, &batch, 0.0, rho, gamma).unwrap();
    assert!((quad - base.loss - beta * gamma * gamma).abs() <= 1e-12);
    assert_eq!(hinge, base.loss);
}

#[test]
fn holder_gradient_matches_finite_differences() {
    for (seed, gamma) in [(40, 0.05), (41, 50.0)] {
        let (g, h, batch) = tiny_holder_setup(seed);
        let (beta, rho) = (0.7, 0.4);
        let eval = holder_objective_and_grad(&g, &h, &batch, beta, rho, gamma).unwrap();
        let numeric = central_difference(&g.flatten(), |v| {
            holder_loss(&g.with_flat(v).unwrap(), &h, &batch, beta, rho, gamma).unwrap()
        });
        assert_grad_close(&eval.grads.flatten(), &numeric, "holder");
    }
}

#[test]
fn backtracking_stays_at_stationary_point() {
    let theta = DVector::from_vec(vec![0.3, -0.2]);
    let zero = DVector::zeros(2);
    let armijo = ArmijoSettings::default();
    let (out, alpha) = backtracking_update(&theta, &zero, |v: &DVector<f64>| Ok(v.norm_squared()), &armijo).unwrap();
    assert_eq!(out, theta);
    assert_eq!(alpha, armijo.alpha0);
}

#[test]
fn backtracking_solves_quadratic_bowl() {
    let armijo = ArmijoSettings::default();
    let mut theta = DVector::from_vec(vec![1.0, 1.0]);
    let mut steps = 0;
    while theta.norm() > 1e-6 {
        let grad = &theta * 2.0;
        let (next, alpha) = backtracking_update(&theta, &grad, |v: &DVector<f64>| Ok(v.norm_squared()), &armijo).unwrap();
        assert!(alpha > 0.0 && alpha <= armijo.alpha0);
        let (l0, l1) = (theta.norm_squared(), next.norm_squared());
        assert!(l1 <= l0 - armijo.c * alpha * grad.norm_squared());
        theta = next;
        steps += 1;
        assert!(steps <= 100, "not converged after 100 steps");
    }
}

#[test]
fn backtracking_gives_up_without_descent() {
    // A "gradient" pointing uphill never satisfies the Armijo condition.
    let theta = DVector::from_vec(vec![1.0, -2.0]);
    let uphill = &theta * -2.0;
    let armijo = ArmijoSettings::default();
    let (out, alpha) = backtracking_update(&theta, &uphill, |v: &DVector<f64>| Ok(v.norm_squared()), &armijo).unwrap();
    assert_eq!(alpha, 0.0);
    assert_eq!(out, theta);
}

#[test]
fn schedules_validate() {
    assert_eq!(Schedule::Linear { base: 2.0 }.value(10), 4.0);
    assert_eq!(Schedule::Explicit(vec![1.0, 3.0]).value(7), 3.0);
    assert!(Schedule::Explicit(vec![2.0, 1.0]).validate().is_err());
    assert!(Schedule::Explicit(vec![]).validate().is_err());
    assert!(Schedule::Linear { base: -1.0 }.validate().is_err());
    let x = gaussian(20, 3, 50);
    assert!(NnGameConfig::new(-0.1, 0).validate().is_err());
    assert!(NnGameConfig::for_data(0.1, &x, 0).validate().is_ok());
}

fn gaussian_task(n: usize, p: usize, seed: u64) -> (FeatureMatrix, LabelSet) {
    let x = gaussian(n, p, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let y = DVector::from_fn(n, |i, _| {
        if x[(i, 0)] + 0.3 * rng.sample::<f64, _>(StandardNormal) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    });
    (FeatureMatrix::new(x).unwrap(), LabelSet::binary(y).unwrap())
}

#[test]
fn zero_budget_keeps_data_and_accuracy() {
    let (p, n) = (4, 300);
    let (x, y) = gaussian_task(n, p, 60);
    let var = total_variance(x.values());
    let mut cfg = NnGameConfig::for_data(0.0, x.values(), 61);
    cfg.beta = Schedule::Linear { base: 1e5 / (var * var) };
    cfg.t = 30;
    cfg.attacker_epochs = 10;
    let h_spec = MlpSpec::attacker(p, 2 * p);
    let out = run_nn_game(&x, &y, &MlpSpec::holder(p, 2 * p), &h_spec, &cfg).unwrap();
    assert!(out.distortion <= 0.02 * var, "distortion {} vs variance {var}", out.distortion);
    let split = split_and_batch(&x, &y, 0.7, n, 62).unwrap();
    let raw = nn_attack_eval(&x, &y, &split, &h_spec, 200, 63).unwrap();
    let rel = nn_attack_eval(&out.released, &y, &split, &h_spec, 200, 63).unwrap();
    assert!(
        (raw.test_accuracy - rel.test_accuracy).abs() <= 0.03,
        "raw {} released {}",
        raw.test_accuracy,
        rel.test_accuracy
    );
}

#[test]
fn game_is_bitwise_reproducible() {
    let (x, y) = gaussian_task(120, 3, 70);
    let mut cfg = NnGameConfig::for_data(0.2, x.values(), 71);
    cfg.t = 8;
    cfg.minibatch = 64;
    cfg.attacker_epochs = 5;
    let run = || run_nn_game(&x, &y, &MlpSpec::holder(3, 4), &MlpSpec::attacker(3, 6), &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.released.values(), b.released.values());
    assert_eq!(a.g_params, b.g_params);
    assert_eq!(a.trace.len(), 8);
    assert!(a.trace.iter().all(|r| r.alpha <= cfg.armijo.alpha0));
}

#[test]
fn game_rejects_mismatched_networks() {
    let (x, y) = gaussian_task(40, 3, 80);
    let cfg = NnGameConfig::new(0.1, 0);
    assert!(run_nn_game(&x, &y, &MlpSpec::holder(4, 4), &MlpSpec::attacker(3, 6), &cfg).is_err());
    assert!(run_nn_game(&x, &y, &MlpSpec::holder(3, 4), &MlpSpec::attacker(4, 6), &cfg).is_err());
}

#[test]
fn planted_images_lose_accuracy_at_mid_budget() {
    let data = gen_planted_images(600, 8, 6, 0).unwrap();
    let x = data.features.values();
    let p = x.ncols();
    let var = total_variance(x);
    let split = split_and_batch(&data.features, &data.labels, 0.7, 600, 0).unwrap();
    let h_spec = MlpSpec::attacker(p, 2 * p);
    let raw = nn_attack_eval(&data.features, &data.labels, &split, &h_spec, 300, 0).unwrap();
    let mut cfg = NnGameConfig::for_data(0.2 * var, x, 0);
    cfg.t = 200;
    cfg.attacker_epochs = 10;
    let out = run_nn_game(&data.features, &data.labels, &MlpSpec::holder(p, p / 2), &h_spec, &cfg).unwrap();
    let rel = nn_attack_eval(&out.released, &data.labels, &split, &h_spec, 300, 0).unwrap();
    assert!(rel.test_accuracy < raw.test_accuracy - 0.05, "raw {} released {}", raw.test_accuracy, rel.test_accuracy);
    assert!(out.distortion <= 0.3 * var);
    let entries = (x.nrows() * p) as f64;
    let rms = ((out.released.values() - x).norm_squared() / entries).sqrt();
    assert!((out.rms_per_coordinate - rms).abs() <= 1e-12 * rms.max(1.0));
}
