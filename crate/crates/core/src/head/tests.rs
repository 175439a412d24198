use super::*;
use crate::check::{central_diff, max_rel_err, GRAD_TOL};

fn randv(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.range(-1.0, 1.0)).collect()
}

// ── CCC metric ──────────────────────────────────────────────────────────

#[test]
fn perfect_agreement_is_exactly_one() {
    let a = randv(1, 50);
    let s = ccc(&a, &a).unwrap();
    assert_eq!(s.ccc, 1.0);
    assert_eq!(s.ccc_loss, 1.0);
}

#[test]
fn constant_prediction_has_zero_covariance_and_zero_ccc() {
    let label = randv(2, 40);
    let pred = vec![0.3; 40];
    let s = ccc(&pred, &label).unwrap();
    // Up to rounding in the mean, the centered constant is exactly zero.
    assert!(s.covariance.abs() < 1e-14);
    assert!(s.ccc.abs() < 1e-14);
    assert!((s.ccc_loss - 2.0).abs() < 1e-14);
}

#[test]
fn perfect_anti_agreement_of_zero_mean_is_minus_one() {
    let mut a = randv(3, 60);
    let mean = a.iter().sum::<f64>() / 60.0;
    for v in &mut a {
        *v -= mean;
    }
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    let s = ccc(&neg, &a).unwrap();
    assert!((s.ccc + 1.0).abs() < 1e-9);
    assert!((s.ccc_loss - 3.0).abs() < 1e-9);
}

#[test]
fn matches_independent_textbook_oracle() {
    // Oracle: CCC = 2 r sp sl / (sp^2 + sl^2 + (mp - ml)^2) via the Pearson
    // correlation, coded separately from the implementation path.
    let oracle = |p: &[f64], l: &[f64]| {
        let n = p.len() as f64;
        let mp = p.iter().sum::<f64>() / n;
        let ml = l.iter().sum::<f64>() / n;
        let sp = (p.iter().map(|v| (v - mp).powi(2)).sum::<f64>() / n).sqrt();
        let sl = (l.iter().map(|v| (v - ml).powi(2)).sum::<f64>() / n).sqrt();
        let cov = p
            .iter()
            .zip(l)
            .map(|(a, b)| (a - mp) * (b - ml))
            .sum::<f64>()
            / n;
        let r = cov / (sp * sl);
        2.0 * r * sp * sl / (sp * sp + sl * sl + (mp - ml) * (mp - ml))
    };
    for seed in 0..100 {
        let p = randv(100 + seed, 100);
        let l = randv(200 + seed, 100);
        let s = ccc(&p, &l).unwrap();
        assert!((s.ccc - oracle(&p, &l)).abs() < 1e-12);
    }
}

#[test]
fn too_few_frames_is_usage_error() {
    assert!(matches!(ccc(&[1.0], &[1.0]), Err(Error::Usage(_))));
}

#[test]
fn ccc_is_symmetric_exactly() {
    for seed in 0..20 {
        let a = randv(300 + seed, 31);
        let b = randv(400 + seed, 31);
        assert_eq!(ccc(&a, &b).unwrap().ccc, ccc(&b, &a).unwrap().ccc);
    }
}

#[test]
fn constant_shift_strictly_decreases_agreement() {
    let a = randv(5, 50);
    for c in [0.1, -0.4, 2.0] {
        let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
        assert!(ccc(&shifted, &a).unwrap().ccc < 1.0);
    }
}

#[test]
fn scaling_strictly_decreases_agreement() {
    let a = randv(6, 50);
    for s in [0.5, 2.0, 10.0] {
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        assert!(ccc(&a, &scaled).unwrap().ccc < 1.0);
    }
}

#[test]
fn ccc_is_bounded_and_loss_in_range() {
    for seed in 0..200 {
        let p = randv(500 + seed, 25);
        let l = randv(700 + seed, 25);
        let s = ccc(&p, &l).unwrap();
        assert!(s.ccc.abs() <= 1.0 + 1e-15);
        assert!((1.0..=3.0).contains(&s.ccc_loss));
        assert!(s.var_pred >= 0.0 && s.var_label >= 0.0);
    }
    // Doubly constant input: the floor guards the 0/0 case.
    let s = ccc(&[0.7; 10], &[0.7; 10]).unwrap();
    assert!(s.ccc.abs() < 1e-9);
}

// ── CCC loss gradient ───────────────────────────────────────────────────

#[test]
fn gradient_vanishes_at_perfect_agreement() {
    let a = randv(7, 40);
    let g = ccc_loss_grad(&a, &a).unwrap();
    for v in g {
        assert!(v.abs() <= 1e-8, "stationarity violated: {v}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let pred = randv(8, 30);
    let label = randv(9, 30);
    let analytic = ccc_loss_grad(&pred, &label).unwrap();
    let numeric = central_diff(&pred, |p| ccc(p, &label).unwrap().ccc_loss);
    assert!(max_rel_err(&analytic, &numeric) <= GRAD_TOL);

    // Scaling the label changes the gradient consistently with FD.
    let label2: Vec<f64> = label.iter().map(|v| v * 2.0).collect();
    let analytic2 = ccc_loss_grad(&pred, &label2).unwrap();
    let numeric2 = central_diff(&pred, |p| ccc(p, &label2).unwrap().ccc_loss);
    assert!(max_rel_err(&analytic2, &numeric2) <= GRAD_TOL);
}

#[test]
fn two_frame_gradient_matches_symbolic_derivation() {
    // For N=2 with dp = (p1-p2)/2, dl = (l1-l2)/2:
    //   cov = dp*dl, var_p = dp^2, var_l = dl^2,
    //   D = (mp-ml)^2 + dp^2 + dl^2,
    //   dCCC/dp1 = [dl*D - 2 dp dl ((mp-ml) + dp)] / D^2
    // and dCCC/dp2 mirrors with -dp and the mean term unchanged:
    //   dCCC/dp2 = [-dl*D - 2 dp dl ((mp-ml) - dp)] / D^2.
    let (p1, p2, l1, l2) = (0.8, -0.3, 0.2, 0.9);
    let (mp, ml) = ((p1 + p2) / 2.0, (l1 + l2) / 2.0);
    let (dp, dl) = ((p1 - p2) / 2.0, (l1 - l2) / 2.0);
    let d = (mp - ml) * (mp - ml) + dp * dp + dl * dl;
    let dccc_dp1 = (dl * d - 2.0 * dp * dl * ((mp - ml) + dp)) / (d * d);
    let dccc_dp2 = (-dl * d - 2.0 * dp * dl * ((mp - ml) - dp)) / (d * d);

    let g = ccc_loss_grad(&[p1, p2], &[l1, l2]).unwrap();
    assert!((g[0] + dccc_dp1).abs() < 1e-13);
    assert!((g[1] + dccc_dp2).abs() < 1e-13);
}

#[test]
fn tape_loss_agrees_with_closed_form_and_analytic_gradient() {
    let store = ParamStore::new();
    for seed in 0..20 {
        let pred = randv(1000 + seed, 24);
        let label = randv(2000 + seed, 24);
        let mut c = Ctx::eval(&store);
        let p = c.tape.leaf(Tensor::new(vec![24], pred.clone()).unwrap(), true);
        let l = c.constant(Tensor::new(vec![24], label.clone()).unwrap());
        let loss = ccc_loss_on_tape(&mut c, p, l).unwrap();
        let want = ccc(&pred, &label).unwrap().ccc_loss;
        assert!((c.value(loss).data()[0] - want).abs() < 1e-12);

        let grads = c.tape.backward(loss).unwrap();
        let tape_grad = grads.get(p).unwrap();
        let analytic = ccc_loss_grad(&pred, &label).unwrap();
        for (t, a) in tape_grad.iter().zip(&analytic) {
            assert!((t - a).abs() < 1e-10);
        }
    }
}

#[test]
fn standardize_matches_tape_route() {
    let store = ParamStore::new();
    let xs = randv(11, 17);
    let plain = standardize(&xs);
    let mut c = Ctx::eval(&store);
    let x = c.input(Tensor::new(vec![17], xs).unwrap());
    let s = standardize_on_tape(&mut c, x).unwrap();
    for (a, b) in plain.iter().zip(c.value(s).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let mean: f64 = plain.iter().sum::<f64>() / 17.0;
    assert!(mean.abs() < 1e-12);
}

// ── Readout head ────────────────────────────────────────────────────────

#[test]
fn fuse_readout_zero_weights_zero_bias_is_zero() {
    let store = ParamStore::new();
    let mut c = Ctx::eval(&store);
    let v = c.input(Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 4.0, 0.0, 1.0]).unwrap());
    let w = c.constant(Tensor::zeros(&[6, 2]));
    let b = c.constant(Tensor::zeros(&[2]));
    let y = fuse_readout(&mut c, v, w, Some(b)).unwrap();
    assert_eq!(c.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn block_averaging_fusion_matrix_yields_node_mean() {
    let (a, k) = (4usize, 3usize);
    let store = ParamStore::new();
    let mut c = Ctx::eval(&store);
    let mut rng = Rng::new(12);
    let vert = Tensor::rand_uniform(&[a, k], 1.0, &mut rng);
    let v = c.input(vert.clone());
    // W[(node*k + i), j] = (i == j)/A stacks identity blocks scaled by 1/A.
    let mut wdata = vec![0.0; a * k * k];
    for node in 0..a {
        for i in 0..k {
            wdata[(node * k + i) * k + i] = 1.0 / a as f64;
        }
    }
    let w = c.constant(Tensor::new(vec![a * k, k], wdata).unwrap());
    let y = fuse_readout(&mut c, v, w, None).unwrap();
    for j in 0..k {
        let want: f64 = (0..a).map(|i| vert.at2(i, j)).sum::<f64>() / a as f64;
        assert!((c.value(y).data()[j] - want).abs() < 1e-12);
    }
    assert_eq!(c.value(y).shape(), &[1, k]);
}

#[test]
fn zero_weight_head_predicts_zero() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(13);
    let head = RegressorHead::init(&mut store, "head", Some(6), 3, [4, 3], &mut rng);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut c = Ctx::eval(&store);
    let x = c.input(Tensor::rand_uniform(&[5, 6], 1.0, &mut rng));
    let y = head.forward(&mut c, x).unwrap();
    assert_eq!(c.value(y).shape(), &[5, 1]);
    assert!(c.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_frame_matches_hand_evaluated_lstm_step() {
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut store = ParamStore::new();
    let mut rng = Rng::new(14);
    let head = RegressorHead::init(&mut store, "head", None, 1, [1, 1], &mut rng);
    let set = |store: &mut ParamStore, name: &str, shape: &[usize], data: &[f64]| {
        let id = store.find(name).unwrap();
        store
            .set_value(id, Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
            .unwrap();
    };
    set(&mut store, "head/lstm1/wx", &[1, 4], &[0.4, -0.2, 0.9, 0.3]);
    set(&mut store, "head/lstm1/wh", &[1, 4], &[0.0, 0.0, 0.0, 0.0]);
    set(&mut store, "head/lstm1/b", &[4], &[0.1, 0.0, -0.1, 0.2]);
    set(&mut store, "head/lstm2/wx", &[1, 4], &[1.0, 0.5, -0.5, 0.7]);
    set(&mut store, "head/lstm2/wh", &[1, 4], &[0.0, 0.0, 0.0, 0.0]);
    set(&mut store, "head/lstm2/b", &[4], &[0.0, 0.1, 0.2, -0.3]);
    set(&mut store, "head/out_w", &[1, 1], &[1.5]);
    set(&mut store, "head/out_b", &[1], &[0.05]);

    let x = -0.6;
    let step = |x: f64, wx: [f64; 4], b: [f64; 4]| {
        let i = sigmoid(x * wx[0] + b[0]);
        let f = sigmoid(x * wx[1] + b[1]);
        let g = (x * wx[2] + b[2]).tanh();
        let o = sigmoid(x * wx[3] + b[3]);
        let cell = i * g;
        let _ = f;
        o * cell.tanh()
    };
    let h1 = step(x, [0.4, -0.2, 0.9, 0.3], [0.1, 0.0, -0.1, 0.2]);
    let h2 = step(h1, [1.0, 0.5, -0.5, 0.7], [0.0, 0.1, 0.2, -0.3]);
    let want = h2 * 1.5 + 0.05;

    let mut c = Ctx::eval(&store);
    let xn = c.input(Tensor::new(vec![1, 1], vec![x]).unwrap());
    let y = head.forward(&mut c, xn).unwrap();
    assert!((c.value(y).data()[0] - want).abs() < 1e-14);
}

#[test]
fn predictions_are_causal_under_appended_frames() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(15);
    let head = RegressorHead::init(&mut store, "head", Some(4), 3, [4, 3], &mut rng);
    let mut drng = Rng::new(16);
    let frames = Tensor::rand_uniform(&[7, 4], 1.0, &mut drng);

    let mut c_full = Ctx::eval(&store);
    let x_full = c_full.input(frames.clone());
    let y_full = head.forward(&mut c_full, x_full).unwrap();

    let first4 = Tensor::new(vec![4, 4], frames.data()[..16].to_vec()).unwrap();
    let mut c_part = Ctx::eval(&store);
    let x_part = c_part.input(first4);
    let y_part = head.forward(&mut c_part, x_part).unwrap();

    for t in 0..4 {
        assert_eq!(
            c_full.value(y_full).at2(t, 0).to_bits(),
            c_part.value(y_part).at2(t, 0).to_bits()
        );
    }
}
