use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = random(shape, seed);
    let data = t.data().iter().map(|v| 0.5 + v.abs()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `v` to a scalar with fixed random weights so every output element matters.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var, AutodiffError> {
    let w = g.input(random(g.shape(v), seed ^ 0xabcd));
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

fn check<F>(f: F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    finite_difference_check(f, params, 1e-5, Coordinates::All)
        .unwrap()
        .max_rel_error
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::new();
    let x = random(&[2, 1, 4, 5], 1);
    let xv = g.input(x.clone());
    let w = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, w, Window::new(1, 0)).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_matches_direct_loops() {
    let x: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    let k: Vec<f64> = vec![1.0, -1.0, 0.5, 2.0];
    let mut expected = [0.0; 4];
    for oy in 0..2 {
        for ox in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    expected[oy * 2 + ox] += x[(oy + i) * 3 + ox + j] * k[i * 2 + j];
                }
            }
        }
    }
    let mut g = Graph::new();
    let xv = g.input(Tensor::new(vec![1, 1, 3, 3], x).unwrap());
    let kv = g.input(Tensor::new(vec![1, 1, 2, 2], k).unwrap());
    let y = g.conv2d(xv, kv, Window::new(1, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    for (a, b) in g.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    // [1*1 + 2*-1 + 4*.5 + 5*2] = 11
    assert!((expected[0] - 11.0).abs() < 1e-12);
}

#[test]
fn strided_padded_conv_shape_is_ceil_half() {
    let mut g = Graph::new();
    let x = g.input(random(&[1, 2, 7, 6], 3));
    let w = g.input(random(&[4, 2, 3, 3], 4));
    let y = g.conv2d(x, w, Window::new(2, 1)).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 3]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn mean_gradient_is_one_over_n() {
    let mut g = Graph::new();
    let x = g.param(random(&[7], 5));
    let m = g.mean(x);
    let grads = g.backward(m).unwrap();
    assert!(grads.get(x).data().iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
}

#[test]
fn log_softmax_gradient_is_p_minus_y() {
    let logits = Tensor::new(vec![1, 2], vec![0.3, -1.2]).unwrap();
    let mut g = Graph::new();
    let z = g.param(logits.clone());
    let p = g.softmax(z).unwrap();
    let lp = g.log(p);
    let picked = g.gather(lp, &[1]).unwrap();
    let loss = g.scale(picked, -1.0);
    let loss = g.sum(loss);
    let grad = g.backward(loss).unwrap().get(z);
    let probs = g.value(p).data().to_vec();
    assert!((grad.data()[0] - probs[0]).abs() < 1e-12);
    assert!((grad.data()[1] - (probs[1] - 1.0)).abs() < 1e-12);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut g = Graph::new();
    let a = g.param(random(&[3], 1));
    let b = g.param(random(&[2, 2], 2));
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(b), Tensor::zeros(&[2, 2]));
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
    let c = g.input(Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, c), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.input(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(
        g.conv2d(x, w, Window::new(1, 1)),
        Err(AutodiffError::ShapeMismatch { op: "conv2d", .. })
    ));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let a = g.param(random(&[3], 1));
    assert_eq!(g.backward(a).unwrap_err(), AutodiffError::NonScalarLoss(vec![3]));
}

#[test]
fn central_difference_is_exact_for_quadratic() {
    let x = Tensor::new(vec![1], vec![3.0]).unwrap();
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    assert!((g.backward(s).unwrap().get(v).data()[0] - 6.0).abs() < 1e-12);
    let err = check(
        |g, p| {
            let sq = g.mul(p[0], p[0])?;
            Ok(g.sum(sq))
        },
        &[x],
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn zero_function_has_zero_gradients() {
    let x = random(&[4], 9);
    let err = check(
        |g, p| {
            let z = g.scale(p[0], 0.0);
            Ok(g.sum(z))
        },
        &[x],
    );
    assert_eq!(err, 0.0);
}

#[test]
fn batchnorm_train_updates_running_stats() {
    let mut g = Graph::new();
    let x = g.input(random(&[3, 2, 2, 2], 11));
    let gamma = g.param(Tensor::full(&[2], 1.0));
    let beta = g.param(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm2d(x, gamma, beta, BatchNormMode::Train).unwrap();
    let stats = stats.unwrap();
    // normalized output has zero mean per channel
    let ys = g.value(y).data();
    for ch in 0..2 {
        let m: f64 = (0..3).flat_map(|b| &ys[(b * 2 + ch) * 4..(b * 2 + ch + 1) * 4]).sum::<f64>() / 12.0;
        assert!(m.abs() < 1e-12);
    }
    let mut running = RunningStats::new(2);
    running.update(&stats, BN_MOMENTUM);
    for ch in 0..2 {
        assert!((running.mean[ch] - 0.1 * stats.mean[ch]).abs() < 1e-15);
        assert!((running.var[ch] - (0.9 + 0.1 * stats.var[ch])).abs() < 1e-15);
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut worst: Vec<(&str, f64)> = Vec::new();
        worst.push((
            "matmul",
            check(|g, p| { let y = g.matmul(p[0], p[1])?; project(g, y, seed) }, &[random(&[3, 4], seed), random(&[4, 2], seed + 50)]),
        ));
        worst.push((
            "add_bias",
            check(|g, p| { let y = g.add_bias(p[0], p[1])?; project(g, y, seed) }, &[random(&[3, 4], seed), random(&[4], seed + 50)]),
        ));
        worst.push((
            "add",
            check(|g, p| { let y = g.add(p[0], p[1])?; project(g, y, seed) }, &[random(&[5], seed), random(&[5], seed + 50)]),
        ));
        worst.push((
            "mul",
            check(|g, p| { let y = g.mul(p[0], p[1])?; project(g, y, seed) }, &[random(&[5], seed), random(&[5], seed + 50)]),
        ));
        worst.push((
            "affine",
            check(|g, p| { let y = g.affine(p[0], -1.5, 0.25); project(g, y, seed) }, &[random(&[5], seed)]),
        ));
        worst.push((
            "pow",
            check(|g, p| { let y = g.powf(p[0], 2.5); project(g, y, seed) }, &[positive(&[5], seed)]),
        ));
        worst.push((
            "clamp",
            check(|g, p| { let y = g.clamp(p[0], -0.5, 0.5); project(g, y, seed) }, &[random(&[8], seed)]),
        ));
        worst.push((
            "relu",
            check(|g, p| { let y = g.relu(p[0]); project(g, y, seed) }, &[random(&[8], seed)]),
        ));
        worst.push((
            "log",
            check(|g, p| { let y = g.log(p[0]); project(g, y, seed) }, &[positive(&[5], seed)]),
        ));
        worst.push((
            "softmax",
            check(|g, p| { let y = g.softmax(p[0])?; project(g, y, seed) }, &[random(&[3, 4], seed)]),
        ));
        worst.push((
            "mean",
            check(|g, p| { let y = g.mul(p[0], p[0])?; Ok(g.mean(y)) }, &[random(&[6], seed)]),
        ));
        worst.push((
            "gather",
            check(|g, p| { let y = g.gather(p[0], &[1, 0, 2])?; project(g, y, seed) }, &[random(&[3, 3], seed)]),
        ));
        worst.push((
            "conv2d",
            check(
                |g, p| { let y = g.conv2d(p[0], p[1], Window::new(2, 1))?; project(g, y, seed) },
                &[random(&[2, 2, 5, 4], seed), random(&[3, 2, 3, 3], seed + 50)],
            ),
        ));
        worst.push((
            "batch_norm2d/train",
            check(
                |g, p| { let (y, _) = g.batch_norm2d(p[0], p[1], p[2], BatchNormMode::Train)?; project(g, y, seed) },
                &[random(&[2, 3, 3, 2], seed), positive(&[3], seed + 50), random(&[3], seed + 60)],
            ),
        ));
        let (rm, rv) = (random(&[3], seed + 70), positive(&[3], seed + 80));
        worst.push((
            "batch_norm2d/eval",
            check(
                |g, p| {
                    let mode = BatchNormMode::Eval { mean: rm.data(), var: rv.data() };
                    let (y, _) = g.batch_norm2d(p[0], p[1], p[2], mode)?;
                    project(g, y, seed)
                },
                &[random(&[2, 3, 3, 2], seed), positive(&[3], seed + 50), random(&[3], seed + 60)],
            ),
        ));
        worst.push((
            "max_pool2d",
            check(|g, p| { let y = g.max_pool2d(p[0], 3, Window::new(2, 1))?; project(g, y, seed) }, &[random(&[2, 2, 5, 5], seed)]),
        ));
        worst.push((
            "global_avg_pool",
            check(|g, p| { let y = g.global_avg_pool(p[0])?; project(g, y, seed) }, &[random(&[2, 3, 3, 4], seed)]),
        ));
        for (name, err) in worst {
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }
}

fn softmax_row(v: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
    let y = g.softmax(x).unwrap();
    g.value(y).data().to_vec()
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(
        v in prop::collection::vec(-30.0f64..30.0, 1..8),
        shift in -50.0f64..50.0,
    ) {
        let p = softmax_row(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        for (a, b) in p.iter().zip(softmax_row(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..16)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![v.len()], v).unwrap());
        let a = g.relu(x);
        let b = g.relu(a);
        prop_assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = random(&[2, 3], seed);
        let grad_of = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let f = g.softmax(v).unwrap();
            let f = project(&mut g, f, seed).unwrap();
            let h = g.mul(v, v).unwrap();
            let h = g.sum(h);
            let f = g.scale(f, ca);
            let h = g.scale(h, cb);
            let total = g.add(f, h).unwrap();
            g.backward(total).unwrap().get(v)
        };
        let combined = grad_of(a, b);
        let (gf, gh) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
        for i in 0..combined.len() {
            let lin = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((combined.data()[i] - lin).abs() < 1e-10);
        }
    }
}
