use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed random weights, so every output coordinate
/// contributes a distinct amount to the checked scalar.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> crate::Result<Var> {
    let dims = g.dims(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(rand_tensor(&mut rng, &dims));
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

fn check_seeds(name: &str, dims: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var> + Copy) {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = dims.iter().map(|d| rand_tensor(&mut rng, d)).collect();
        let report = gradcheck(name, f, &inputs).unwrap();
        assert!(
            report.passed(TOL),
            "{name} seed {seed}: {} at {:?}",
            report.max_rel_error,
            report.worst_coordinate
        );
    }
}

#[test]
fn matmul_identity_and_selector() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
    let m = g.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

    let sel = g.constant(Tensor::from_f64(&[1, 2], &[1., 0.]).unwrap());
    let ab = g.constant(Tensor::from_f64(&[2, 1], &[7.5, -3.0]).unwrap());
    let r = g.matmul(sel, ab).unwrap();
    assert_eq!(g.value(r).dims(), &[1, 1]);
    assert_eq!(g.value(r).data(), &[7.5]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradcheck() {
    check_seeds("matmul", &[&[3, 4], &[4, 2]], |g, v| {
        let p = g.matmul(v[0], v[1])?;
        Ok(g.sum(p))
    });
}

#[test]
fn conv2d_zero_input_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 8, 8]));
    let k = g.constant(rand_tensor(&mut rng, &[4, 2, 3, 3]));
    for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
        let y = g.conv2d(x, k, stride, pad).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn conv2d_identity_kernel_reproduces_delta() {
    let mut g = Graph::<f64>::new();
    let mut img = vec![0.0; 25];
    img[12] = 1.0;
    let x = g.constant(Tensor::from_f64(&[1, 5, 5], &img).unwrap());
    let mut ker = vec![0.0; 9];
    ker[4] = 1.0;
    let k = g.constant(Tensor::from_f64(&[1, 1, 3, 3], &ker).unwrap());
    let y = g.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(g.value(y).dims(), &[1, 5, 5]);
    assert_eq!(g.value(y).data(), &img[..]);
}

#[test]
fn conv2d_replicate_padding_keeps_constant_images_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 6, 6], 0.7));
    let k = g.constant(rand_tensor(&mut rng, &[3, 2, 3, 3]));
    let y = g.conv2d_padded(x, k, 2, 1, PadMode::Replicate).unwrap();
    for plane in g.value(y).data().chunks(9) {
        assert!(plane.iter().all(|&v| v == plane[0]));
    }
    let z = g.conv2d(x, k, 2, 1).unwrap();
    assert_ne!(g.value(y).data(), g.value(z).data());
}

#[test]
fn conv2d_output_extent_and_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 7, 9]));
    let k = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
    let y = g.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(g.value(y).dims(), &[3, 4, 5]);
    let tiny = g.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(g.conv2d(tiny, k, 1, 0), Err(Error::Shape(_))));
    assert!(matches!(g.conv2d(x, k, 3, 0), Err(Error::Shape(_))));
}

#[test]
fn conv2d_gradcheck() {
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        check_seeds("conv2d", &[&[2, 8, 8], &[3, 2, 3, 3]], move |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            weighted_sum(g, y, 11)
        });
    }
}

#[test]
fn conv2d_replicate_gradcheck() {
    for stride in [1, 2] {
        check_seeds("conv2d_replicate", &[&[2, 6, 6], &[2, 2, 3, 3]], move |g, v| {
            let y = g.conv2d_padded(v[0], v[1], stride, 1, PadMode::Replicate)?;
            weighted_sum(g, y, 15)
        });
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2], &[0., 0.]).unwrap());
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    for c in [-1e3, -2.5, 0.0, 17.0, 1e3] {
        let x = g.constant(Tensor::from_f64(&[4], &[c; 4]).unwrap());
        let s = g.softmax(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn softmax_rejects_non_vector() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.softmax(x), Err(Error::Shape(_))));
    assert!(Tensor::<f64>::new(&[0], vec![]).is_err());
}

#[test]
fn softmax_gradcheck() {
    check_seeds("softmax", &[&[8]], |g, v| {
        let s = g.softmax(v[0])?;
        weighted_sum(g, s, 5)
    });
    check_seeds("softmax_rows", &[&[3, 5]], |g, v| {
        let s = g.softmax_rows(v[0])?;
        weighted_sum(g, s, 6)
    });
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::from_f64(&[2], &[0., 0.]).unwrap());
    let l = g.cross_entropy(z, 0).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let z = g.constant(Tensor::from_f64(&[2], &[1000., 0.]).unwrap());
    let l = g.cross_entropy(z, 0).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);
    let l = g.cross_entropy(z, 1).unwrap();
    assert!((g.value(l).item() - 1000.0).abs() < 1e-9);

    let z = g.constant(Tensor::from_f64(&[7], &[3.0; 7]).unwrap());
    let l = g.cross_entropy(z, 4).unwrap();
    assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);
    assert!(matches!(g.cross_entropy(z, 7), Err(Error::Index(_))));
}

#[test]
fn cross_entropy_gradcheck() {
    check_seeds("cross_entropy", &[&[10]], |g, v| g.cross_entropy(v[0], 3));
}

#[test]
fn regression_loss_examples() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::scalar(55.0));
    for kind in ["mae", "mse", "smooth_l1", "huber"] {
        let kind = RegressionKind::parse(kind).unwrap();
        let l = g.regression_loss(p, 55.0, kind, 1.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
    let p = g.constant(Tensor::scalar(57.0));
    let mae = g.regression_loss(p, 55.0, RegressionKind::Mae, 1.0).unwrap();
    let mse = g.regression_loss(p, 55.0, RegressionKind::Mse, 1.0).unwrap();
    let hub = g.regression_loss(p, 55.0, RegressionKind::Huber, 1.0).unwrap();
    assert_eq!(g.value(mae).item(), 2.0);
    assert_eq!(g.value(mse).item(), 4.0);
    assert_eq!(g.value(hub).item(), 1.5);
    assert!(matches!(RegressionKind::parse("l3"), Err(Error::Config(_))));
}

#[test]
fn mae_subgradient_at_kink_is_zero() {
    let mut g = Graph::<f64>::new();
    let p = g.param(&Tensor::scalar(42.0));
    let l = g.regression_loss(p, 42.0, RegressionKind::Mae, 1.0).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(p).unwrap(), &[0.0]);
}

#[test]
fn regression_loss_gradcheck() {
    // Residuals stay away from the piecewise boundaries at |e| = 0 and 1.
    for kind in ["mae", "mse", "smooth_l1", "huber"] {
        let kind = RegressionKind::parse(kind).unwrap();
        for (seed, x) in [0.3, -0.6, 2.7, -4.1, 1.6].into_iter().enumerate() {
            let input = Tensor::scalar(10.0 + x);
            let r = gradcheck(kind.as_str(), |g, v| g.regression_loss(v[0], 10.0, kind, 1.0), &[input]).unwrap();
            assert!(r.passed(TOL), "{kind:?} seed {seed}: {}", r.max_rel_error);
        }
    }
}

#[test]
fn elementwise_and_pooling_gradchecks() {
    check_seeds("tanh", &[&[2, 3, 4]], |g, v| {
        let y = g.tanh(v[0]);
        weighted_sum(g, y, 1)
    });
    check_seeds("sigmoid", &[&[6]], |g, v| {
        let y = g.sigmoid(v[0]);
        weighted_sum(g, y, 2)
    });
    check_seeds("add_sub_mul", &[&[5], &[5]], |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(v[0], v[1])?;
        let m = g.mul(a, s)?;
        let m = g.scale(m, 1.7);
        let m = g.add_scalar(m, 0.3);
        weighted_sum(g, m, 3)
    });
    check_seeds("div", &[&[4], &[4]], |g, v| {
        let d = g.add_scalar(v[1], 3.0);
        let q = g.div(v[0], d)?;
        weighted_sum(g, q, 4)
    });
    check_seeds("avg_pool2d", &[&[2, 4, 6]], |g, v| {
        let y = g.avg_pool2d(v[0], 2)?;
        weighted_sum(g, y, 7)
    });
    check_seeds("global_avg_pool", &[&[3, 4, 4]], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        weighted_sum(g, y, 8)
    });
    check_seeds("bias_channels", &[&[3, 2, 2], &[3]], |g, v| {
        let y = g.bias_channels(v[0], v[1])?;
        weighted_sum(g, y, 9)
    });
    check_seeds("l2_normalize_rows", &[&[3, 4]], |g, v| {
        let y = g.l2_normalize_rows(v[0])?;
        weighted_sum(g, y, 10)
    });
}

#[test]
fn structural_op_gradchecks() {
    check_seeds("transpose_slice_concat", &[&[3, 4]], |g, v| {
        let t = g.transpose(v[0])?;
        let a = g.slice_cols(t, 0, 1)?;
        let b = g.slice_cols(t, 1, 2)?;
        let c = g.concat_cols(&[b, a])?;
        let r = g.row(c, 2)?;
        let m = g.mean_rows(c)?;
        let both = g.add(r, m)?;
        let st = g.stack_rows(&[both, r])?;
        let st = g.reshape(st, &[6])?;
        weighted_sum(g, st, 12)
    });
    check_seeds("crop_assemble", &[&[2, 4, 4]], |g, v| {
        let q: Vec<Var> = [(0, 0), (0, 2), (2, 0), (2, 2)]
            .iter()
            .map(|&(t, l)| g.crop(v[0], t, l, 2, 2).unwrap())
            .collect();
        let a = g.assemble_quadrants([q[3], q[1], q[2], q[0]])?;
        weighted_sum(g, a, 13)
    });
    for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
        check_seeds("upsample2x", &[&[1, 3, 4]], move |g, v| {
            let u = g.upsample2x(v[0], mode)?;
            weighted_sum(g, u, 14)
        });
    }
}

#[test]
fn gradcheck_rejects_vector_output() {
    let t = Tensor::<f64>::zeros(&[3]);
    let r = gradcheck("id", |g, v| g.tanh(v[0]).pipe_ok(), &[t]);
    assert!(matches!(r, Err(Error::Contract(_))));
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> crate::Result<Self> {
        Ok(self)
    }
}
impl PipeOk for Var {}

#[test]
fn gradcheck_catches_a_wrong_gradient() {
    // A tape whose output silently drops a dependency must be reported.
    let x = Tensor::from_f64(&[2], &[0.4, -0.2]).unwrap();
    let r = gradcheck(
        "broken",
        |g, v| {
            let detached = g.constant(g.value(v[0]).clone());
            let y = g.mul(v[0], detached)?;
            Ok(g.sum(y))
        },
        &[x],
    )
    .unwrap();
    assert!(r.max_rel_error > 0.4);
}

#[test]
fn f32_graph_matches_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 6, 6]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let mut g64 = Graph::<f64>::new();
    let (a, b) = (g64.constant(x.clone()), g64.constant(k.clone()));
    let y64 = g64.conv2d(a, b, 2, 1).unwrap();
    let mut g32 = Graph::<f32>::new();
    let (a, b) = (g32.constant(x.cast()), g32.constant(k.cast()));
    let y32 = g32.conv2d(a, b, 2, 1).unwrap();
    for (p, q) in g64.value(y64).data().iter().zip(g32.value(y32).data()) {
        assert!((p - *q as f64).abs() < 1e-5);
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in prop::collection::vec(-30.0f64..30.0, 1..16),
            shift in -100.0f64..100.0,
        ) {
            let mut g = Graph::<f64>::new();
            let a = g.constant(Tensor::new(&[xs.len()], xs.clone()).unwrap());
            let b = g.constant(Tensor::new(&[xs.len()], xs.iter().map(|v| v + shift).collect()).unwrap());
            let sa = g.softmax(a).unwrap();
            let sb = g.softmax(b).unwrap();
            let total: f64 = g.value(sa).data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
                prop_assert!(*p > 0.0);
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(
            xs in prop::collection::vec(-50.0f64..50.0, 1..12),
            pick in 0usize..12,
        ) {
            let label = pick % xs.len();
            let mut g = Graph::<f64>::new();
            let z = g.constant(Tensor::new(&[xs.len()], xs).unwrap());
            let l = g.cross_entropy(z, label).unwrap();
            prop_assert!(g.value(l).item() >= 0.0);
        }
    }
}
