use cada::ops::{avg_pool, batch_norm, conv2d, fft2, ifft2, relu, softmax_cross_entropy, ConvParams, Mode, Pool2d, RunningStats};
use cada::reference;
use cada::tensor::{Shape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn identity_kernel_reproduces_input() {
    let x = Tensor::from_fn(Shape::new(1, 2, 5, 4), |_, c, y, w| (c * 20 + y * 4 + w) as f64);
    let mut w = Tensor::zeros(Shape::new(2, 1, 3, 3));
    w.set(0, 0, 1, 1, 1.0);
    w.set(1, 0, 1, 1, 1.0);
    let p = ConvParams::new(w, None, 1, 1, 2).unwrap();
    assert_eq!(conv2d(&x, &p).unwrap(), x);
}

#[test]
fn ones_kernel_counts_neighbourhood() {
    let x = Tensor::full(Shape::new(1, 1, 5, 5), 2.5);
    let p = ConvParams::new(Tensor::full(Shape::new(1, 1, 3, 3), 1.0), None, 1, 1, 1).unwrap();
    let y = conv2d(&x, &p).unwrap();
    assert_eq!(y.at(0, 0, 2, 2), 22.5);
    assert_eq!(y.at(0, 0, 0, 0), 10.0);
    assert_eq!(y.at(0, 0, 0, 2), 15.0);
}

#[test]
fn relu_clamps_negatives() {
    let x = tensor(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]);
    assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn average_of_constant_is_constant() {
    let x = Tensor::full(Shape::new(2, 3, 6, 6), -1.75);
    let y = avg_pool(&x, Pool2d::new(2, 2, 0)).unwrap();
    assert_eq!(y.shape(), Shape::new(2, 3, 3, 3));
    assert!(y.data().iter().all(|&v| v == -1.75));
}

#[test]
fn uniform_logits_cost_log_of_class_count() {
    let logits = Tensor::<f64>::zeros(Shape::new(3, 10, 1, 1));
    let (loss, grad) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
    assert!(grad.sum().abs() < 1e-12);
}

#[test]
fn label_out_of_range_is_rejected() {
    let logits = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
    assert!(softmax_cross_entropy(&logits, &[3]).is_err());
}

#[test]
fn batch_norm_standardizes_in_train_mode() {
    let x = Tensor::from_fn(Shape::new(4, 2, 3, 3), |n, c, y, w| (n * 7 + c * 3 + y * y + w) as f64 * 0.5 - 3.0);
    let mut stats = RunningStats::new(2);
    let (y, _) = batch_norm(&x, &[1.0, 1.0], &[0.0, 0.0], &mut stats, Mode::Train).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.plane(n, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let x = Tensor::full(Shape::new(1, 1, 2, 2), 3.0);
    let mut stats = RunningStats::<f64> { mean: vec![1.0], var: vec![4.0 - 1e-5] };
    let (y, _) = batch_norm(&x, &[2.0], &[0.5], &mut stats, Mode::Eval).unwrap();
    assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn conv_rejects_mismatched_groups() {
    let w = Tensor::<f64>::zeros(Shape::new(3, 1, 3, 3));
    assert!(ConvParams::new(w, None, 1, 1, 2).is_err());
}

#[test]
fn fft_of_delta_is_flat_and_constant_is_dc() {
    let mut delta = vec![0.0; 12];
    delta[0] = 1.0;
    let s = fft2(&delta, 3, 4);
    assert!(s.iter().all(|v| (v.re - 1.0 / 12f64.sqrt()).abs() < 1e-12 && v.im.abs() < 1e-12));
    let s = fft2(&[2.0; 12], 3, 4);
    assert!((s[0].re - 2.0 * 12f64.sqrt()).abs() < 1e-12);
    assert!(s[1..].iter().all(|v| v.norm() < 1e-12));
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_naive_loops(
        (cin_g, cout_g, groups) in (1usize..3, 1usize..3, 1usize..3),
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        let (cin, cout) = (cin_g * groups, cout_g * groups);
        let mut rng = cada::nn::Initializer::seeded(seed);
        let x = rng.normal::<f64>(Shape::new(2, cin, 6, 5), 1.0);
        let w = rng.normal::<f64>(Shape::new(cout, cin_g, k, k), 1.0);
        let b = rng.normal::<f64>(Shape::new(cout, 1, 1, 1), 1.0);
        let p = ConvParams::new(w, Some(b), stride, k / 2, groups).unwrap();
        let fast = conv2d(&x, &p).unwrap();
        prop_assert!(fast.max_abs_diff(&reference::conv2d(&x, &p)) < 1e-12);
    }

    #[test]
    fn conv_is_linear_in_input(a in -3.0..3.0f64, b in -3.0..3.0f64, xs in values(50), ys in values(50), ws in values(18)) {
        let s = Shape::new(1, 2, 5, 5);
        let (x, y) = (tensor(s, xs), tensor(s, ys));
        let p = ConvParams::new(tensor(Shape::new(1, 2, 3, 3), ws), None, 1, 1, 1).unwrap();
        let mixed = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d(&mixed, &p).unwrap();
        let rhs = conv2d(&x, &p).unwrap().scale(a).add(&conv2d(&y, &p).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn fft_round_trips(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = cada::nn::Initializer::seeded(seed);
        let plane = rng.normal::<f64>(Shape::new(1, 1, h, w), 1.0).into_vec();
        let back = ifft2(&fft2(&plane, h, w), h, w);
        for (a, b) in plane.iter().zip(&back) {
            prop_assert!((a - b.re).abs() < 1e-10 && b.im.abs() < 1e-10);
        }
    }

    #[test]
    fn relu_output_is_nonnegative_and_idempotent(xs in values(24)) {
        let x = tensor(Shape::new(2, 3, 2, 2), xs);
        let y = relu(&x);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(relu(&y), y);
    }

    #[test]
    fn cross_entropy_is_nonnegative_with_zero_sum_gradient(xs in values(12), labels in prop::collection::vec(0usize..4, 3)) {
        let logits = tensor(Shape::new(3, 4, 1, 1), xs);
        let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        for n in 0..3 {
            prop_assert!(grad.sample(n).iter().sum::<f64>().abs() < 1e-12);
        }
    }
}

#[test]
fn fft_matches_direct_dft_on_odd_plane() {
    let plane: Vec<f64> = (0..35).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
    let complex: Vec<_> = plane.iter().map(|&v| cada::ops::fft::Complex::new(v, 0.0)).collect();
    let direct = reference::dft2(&complex, 5, 7, false);
    for (a, b) in fft2(&plane, 5, 7).iter().zip(&direct) {
        assert!((a - b).norm() < 1e-10);
    }
}
