use super::*;

fn t64(shape: Shape, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn conv_1x1_identity_kernel_is_identity() {
    let x = Tensor::<f32>::from_fn([2, 3, 5, 4], |[n, c, h, w]| (n + 2 * c + 3 * h + 5 * w) as f32 * 0.1);
    let w = Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
    let b = Tensor::zeros([1, 3, 1, 1]);
    let y = Eager.conv2d(&x, &w, &b, ConvSpec::same(1)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_3x3_ones_sums_nine_taps() {
    let x = Tensor::<f32>::ones([1, 1, 3, 3]);
    let w = Tensor::ones([1, 1, 3, 3]);
    let b = Tensor::zeros([1, 1, 1, 1]);
    let y = Eager.conv2d(&x, &w, &b, ConvSpec::same(3)).unwrap();
    assert_eq!(y.at([0, 0, 1, 1]), 9.0);
    assert_eq!(y.at([0, 0, 0, 0]), 4.0);
    assert_eq!(y.at([0, 0, 0, 1]), 6.0);
}

#[test]
fn conv_zero_kernel_yields_bias() {
    let x = Tensor::<f32>::from_fn([1, 2, 4, 4], |[_, c, h, w]| (c + h * w) as f32);
    let w = Tensor::zeros([3, 2, 3, 3]);
    let b = Tensor::full([1, 3, 1, 1], 0.75);
    let y = Eager.conv2d(&x, &w, &b, ConvSpec::same(3)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.75));
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor::<f32>::ones([1, 2, 4, 4]);
    let w = Tensor::ones([1, 3, 3, 3]);
    let b = Tensor::zeros([1, 1, 1, 1]);
    let err = Eager.conv2d(&x, &w, &b, ConvSpec::same(3)).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "conv2d", .. }));
}

#[test]
fn gelu_reference_points() {
    let x = t64([1, 1, 1, 3], &[0.0, 1.0, -10.0]);
    let y = Eager.gelu(&x).unwrap();
    assert_eq!(y.data()[0], 0.0);
    let oracle = 0.5 * (1.0 + statrs::function::erf::erf(1.0 / 2f64.sqrt()));
    assert!((y.data()[1] - oracle).abs() < 1e-10, "{} vs {oracle}", y.data()[1]);
    assert!((y.data()[1] - 0.841345).abs() < 1e-6);
    assert!(y.data()[2] < 0.0 && y.data()[2] > -1e-3);
}

#[test]
fn maxpool_constant_and_window() {
    let c = Tensor::<f32>::full([1, 2, 4, 6], 0.3);
    let y = Eager.maxpool2(&c).unwrap();
    assert_eq!(y.shape(), [1, 2, 2, 3]);
    assert!(y.data().iter().all(|&v| v == 0.3));

    let x = t64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(Eager.maxpool2(&x).unwrap().item(), 4.0);
}

#[test]
fn maxpool_tie_routes_gradient_to_first_element() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64([1, 1, 2, 2], &[5.0; 4]));
    let y = g.maxpool2(&x).unwrap();
    assert_eq!(g.value(y).unwrap().item(), 5.0);
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_rejects_odd_sizes() {
    let x = Tensor::<f32>::zeros([1, 1, 3, 4]);
    assert!(Eager.maxpool2(&x).is_err());
}

#[test]
fn upsample_constant_and_ramp() {
    let c = Tensor::<f32>::full([1, 3, 3, 5], 0.42);
    let y = Eager.upsample2(&c).unwrap();
    assert_eq!(y.shape(), [1, 3, 6, 10]);
    assert!(y.data().iter().all(|&v| (v - 0.42).abs() < 1e-7));

    let row = t64([1, 1, 1, 2], &[0.0, 1.0]);
    let y = Eager.upsample2(&row).unwrap();
    assert_eq!(y.shape(), [1, 1, 2, 4]);
    assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn pool_after_upsample_is_identity_on_constants() {
    let c = Tensor::<f32>::full([1, 2, 4, 4], 0.6);
    let up = Eager.upsample2(&c).unwrap();
    let back = Eager.maxpool2(&up).unwrap();
    assert_eq!(back.shape(), c.shape());
    assert!(back.max_abs_diff(&c) < 1e-7);
}

#[test]
fn instance_norm_properties() {
    let ones = Tensor::<f32>::ones([1, 2, 1, 1]);
    let zeros = Tensor::<f32>::zeros([1, 2, 1, 1]);

    let constant = Tensor::<f32>::full([1, 2, 3, 3], 7.0);
    let y = Eager.instance_norm(&constant, &ones, &zeros).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = Tensor::<f32>::from_fn([2, 2, 4, 5], |[n, c, h, w]| ((n * 13 + c * 7 + h * 5 + w * 3) % 11) as f32 - 2.0);
    let y = Eager.instance_norm(&x, &ones, &zeros).unwrap();
    for plane in y.data().chunks_exact(20) {
        let mean: f32 = plane.iter().sum::<f32>() / 20.0;
        assert!(mean.abs() < 1e-5);
    }

    let bias = Tensor::<f32>::full([1, 2, 1, 1], 0.3);
    let y = Eager.instance_norm(&x, &zeros, &bias).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.3));
}

#[test]
fn broadcasting_binary_ops() {
    let a = Tensor::<f64>::from_fn([2, 3, 2, 2], |[n, c, h, w]| (n * 12 + c * 4 + h * 2 + w) as f64);
    let s = Tensor::scalar(2.0);
    let y = Eager.mul(&a, &s).unwrap();
    assert_eq!(y.at([1, 2, 1, 1]), 46.0);
    let m = Tensor::<f64>::from_fn([2, 1, 2, 2], |[n, _, h, w]| (n + h + w) as f64);
    let y = Eager.add(&a, &m).unwrap();
    assert_eq!(y.at([1, 2, 1, 0]), 22.0 + 2.0);
    let bad = Tensor::<f64>::zeros([1, 2, 2, 2]);
    assert!(Eager.add(&a, &bad).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn([1, 2, 3, 3], |[_, c, h, w]| (c + h + w) as f64));
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let sq = g.mul(&x, &x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn backward_rejects_foreign_and_non_scalar_vars() {
    let mut g1 = Graph::<f32>::new();
    let mut g2 = Graph::<f32>::new();
    let x = g1.leaf(Tensor::scalar(1.0));
    let l1 = g1.sum(x).unwrap();
    assert!(matches!(g2.backward(l1), Err(Error::ForeignVar)));
    let y = g2.leaf(Tensor::ones([1, 1, 2, 2]));
    assert!(matches!(g2.backward(y), Err(Error::NonScalarLoss(_))));
    assert!(g2.add(&x, &y).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f32>::new();
    let c = g.constant(Tensor::full([1, 1, 2, 2], 2.0));
    let x = g.leaf(Tensor::full([1, 1, 2, 2], 3.0));
    let p = g.mul(&c, &x).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn graph_and_eager_forward_agree_bitwise() {
    let x = Tensor::<f32>::from_fn([1, 3, 6, 5], |[_, c, h, w]| ((c * 31 + h * 7 + w * 3) % 17) as f32 / 17.0);
    let w = Tensor::from_fn([4, 3, 3, 3], |[o, i, y, z]| ((o * 5 + i * 3 + y * 2 + z) % 7) as f32 * 0.1 - 0.3);
    let b = Tensor::full([1, 4, 1, 1], 0.05);
    let eager = {
        let y = Eager.conv2d(&x, &w, &b, ConvSpec::same(3)).unwrap();
        let y = Eager.gelu(&y).unwrap();
        Eager.upsample2(&y).unwrap()
    };
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x), g.leaf(w), g.leaf(b));
    let y = g.conv2d(&xv, &wv, &bv, ConvSpec::same(3)).unwrap();
    let y = g.gelu(&y).unwrap();
    let y = g.upsample2(&y).unwrap();
    assert_eq!(g.value(y).unwrap(), &eager);
}
