//! Every op's gradient against central differences, first and second order.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{central_gradient, directional_derivative, relative_error};
use rn_autodiff::{grad, no_grad, ConvSpec, Padding, Tensor, Var};

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Checks d(sum(f(x) * probe))/dx against finite differences.
fn check_unary(name: &str, x: Tensor, f: impl Fn(&Var) -> Var) {
    let out_shape = {
        let _g = no_grad();
        f(&Var::constant(x.clone())).shape().to_vec()
    };
    let probe = random(&out_shape, -1.0, 1.0, 99);
    let scalar = |t: &Tensor| {
        let _g = no_grad();
        f(&Var::constant(t.clone())).mul_const(&probe).sum().item()
    };
    let xv = Var::param(x.clone());
    let analytic = grad(&f(&xv).mul_const(&probe).sum(), &[&xv], false).unwrap();
    let numeric = central_gradient(scalar, &x, 1e-5, None);
    let err = relative_error(analytic[0].value().data(), &numeric, 1e-10);
    assert!(err < 1e-6, "{name}: relative error {err}");
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let x = random(&[2, 3, 2, 2], -1.5, 1.5, 1);
    let pos = random(&[2, 3, 2, 2], 0.2, 2.0, 2);
    let other = Var::constant(random(&[2, 3, 2, 2], 0.5, 1.5, 3));
    check_unary("square", x.clone(), |v| v.square());
    check_unary("exp", x.clone(), |v| v.exp());
    check_unary("softplus", x.clone(), |v| v.softplus());
    check_unary("sigmoid", x.clone(), |v| v.sigmoid());
    check_unary("normal_cdf", x.clone(), |v| v.normal_cdf());
    check_unary("sqrt", pos.clone(), |v| v.sqrt());
    check_unary("ln", pos.clone(), |v| v.ln());
    check_unary("abs", pos.clone(), |v| v.abs());
    check_unary("mul", x.clone(), |v| v.mul(&other));
    check_unary("div", x.clone(), |v| v.div(&other));
    check_unary("div_denominator", pos.clone(), |v| other.div(v));
    check_unary("sub", x.clone(), |v| other.sub(v));
    check_unary("self_product", x.clone(), |v| v.mul(v).add(v));
}

#[test]
fn reductions_and_broadcasts_match_finite_differences() {
    let x = random(&[2, 3, 2, 2], -1.0, 1.0, 4);
    check_unary("sum_batch", x.clone(), |v| {
        v.sum_batch().square().expand_batch(&[2, 3, 2, 2])
    });
    check_unary("sum_channels", x.clone(), |v| {
        v.sum_channels().square().expand_channels(&[2, 3, 2, 2])
    });
    check_unary("sum_broadcast", x.clone(), |v| v.sum().square().broadcast_to(&[2, 3, 2, 2]));
    check_unary("reshape", x, |v| v.reshape(&[6, 4]).unwrap().square().reshape(&[2, 3, 2, 2]).unwrap());
}

#[test]
fn convolutions_match_finite_differences() {
    for padding in [Padding::Zero, Padding::Circular] {
        let spec = ConvSpec::new(5, 2, 2, padding);
        let x = random(&[2, 3, 8, 8], -1.0, 1.0, 5);
        let w = random(&[4, 3, 5, 5], -0.3, 0.3, 6);
        let wv = Var::constant(w.clone());
        check_unary("conv/x", x.clone(), |v| v.conv2d(&wv, spec).unwrap());
        let xv = Var::constant(x.clone());
        check_unary("conv/w", w.clone(), |v| xv.conv2d(v, spec).unwrap());
        let y = random(&[2, 4, 4, 4], -1.0, 1.0, 7);
        check_unary("conv_t/y", y.clone(), |v| {
            v.conv_transpose2d(&wv, spec, (8, 8)).unwrap()
        });
        let yv = Var::constant(y);
        check_unary("conv_t/w", w.clone(), |v| {
            yv.conv_transpose2d(v, spec, (8, 8)).unwrap()
        });
    }
}

/// h(w) = || d/dx sum(tanh-ish(conv(x, w))) ||^2, differentiated in w by
/// double backprop vs finite differences of the first-order gradient norm.
#[test]
fn double_backprop_through_convolutions() {
    let spec = ConvSpec::new(3, 2, 1, Padding::Zero);
    let spec_t = ConvSpec::new(3, 2, 1, Padding::Zero);
    let x = random(&[1, 2, 6, 6], -1.0, 1.0, 8);
    let w = random(&[3, 2, 3, 3], -0.5, 0.5, 9);
    let w2 = Var::constant(random(&[3, 2, 3, 3], -0.5, 0.5, 10));

    let penalty = |w: &Var| -> Var {
        let xv = Var::param(x.clone());
        let h = xv.conv2d(w, spec).unwrap().softplus();
        let back = h.conv_transpose2d(&w2, spec_t, (6, 6)).unwrap().sigmoid();
        let out = back.square().sum().add(&h.normal_cdf().sum());
        let gx = &grad(&out, &[&xv], true).unwrap()[0];
        gx.square().sum()
    };

    let wv = Var::param(w.clone());
    let analytic = grad(&penalty(&wv), &[&wv], false).unwrap()[0].value().clone();
    let numeric = central_gradient(
        |t| penalty(&Var::param(t.clone())).item(),
        &w,
        1e-5,
        None,
    );
    let err = relative_error(analytic.data(), &numeric, 1e-10);
    assert!(err < 1e-6, "double backprop relative error {err}");
}

#[test]
fn third_order_scalar_derivative() {
    // f(x) = x^3 through repeated products; f''' = 6.
    let x = Var::param(Tensor::scalar(0.7));
    let f = x.mul(&x).mul(&x).sum();
    let d1 = &grad(&f, &[&x], true).unwrap()[0];
    let d2 = &grad(&d1.sum(), &[&x], true).unwrap()[0];
    let d3 = &grad(&d2.sum(), &[&x], false).unwrap()[0];
    assert!((d1.item() - 3.0 * 0.49).abs() < 1e-12);
    assert!((d2.item() - 6.0 * 0.7).abs() < 1e-12);
    assert!((d3.item() - 6.0).abs() < 1e-12);
}

#[test]
fn straight_through_rounding_and_clamp_masks() {
    let x = Var::param(Tensor::new(&[4], vec![-0.6, 0.2, 0.5, 1.7]).unwrap());
    let g = &grad(&x.round_ste().sum(), &[&x], false).unwrap()[0];
    assert_eq!(g.value().data(), &[1.0, 1.0, 1.0, 1.0]);
    let g = &grad(&x.clamp(0.0, 1.0).sum(), &[&x], false).unwrap()[0];
    assert_eq!(g.value().data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn unreachable_inputs_get_zero_gradient_and_no_grad_records_nothing() {
    let a = Var::param(Tensor::scalar(2.0));
    let b = Var::param(Tensor::scalar(3.0));
    let g = grad(&a.square().sum(), &[&a, &b], false).unwrap();
    assert_eq!(g[1].item(), 0.0);
    let _guard = no_grad();
    assert!(!a.square().requires_grad());
}

#[test]
fn first_order_results_are_detached() {
    let x = Var::param(Tensor::scalar(1.5));
    let g = &grad(&x.exp().sum(), &[&x], false).unwrap()[0];
    assert!(!g.requires_grad());
    let g = &grad(&x.exp().sum(), &[&x], true).unwrap()[0];
    assert!(g.requires_grad());
}

#[test]
fn directional_derivative_agrees_with_gradient() {
    let x = random(&[1, 1, 4, 4], -1.0, 1.0, 11);
    let dir = random(&[1, 1, 4, 4], -1.0, 1.0, 12);
    let f = |v: &Var| v.softplus().square().sum();
    let xv = Var::param(x.clone());
    let g = grad(&f(&xv), &[&xv], false).unwrap()[0].value().clone();
    let analytic: f64 = g.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
    let numeric = directional_derivative(|t| f(&Var::constant(t.clone())).item(), &x, &dir, 1e-5);
    assert!((analytic - numeric).abs() < 1e-7 * analytic.abs().max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// The gradient of <conv(x, w), y> w.r.t. x is linear in y.
    #[test]
    fn conv_input_gradient_is_linear_in_upstream(seed in 0u64..1000, a in -2.0f64..2.0) {
        let spec = ConvSpec::new(3, 1, 1, Padding::Circular);
        let x = Var::param(random(&[1, 2, 5, 5], -1.0, 1.0, seed));
        let w = Var::constant(random(&[2, 2, 3, 3], -1.0, 1.0, seed + 1));
        let y1 = random(&[1, 2, 5, 5], -1.0, 1.0, seed + 2);
        let y2 = y1.map(|v| a * v);
        let out = x.conv2d(&w, spec).unwrap();
        let g1 = grad(&out.mul_const(&y1).sum(), &[&x], false).unwrap()[0].value().clone();
        let g2 = grad(&out.mul_const(&y2).sum(), &[&x], false).unwrap()[0].value().clone();
        for (p, q) in g1.data().iter().zip(g2.data()) {
            prop_assert!((a * p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn softplus_and_sigmoid_stay_finite(v in -800.0f64..800.0) {
        let x = Var::constant(Tensor::scalar(v));
        prop_assert!(x.softplus().item().is_finite());
        let s = x.sigmoid().item();
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
