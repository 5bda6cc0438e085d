mod common;

use common::finite_diff::{central_gradient, relative_error};
use common::interior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rn_autodiff::{grad, Tensor, Var};
use robust_nic::attack::{attack_loss, init_attack, run_attack, AttackConfig, AttackQuantization, Branch};
use robust_nic::data::synthetic_images;
use robust_nic::train::{
    build_distill_batch, per_image_bpp, smooth_loss, teacher_objective, SmoothTerms, TrainConfig,
};
use robust_nic::{Codec, CodecConfig, ImageBatch, Quantizer};

fn input(seed: u64) -> ImageBatch {
    interior(&synthetic_images(1, 32, seed).remove(0), 0.3, 0.7)
}

fn indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..len)).collect()
}

/// Gradient of `objective` with respect to a few coordinates of every
/// parameter tensor, against central differences.
fn weight_gradient_error(codec: &Codec, objective: impl Fn(&Codec, bool) -> (Var, Vec<Var>)) -> f64 {
    let (loss, vars) = objective(codec, true);
    let grads = grad(&loss, &vars.iter().collect::<Vec<_>>(), false).unwrap();
    let names: Vec<String> = codec.params.names().cloned().collect();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for (k, name) in names.iter().enumerate() {
        for i in indices(codec.params.get(name).unwrap().len(), 2, 40 + k as u64) {
            a.push(grads[k].value().data()[i]);
            let mut probe = codec.clone();
            let h = 1e-5;
            let orig = probe.params.get(name).unwrap().data()[i];
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = objective(&probe, false).0.item();
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = objective(&probe, false).0.item();
            n.push((up - down) / (2.0 * h));
        }
    }
    relative_error(&a, &n, 1e-12)
}

#[test]
fn bpp_attack_lower_branch_matches_finite_differences() {
    let codec = Codec::new(CodecConfig::tiny(), 2).unwrap();
    let x = input(1);
    let cfg = AttackConfig {
        quantization: AttackQuantization::Passthrough,
        ..AttackConfig::bpp(1)
    };
    let mut state = init_attack(&x, &codec, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    state.noise = Tensor::from_fn(x.tensor().shape(), |_| rng.random_range(-0.01..0.01));
    let p = codec.params.bind(false);
    let nv = Var::param(state.noise.clone());
    let l = attack_loss(&state, &codec, &p, &nv, &cfg).unwrap();
    assert_eq!(l.branch, Branch::Lower);
    let g = grad(&l.loss, &[&nv], false).unwrap().remove(0);
    let idx = indices(x.tensor().len(), 32, 3);
    let analytic: Vec<f64> = idx.iter().map(|&i| g.value().data()[i]).collect();
    let numeric = central_gradient(
        |t| attack_loss(&state, &codec, &p, &Var::constant(t.clone()), &cfg).unwrap().loss.item(),
        &state.noise,
        1e-6,
        Some(&idx),
    );
    assert!(relative_error(&analytic, &numeric, 1e-12) < 1e-3);
}

#[test]
fn teacher_objective_weight_gradient() {
    let codec = Codec::new(CodecConfig::tiny(), 5).unwrap();
    let x = ImageBatch::stack(&[input(2), input(3)]).unwrap();
    let cfg = TrainConfig::default();
    let err = weight_gradient_error(&codec, |c, trainable| {
        let p = c.params.bind(trainable);
        let (loss, _) = teacher_objective(c, &p, &x, &mut Quantizer::noise(9), &cfg, 4).unwrap();
        (loss, p.vars().into_iter().cloned().collect())
    });
    assert!(err < 1e-2, "{err}");
}

#[test]
fn smooth_loss_terms_are_non_negative_and_additive() {
    let codec = Codec::new(CodecConfig::tiny(), 6).unwrap();
    let x = input(4);
    let all = smooth_loss(&codec, &x, &mut Quantizer::noise(1), SmoothTerms::ALL, 3).unwrap();
    let bpp = smooth_loss(&codec, &x, &mut Quantizer::noise(1), SmoothTerms { bpp: true, jacobian: false }, 3).unwrap();
    let jac = smooth_loss(&codec, &x, &mut Quantizer::noise(1), SmoothTerms { bpp: false, jacobian: true }, 3).unwrap();
    assert!(all.bpp > 0.0 && all.jacobian > 0.0);
    assert_eq!(bpp.jacobian, 0.0);
    assert_eq!(jac.bpp, 0.0);
    assert!((all.total - (bpp.total + jac.total)).abs() <= 1e-12 * all.total);
}

#[test]
fn attacks_leave_weights_untouched() {
    let codec = Codec::new(CodecConfig::tiny(), 7).unwrap();
    let before = codec.digest();
    let r = run_attack(&input(5), &codec, &AttackConfig::psnr(5)).unwrap();
    assert_eq!(codec.digest(), before);
    assert_eq!(r.trace.len(), 5);
    assert!(r.adversarial_image.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn distill_batch_layout() {
    let teacher = Codec::new(CodecConfig::tiny(), 8).unwrap();
    let model = Codec::new(CodecConfig::tiny(), 9).unwrap();
    let x = ImageBatch::stack(&[input(6), input(7), input(8)]).unwrap();
    let cfg = TrainConfig {
        psnr_iterations: 3,
        bpp_iterations: 3,
        ..TrainConfig::default()
    };
    let b = build_distill_batch(&x, &teacher, &model, &cfg, 1).unwrap();
    let items = b.x_new.items();
    let clean = x.items();
    assert_ne!(items[0], clean[0]);
    assert_ne!(items[1], clean[1]);
    assert_eq!(items[2], clean[2]);
    assert_eq!(b.bpp_tc, per_image_bpp(&teacher, &x).unwrap());
    assert!(build_distill_batch(&ImageBatch::stack(&[input(1), input(2)]).unwrap(), &teacher, &model, &cfg, 1).is_err());
}
