use ndarray::{Array4, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osuda_core::augmentation::{ArchitectureSpec, AugmenterState, EncoderKind, Embedding, Variant, ENCODER_STRIDE};
use osuda_core::autograd::Graph;
use osuda_core::data::ImageBatch;
use osuda_core::gradcheck::check_input_gradient;
use osuda_core::nn::Module;

fn images(seed: u64, n: usize, h: usize, w: usize) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch::new(Array4::from_shape_fn((n, 3, h, w), |_| rng.gen_range(0.0..1.0)), None).unwrap()
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::SharedEncoder), Just(Variant::DisentangledEncoders)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_keeps_shape_and_stays_inside_unit_interval(
        v in variant(), n in 1..=3usize, hb in 4..=6usize, wb in 4..=6usize, seed in 0..100u64, lambda in 0.0..=1.0f64
    ) {
        let (h, w) = (hb * ENCODER_STRIDE, wb * ENCODER_STRIDE);
        let aum = AugmenterState::new(v, ArchitectureSpec::miniature(), seed);
        let xs = images(seed, n, h, w);
        let xt = images(seed + 1, 1, h, w);
        let lam = (v == Variant::SharedEncoder).then_some(lambda);
        let out = aum.augment_images(&xs, &xt, lam).unwrap();
        prop_assert_eq!(out.data.dim(), xs.data.dim());
        prop_assert!(out.data.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn encoder_reduces_spatial_size_by_eight(hb in 4..=8usize, wb in 4..=8usize) {
        let aum = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 0);
        let x = images(0, 1, hb * 8, wb * 8);
        for kind in [EncoderKind::Style, EncoderKind::Content] {
            let z = aum.encode_images(&x, kind).unwrap();
            prop_assert_eq!(z.0.dim(), (1, ArchitectureSpec::miniature().embedding_channels(), hb, wb));
        }
    }

    #[test]
    fn lambda_one_returns_source_embedding_bitwise(seed in 0..50u64) {
        let aum = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), seed);
        let zs = aum.encode_images(&images(seed, 2, 32, 32), EncoderKind::Shared).unwrap();
        let zt = aum.encode_images(&images(seed + 7, 1, 32, 32), EncoderKind::Shared).unwrap();
        let mixed = Embedding::mixup(&zs, &zt, 1.0).unwrap();
        prop_assert!(mixed.0.iter().zip(zs.0.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn reconstruction_gradient_reaches_every_parameter() {
    let aum = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 4);
    let x = images(4, 2, 32, 32);
    let mut g = Graph::new();
    let xv = g.constant(x.to_tensor());
    let l = aum.reconstruction_loss(&mut g, &xv).unwrap();
    let grads = g.backward(&l).unwrap();
    let mut names = Vec::new();
    aum.visit(&mut |p| names.push(p.name.clone()));
    assert!(!names.is_empty());
    for n in &names {
        let gr = grads.get(n).unwrap_or_else(|| panic!("no gradient for {n}"));
        assert!(gr.iter().any(|v| *v != 0.0), "zero gradient for {n}");
    }
}

#[test]
fn reconstruction_parameter_gradient_matches_finite_differences() {
    let aum = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 5);
    let x = images(5, 1, 32, 32).to_tensor();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let l = aum.reconstruction_loss(&mut g, &xv).unwrap();
    let grads = g.backward(&l).unwrap();
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    aum.visit(&mut |p| names.push((p.name.clone(), p.value.len())));
    for (name, len) in names.iter().step_by(3) {
        let analytic = grads.get(name).unwrap();
        for idx in [0, len / 2, len - 1] {
            let eval = |delta: f64| {
                let mut m = aum.clone();
                m.visit_mut(&mut |p| {
                    if &p.name == name {
                        let v = p.value_mut();
                        let slot = v.iter_mut().nth(idx).unwrap();
                        *slot += delta;
                    }
                });
                m.reconstruction_loss_value(&ImageBatch::new(x.clone().into_dimensionality().unwrap(), None).unwrap()).unwrap()
            };
            let h = 1e-5;
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = *analytic.iter().nth(idx).unwrap();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn reconstruction_input_gradient_checks() {
    let aum = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 6);
    let x = ArrayD::from_shape_fn(IxDyn(&[1, 3, 32, 32]), |d| 0.2 + 0.6 * ((d[1] * 1024 + d[2] * 32 + d[3]) as f64 * 0.37).sin().abs());
    let r = check_input_gradient(&x, 1e-5, |g, v| aum.reconstruction_loss(g, v)).unwrap();
    assert!(r.relative_error < 1e-3, "{}", r.relative_error);
}

#[test]
fn shared_and_disentangled_augmenters_produce_different_images() {
    let xs = images(1, 2, 32, 32);
    let xt = images(2, 1, 32, 32);
    let se = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 0).augment_images(&xs, &xt, Some(0.8)).unwrap();
    let de = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 0).augment_images(&xs, &xt, None).unwrap();
    let mad = (&se.data - &de.data).mapv(f64::abs).mean().unwrap();
    assert!(mad > 0.0);
}

#[test]
fn lambda_is_required_for_se_and_ignored_by_de() {
    let xs = images(1, 1, 32, 32);
    let xt = images(2, 1, 32, 32);
    let se = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 0);
    let de = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 0);
    assert!(se.augment_images(&xs, &xt, None).is_err());
    assert_eq!(de.augment_images(&xs, &xt, Some(0.5)).unwrap(), de.augment_images(&xs, &xt, None).unwrap());
    assert!(se.reconstruction_loss_value(&xs).is_err());
}

#[test]
fn non_multiple_of_eight_is_rejected() {
    let aum = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 0);
    assert!(aum.augment_images(&images(0, 1, 30, 32), &images(1, 1, 30, 32), None).is_err());
}

#[test]
fn se_at_lambda_one_ignores_the_target() {
    let aum = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 8);
    let xs = images(1, 2, 32, 32);
    let a = aum.augment_images(&xs, &images(2, 1, 32, 32), Some(1.0)).unwrap();
    let b = aum.augment_images(&xs, &images(3, 1, 32, 32), Some(1.0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn reconstruction_loss_matches_elementwise_oracle() {
    let aum = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 9);
    let x = images(9, 3, 16, 24);
    // T(x, x) pairs each image with itself, so run them one at a time.
    let mut total = 0.0;
    for i in 0..3 {
        let xi = ImageBatch::new(x.data.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned(), None).unwrap();
        let out = aum.augment_images(&xi, &xi, None).unwrap();
        let mut s = 0.0;
        for (a, b) in out.data.iter().zip(xi.data.iter()) {
            s += (a - b) * (a - b);
        }
        total += s / xi.data.len() as f64;
    }
    let oracle = total / 3.0;
    let got = aum.reconstruction_loss_value(&x).unwrap();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}
