use ndarray::{Array2, Array4};
use proptest::prelude::*;

use osuda_core::alignment::{FeatureExtractor, FeatureMap};
use osuda_core::data::ImageBatch;
use osuda_core::nn::Module;

fn map_strategy(max_n: usize) -> impl Strategy<Value = Array4<f64>> {
    (1..=max_n, 1..=6usize, 1..=5usize, 1..=5usize).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-3.0..3.0f64, n * c * h * w)
            .prop_map(move |v| Array4::from_shape_vec((n, c, h, w), v).unwrap())
    })
}

/// Cyclic Jacobi rotations; returns the eigenvalues of a symmetric matrix.
fn symmetric_eigenvalues(mut a: Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[[i, j]].powi(2)).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).collect()
}

#[test]
fn jacobi_oracle_recovers_known_spectrum() {
    let a = Array2::from_shape_vec((2, 2), vec![2.0, 1.0, 1.0, 2.0]).unwrap();
    let mut ev = symmetric_eigenvalues(a);
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_is_symmetric_and_psd(data in map_strategy(2)) {
        let g = FeatureMap::new(data, "relu1_2").gram().unwrap();
        for m in g.0.outer_iter() {
            prop_assert!(m.iter().zip(m.t().iter()).all(|(a, b)| (a - b).abs() < 1e-12));
            let ev = symmetric_eigenvalues(m.to_owned());
            prop_assert!(ev.iter().all(|&e| e >= -1e-5), "{ev:?}");
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_identical_maps(a in map_strategy(3), shift in -1.0..1.0f64) {
        let fa = FeatureMap::new(a.clone(), "relu2_2");
        let fb = FeatureMap::new(a.mapv(|v| v + shift), "relu2_2");
        prop_assert_eq!(fa.style_loss(&fa).unwrap(), 0.0);
        prop_assert_eq!(fa.content_loss(&fa).unwrap(), 0.0);
        prop_assert_eq!(fa.avgpool_loss(&fa, 1).unwrap(), 0.0);
        prop_assert!(fa.style_loss(&fb).unwrap() >= 0.0);
        prop_assert!(fa.content_loss(&fb).unwrap() >= 0.0);
        prop_assert!(fa.avgpool_loss(&fb, 1).unwrap() >= 0.0);
    }

    #[test]
    fn scaling_a_map_scales_gram_by_s2_and_style_by_s4(a in map_strategy(1), s in 0.1..4.0f64) {
        let base = FeatureMap::new(a.clone(), "relu1_2");
        let scaled = FeatureMap::new(a.mapv(|v| v * s), "relu1_2");
        let zero = FeatureMap::new(Array4::zeros(a.dim()), "relu1_2");
        let (g0, g1) = (base.gram().unwrap(), scaled.gram().unwrap());
        for (x, y) in g0.0.iter().zip(g1.0.iter()) {
            prop_assert!((y - s * s * x).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        let (l0, l1) = (zero.style_loss(&base).unwrap(), zero.style_loss(&scaled).unwrap());
        prop_assert!((l1 - s.powi(4) * l0).abs() <= 1e-9 * (1.0 + l1));
    }

    #[test]
    fn batch_loss_is_mean_of_per_sample_losses(a in map_strategy(4), seed in 0..1000u64) {
        let (n, c, h, w) = a.dim();
        let b = Array4::from_shape_fn((n, c, h, w), |(i, j, k, l)| ((i * 31 + j * 7 + k * 3 + l) as f64 + seed as f64).sin());
        let t = Array4::from_shape_fn((1, c, h, w), |(_, j, k, l)| ((j * 5 + k + l) as f64 * 0.7 + seed as f64).cos());
        let one = |x: &Array4<f64>, i: usize| FeatureMap::new(x.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned(), "relu1_2");
        let (fa, fb, ft) = (FeatureMap::new(a.clone(), "relu1_2"), FeatureMap::new(b.clone(), "relu1_2"), FeatureMap::new(t, "relu1_2"));
        let mean = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / n as f64;
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + x.abs());
        prop_assert!(close(fa.style_loss(&ft).unwrap(), mean(&|i| one(&a, i).style_loss(&ft).unwrap())));
        prop_assert!(close(fa.content_loss(&fb).unwrap(), mean(&|i| one(&a, i).content_loss(&one(&b, i)).unwrap())));
        prop_assert!(close(fa.avgpool_loss(&fb, 1).unwrap(), mean(&|i| one(&a, i).avgpool_loss(&one(&b, i), 1).unwrap())));
    }
}

#[test]
fn extractor_is_unchanged_by_use() {
    let fe = FeatureExtractor::tiny();
    let before = fe.digest();
    let x = ImageBatch::new(Array4::from_elem((2, 3, 16, 16), 0.5), None).unwrap();
    fe.extract(&x, &["relu1_2", "relu4_3"]).unwrap();
    assert_eq!(fe.digest(), before);
    assert_eq!(fe.num_params(), 0, "no parameter is trainable");
}
