use image::{DynamicImage, GrayImage, Rgb, RgbImage};
use proptest::prelude::*;

use osuda_core::data::{load_image_folder, make_synthetic_corpus, preprocess, resize_chw, select_targets, SynthConfig};

fn rgb(w: u32, h: u32, seed: u32) -> DynamicImage {
    DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
        let v = x.wrapping_mul(73).wrapping_add(y.wrapping_mul(151)).wrapping_add(seed.wrapping_mul(17));
        Rgb([(v % 256) as u8, (v / 3 % 256) as u8, (v / 7 % 256) as u8])
    }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn preprocess_is_idempotent_at_fixed_size(w in 1..64u32, h in 1..64u32, size in 1..40usize, seed in 0..1000u32) {
        let once = preprocess(&rgb(w, h, seed), size).unwrap();
        prop_assert_eq!(once.dim(), (3, size, size));
        prop_assert!(once.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(resize_chw(&once, size).unwrap(), once);
    }
}

#[test]
fn preprocess_scales_and_resizes() {
    let white = DynamicImage::ImageRgb8(RgbImage::from_pixel(448, 448, Rgb([255, 255, 255])));
    let out = preprocess(&white, 224).unwrap();
    assert_eq!(out.dim(), (3, 224, 224));
    assert!(out.iter().all(|&v| v == 1.0));
    let black = DynamicImage::ImageRgb8(RgbImage::new(10, 7));
    assert!(preprocess(&black, 16).unwrap().iter().all(|&v| v == 0.0));
    assert!(preprocess(&DynamicImage::ImageLuma8(GrayImage::new(4, 4)), 4).is_err());
}

#[test]
fn corpus_round_trips_and_reads_identically_twice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { seed: 5, n_per_class: 6, n_classes: 3, image_size: 24 };
    let (src, tgt) = make_synthetic_corpus(&cfg, dir.path()).unwrap();
    assert_eq!((src.len(), tgt.len()), (18, 18));
    assert_eq!(src.class_names, tgt.class_names);

    let a = load_image_folder(dir.path().join("source")).unwrap();
    let b = load_image_folder(dir.path().join("source")).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.digest().unwrap(), src.digest().unwrap());
    let idx: Vec<usize> = (0..a.len()).collect();
    let (x, y) = (a.load_batch(&idx, 24).unwrap(), b.load_batch(&idx, 24).unwrap());
    assert!(x.data.iter().zip(y.data.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(x.labels, y.labels);
}

#[test]
fn target_selection_depends_only_on_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, tgt) = make_synthetic_corpus(&SynthConfig { n_per_class: 10, ..SynthConfig::default() }, dir.path()).unwrap();
    for seed in 0..5 {
        let a = select_targets(&tgt, 3, seed, 32).unwrap();
        let b = select_targets(&tgt, 3, seed, 32).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.indices.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 3, "distinct draws");
    }
    let picks: std::collections::BTreeSet<_> = (0..20).map(|s| select_targets(&tgt, 1, s, 32).unwrap().indices[0]).collect();
    assert!(picks.len() > 1, "different seeds reach different samples");
    assert!(select_targets(&tgt, 0, 0, 32).is_err());
    assert!(select_targets(&tgt, 41, 0, 32).is_err());
}

#[test]
fn source_only_classifier_falls_short_of_target_oracle() {
    use osuda_core::classifier::{ClassifierBackbone, ClassifierState};
    use osuda_core::evaluation::evaluate;
    use osuda_core::trainer::{train_source_only, TrainConfig};

    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = make_synthetic_corpus(&SynthConfig { n_per_class: 25, ..SynthConfig::default() }, dir.path()).unwrap();
    let mut cfg = TrainConfig::parse(include_str!("../../../configs/synthetic.conf")).unwrap();
    cfg.epochs = 5;
    let on_target = |cm: &ClassifierState| evaluate(cm, &tgt, 50, 0).unwrap().mean_accuracy;
    let source_only = train_source_only(&cfg, &src).unwrap();
    let oracle = train_source_only(&cfg, &tgt).unwrap();
    let (so, or) = (on_target(&source_only), on_target(&oracle));
    println!("target accuracy: source-only {so:.1}, target-trained {or:.1}");
    assert!(so < or, "source-only {so} vs target-trained {or}");
    assert_eq!(source_only.backbone(), ClassifierBackbone::SmallCnn);
}
