use flowpriv::data::{self, pgm, synth, Label, SynthConfig};
use flowpriv::detect::{self, ScoreSet};
use flowpriv::{rng, Shape};
use proptest::prelude::*;

/// Mann-Whitney by enumerating every (normal, abnormal) pair.
fn pairwise_auc(normal: &[f64], abnormal: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &n in normal {
        for &a in abnormal {
            wins += if n > a {
                1.0
            } else if n == a {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (normal.len() * abnormal.len()) as f64
}

fn scored(normal: &[f64], abnormal: &[f64]) -> ScoreSet {
    let labels: Vec<Label> = normal
        .iter()
        .map(|_| Label::Normal)
        .chain(abnormal.iter().map(|_| Label::Abnormal))
        .collect();
    let scores: Vec<f64> = normal.iter().chain(abnormal).copied().collect();
    ScoreSet::from_parts(&labels, &scores)
}

#[test]
fn lung_mean_threshold_separates_toy_classes() {
    let shape = Shape::new(16, 16, 1);
    let (mut normal, mut abnormal) = (Vec::new(), Vec::new());
    for i in 0..1000u64 {
        let ab = i % 2 == 1;
        let img = synth::gen_toy_image(rng::derive(2024, i), ab, shape).unwrap();
        let mask = img.scene.lung_mask();
        let (sum, n) = mask
            .iter()
            .zip(&img.pixels)
            .filter(|(m, _)| **m)
            .fold((0.0, 0.0), |(s, n), (_, &p)| (s + p as f64, n + 1.0));
        // the blob brightens the lung, so darker lungs read as normal
        if ab { &mut abnormal } else { &mut normal }.push(-sum / n);
    }
    let auc = pairwise_auc(&normal, &abnormal);
    assert!(auc > 0.95, "threshold-on-mean AUC {auc}");
    assert_eq!(detect::auc(&scored(&normal, &abnormal)).unwrap(), auc);
}

#[test]
fn same_seed_same_dataset_on_disk() {
    let cfg = SynthConfig {
        seed: 9,
        train_normal: 10,
        train_mixture: 12,
        test: 8,
        marked: 2,
        ..SynthConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = data::write_dataset(&cfg, a.path()).unwrap();
    data::write_dataset(&cfg, b.path()).unwrap();
    assert_eq!(ma.len(), 4);
    for m in &ma {
        let name = m.file_name().unwrap();
        assert_eq!(std::fs::read(m).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        let manifest = data::DatasetManifest::load(m).unwrap();
        for e in &manifest.entries {
            assert_eq!(
                std::fs::read(a.path().join(&e.path)).unwrap(),
                std::fs::read(b.path().join(&e.path)).unwrap()
            );
        }
    }
}

proptest! {
    #[test]
    fn auc_matches_pair_enumeration(
        normal in prop::collection::vec(-5i32..5, 1..30),
        abnormal in prop::collection::vec(-5i32..5, 1..30),
    ) {
        let n: Vec<f64> = normal.iter().map(|&v| v as f64).collect();
        let a: Vec<f64> = abnormal.iter().map(|&v| v as f64).collect();
        let auc = detect::auc(&scored(&n, &a)).unwrap();
        prop_assert!((auc - pairwise_auc(&n, &a)).abs() < 1e-12);
        let roc = detect::roc_points(&scored(&n, &a)).unwrap();
        prop_assert!((detect::trapezoid_area(&roc) - auc).abs() < 1e-12);
    }

    #[test]
    fn auc_is_a_rank_statistic(
        normal in prop::collection::vec(-3.0f64..3.0, 1..25),
        abnormal in prop::collection::vec(-3.0f64..3.0, 1..25),
        shift in -100.0f64..100.0,
        scale in 0.01f64..50.0,
    ) {
        let base = detect::auc(&scored(&normal, &abnormal)).unwrap();
        let map = |f: &dyn Fn(f64) -> f64| {
            let n: Vec<f64> = normal.iter().map(|&v| f(v)).collect();
            let a: Vec<f64> = abnormal.iter().map(|&v| f(v)).collect();
            detect::auc(&scored(&n, &a)).unwrap()
        };
        prop_assert_eq!(map(&|v| v + shift), base);
        prop_assert_eq!(map(&|v| v * scale + shift), base);
        prop_assert_eq!(map(&f64::exp), base);
        prop_assert!((map(&|v| -v) + base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_roundtrip(width in 1usize..20, height in 1usize..20, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..width * height).map(|i| (rng::mix64(seed ^ i as u64) & 0xff) as u8).collect();
        let img = pgm::Gray8 { width, height, pixels };
        let bytes = pgm::encode(&img);
        prop_assert_eq!(pgm::decode(&bytes).unwrap(), img);
    }
}
