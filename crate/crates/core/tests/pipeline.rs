//! Short seeded training runs on the toy data, shared across tests.

use std::sync::OnceLock;

use flowpriv::data::{self, pixel, Label, SynthConfig};
use flowpriv::detect::{self, utility::UtilityInputs, ScoreSet, UtilityConfig};
use flowpriv::dp::{self, Epsilon, PrivacyParams, PrivatizeOptions, SensitivityMode};
use flowpriv::flow::checkpoint;
use flowpriv::train::{self, TrainConfig, TrainLog};
use flowpriv::{FlowConfig, FlowModel, ImageTensor};

struct Run {
    mixture: Vec<ImageTensor>,
    test: Vec<ImageTensor>,
    labels: Vec<Label>,
    m0: FlowModel,
    m1: FlowModel,
    log0: TrainLog,
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        samples_per_epoch: 600,
        ..TrainConfig::default()
    }
}

fn run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = SynthConfig {
            seed: 3,
            train_normal: 300,
            train_mixture: 400,
            test: 200,
            ..SynthConfig::default()
        };
        let splits = data::generate(&cfg).unwrap();
        let xs = |i: usize| -> Vec<ImageTensor> {
            splits[i]
                .images
                .iter()
                .map(|g| pixel::image_from_u8(cfg.shape, &g.pixels))
                .collect()
        };
        let r0 = train::train(&FlowModel::new(FlowConfig::desk(), 0).unwrap(), &xs(0), &quick()).unwrap();
        let r1 = train::train(
            &FlowModel::new(FlowConfig::desk(), 1).unwrap(),
            &xs(1),
            &TrainConfig { seed: 1, ..quick() },
        )
        .unwrap();
        Run {
            mixture: xs(1),
            test: xs(2),
            labels: splits[2].images.iter().map(|g| g.entry.label).collect(),
            m0: r0.model,
            m1: r1.model,
            log0: r0.log,
        }
    })
}

fn params(r: &Run) -> PrivacyParams {
    let z: Vec<_> = r.mixture.iter().map(|x| r.m1.forward(x).unwrap().0).collect();
    PrivacyParams::from_latents(&z, 0.4, SensitivityMode::Clipped).unwrap()
}

#[test]
fn five_epochs_lower_the_loss() {
    let log = &run().log0;
    assert_eq!(log.records.len(), 6);
    assert_eq!(log.records[5].epoch, 5);
    assert!(log.last().unwrap() < log.initial().unwrap());
}

#[test]
fn same_seed_same_checkpoint() {
    let r = run();
    let cfg = SynthConfig {
        seed: 3,
        train_normal: 300,
        train_mixture: 400,
        test: 200,
        ..SynthConfig::default()
    };
    let splits = data::generate(&cfg).unwrap();
    let normal: Vec<_> = splits[0]
        .images
        .iter()
        .map(|g| pixel::image_from_u8(cfg.shape, &g.pixels))
        .collect();
    let again = train::train(&FlowModel::new(FlowConfig::desk(), 0).unwrap(), &normal, &quick()).unwrap();
    assert_eq!(checkpoint::to_bytes(&again.model), checkpoint::to_bytes(&r.m0));
    assert_ne!(checkpoint::to_bytes(&r.m0), checkpoint::to_bytes(&r.m1));
}

#[test]
fn normal_images_score_higher() {
    let r = run();
    let scores = detect::score_all(&r.m0, &r.m1, &r.test).unwrap();
    let mean = |want: Label| {
        let v: Vec<f64> = scores
            .iter()
            .zip(&r.labels)
            .filter(|(_, &l)| l == want)
            .map(|(s, _)| *s)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(Label::Normal) > mean(Label::Abnormal));
}

#[test]
fn same_model_twice_gives_chance_auc() {
    let r = run();
    let scores = detect::score_all(&r.m1, &r.m1, &r.test).unwrap();
    assert!(scores.iter().all(|&s| s == 0.0));
    assert_eq!(detect::auc(&ScoreSet::from_parts(&r.labels, &scores)).unwrap(), 0.5);
}

#[test]
fn zero_latent_through_trained_model_is_finite() {
    let r = run();
    let (x, _) = r.m1.inverse(&flowpriv::LatentVector::zeros(256)).unwrap();
    assert!(x.is_finite());
}

#[test]
fn trained_roundtrip_and_infinite_budget() {
    let r = run();
    let p = params(r);
    let opts = PrivatizeOptions { clip: false };
    for x in &r.test[..20] {
        let (z, _) = r.m1.forward(x).unwrap();
        let (rt, _) = r.m1.inverse(&z).unwrap();
        assert!(rt.max_abs_diff(x) < 1e-4);
        let (xt, _) = dp::privatize_image(&r.m1, x, &p, opts, 5).unwrap();
        assert!(xt.max_abs_diff(&rt) < 1e-4);
    }
}

#[test]
fn privatize_is_bit_reproducible() {
    let r = run();
    let p = params(r).with_epsilon(Epsilon::parse("1e2xD", 256).unwrap());
    let x = &r.test[0];
    let a = dp::privatize_image(&r.m1, x, &p, PrivatizeOptions::default(), 77).unwrap();
    let b = dp::privatize_image(&r.m1, x, &p, PrivatizeOptions::default(), 77).unwrap();
    let c = dp::privatize_image(&r.m1, x, &p, PrivatizeOptions::default(), 78).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn utility_table_shape() {
    let r = run();
    let p = params(r);
    let psens = dp::pixel_sensitivity(&r.mixture).unwrap();
    let inputs = UtilityInputs {
        m0: &r.m0,
        m1: &r.m1,
        images: &r.test,
        labels: &r.labels,
        params: &p,
        pixel_sensitivity: &psens,
    };
    let one = detect::utility_curve(
        &inputs,
        &UtilityConfig {
            epsilons: vec![Epsilon::Infinite],
            mechanisms: vec![detect::utility::MechanismKind::Latent],
            seeds: vec![0],
            ..UtilityConfig::default()
        },
    )
    .unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!(one.rows[0].cells.len(), 1);
    assert_eq!(one.to_string().lines().count(), 2);

    let table = detect::utility_curve(
        &inputs,
        &UtilityConfig {
            epsilons: vec![Epsilon::Infinite, Epsilon::parse("1e1xD", 256).unwrap()],
            ..UtilityConfig::default()
        },
    )
    .unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.detail_tsv().lines().count(), 1 + 2 * 2 * 3);
    // the infinite row without clipping is the roundtrip, identical for both mechanisms
    let clean = detect::auc(&ScoreSet::from_parts(
        &r.labels,
        &detect::score_all(&r.m0, &r.m1, &r.test).unwrap(),
    ))
    .unwrap();
    for c in &table.rows[0].cells {
        assert!(
            (c.mean - clean).abs() < 1e-12,
            "{} {} vs {clean}",
            c.mechanism.name(),
            c.mean
        );
    }
    assert!(detect::plot::utility_svg(&table).starts_with("<svg"));
}
