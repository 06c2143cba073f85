use guided::checkpoint::encode_checkpoint;
use guided::eval::benchmark::{generate_synthetic_benchmark, Dataset, Split, WorldConfig};
use guided::model::{Detector, DetectorConfig, ParamGroup};
use guided::training::{gradient_check, matched_ious, train_stage1, train_stage2, TrainConfig, TrainSample};
use guided::Error;

fn world(train: usize, test: usize) -> Dataset {
    generate_synthetic_benchmark(&WorldConfig {
        train_images: train,
        test_images: test,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn stage1_samples(d: &Dataset) -> Vec<TrainSample> {
    let enc = d.encoder();
    let maps = d.render(&enc, Split::Train).unwrap();
    d.stage1_samples(&maps, enc.text_encoder()).unwrap()
}

fn stage2_samples(d: &Dataset) -> Vec<TrainSample> {
    let enc = d.encoder();
    let maps = d.render(&enc, Split::Train).unwrap();
    d.stage2_samples(&maps, enc.text_encoder()).unwrap()
}

fn short(mut cfg: TrainConfig, iterations: usize) -> TrainConfig {
    cfg.iterations = iterations;
    cfg
}

#[test]
fn every_group_passes_the_gradient_check() {
    let d = world(4, 0);
    let samples = stage2_samples(&d);
    let det = Detector::new(DetectorConfig::default()).unwrap();
    let checks = gradient_check(&det, &samples[0], &TrainConfig::stage2(), 6, 1e-5).unwrap();
    for group in ParamGroup::ALL {
        let mine: Vec<_> = checks.iter().filter(|c| c.group == group).collect();
        assert!(!mine.is_empty(), "{} not checked", group.name());
        let norm: f64 = mine.iter().map(|c| c.analytic_norm).sum();
        assert!(norm > 0.0, "{} received no gradient", group.name());
    }
    for c in &checks {
        assert!(c.relative_error <= 1e-4, "{}: relative error {:e}", c.name, c.relative_error);
    }
}

#[test]
fn seeded_rerun_is_bit_identical() {
    let samples = stage1_samples(&world(12, 0));
    let cfg = short(TrainConfig::stage1(), 15);
    let mut a = Detector::new(DetectorConfig::default()).unwrap();
    let mut b = a.clone();
    let ra = train_stage1(&mut a, &samples, &cfg).unwrap();
    let rb = train_stage1(&mut b, &samples, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.params, b.params);
}

#[test]
fn zero_iterations_leave_the_initialization() {
    let samples = stage1_samples(&world(4, 0));
    let init = Detector::new(DetectorConfig::default()).unwrap();
    let mut det = init.clone();
    let report = train_stage1(&mut det, &samples, &short(TrainConfig::stage1(), 0)).unwrap();
    assert!(report.losses.is_empty());
    assert_eq!(encode_checkpoint(&det).unwrap(), encode_checkpoint(&init).unwrap());
}

#[test]
fn stage2_without_fine_loss_continues_stage1() {
    let samples = stage2_samples(&world(12, 0));
    let s1 = short(TrainConfig::stage1(), 12);
    let mut s2 = short(TrainConfig::stage2(), 12);
    s2.weights.fine = 0.0;
    s2.learning_rate = s1.learning_rate;
    s2.seed = s1.seed;
    let mut a = Detector::new(DetectorConfig::default()).unwrap();
    let mut b = a.clone();
    let ra = train_stage1(&mut a, &samples, &s1).unwrap();
    let rb = train_stage2(&mut b, &samples, &[], &s2).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.params, b.params);
}

#[test]
fn stage2_moves_the_projection() {
    let samples = stage2_samples(&world(12, 0));
    let mut det = Detector::new(DetectorConfig::default()).unwrap();
    train_stage2(&mut det, &samples, &[], &short(TrainConfig::stage2(), 10)).unwrap();
    assert!(det.params.projection.distance_from_identity() > 0.0);
}

#[test]
fn frozen_projection_stays_at_identity() {
    let samples = stage2_samples(&world(12, 0));
    let mut det = Detector::new(DetectorConfig::default()).unwrap();
    let mut cfg = short(TrainConfig::stage2(), 10);
    cfg.freeze_projection = true;
    train_stage2(&mut det, &samples, &[], &cfg).unwrap();
    assert_eq!(det.params.projection.distance_from_identity(), 0.0);
}

#[test]
fn co_training_rejects_fine_labels_in_the_coarse_pool() {
    let d = world(8, 0);
    let fine = stage2_samples(&d);
    let coarse = stage1_samples(&d);
    let mut cfg = short(TrainConfig::stage2(), 3);
    cfg.co_training = true;
    let mut det = Detector::new(DetectorConfig::default()).unwrap();
    train_stage2(&mut det, &fine, &coarse, &cfg).unwrap();
    assert!(train_stage2(&mut det, &fine, &fine, &cfg).is_err());
}

#[test]
fn stage1_localizes_held_out_objects() {
    let d = world(240, 40);
    let train = stage1_samples(&d);
    let cfg = TrainConfig::stage1();
    assert_eq!(cfg.iterations, 500);
    let mut det = Detector::new(DetectorConfig::default()).unwrap();
    train_stage1(&mut det, &train, &cfg).unwrap();

    // the held-out images, relabelled so the coarse sample builder takes them
    let enc = d.encoder();
    let maps = d.render(&enc, Split::Test).unwrap();
    let held_out = Dataset {
        manifest: d.manifest.clone(),
        images: d
            .split(Split::Test)
            .map(|img| {
                let mut img = img.clone();
                img.split = Split::Train;
                img
            })
            .collect(),
    };
    let test = held_out.stage1_samples(&maps, enc.text_encoder()).unwrap();
    let ious: Vec<f64> = test.iter().flat_map(|s| matched_ious(&det, s, &cfg).unwrap()).collect();
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!(mean >= 0.5, "mean matched IoU {mean}");
}

#[test]
fn divergence_aborts_with_the_iteration() {
    let samples = stage1_samples(&world(4, 0));
    let mut cfg = short(TrainConfig::stage1(), 50);
    cfg.learning_rate = 1e12;
    cfg.clip_norm = None;
    let mut det = Detector::new(DetectorConfig::default()).unwrap();
    match train_stage1(&mut det, &samples, &cfg) {
        Err(Error::Divergence { iteration, loss }) => {
            assert!(iteration < 50);
            assert!(!loss.is_finite() || loss > 1e4);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
