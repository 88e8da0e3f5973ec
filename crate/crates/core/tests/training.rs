mod common;

use common::*;
use hybridssl::gridsim::Dataset;
use hybridssl::neural::OptimizerConfig;
use hybridssl::trainer::{
    self, evaluate, EmaRule, EpochMetrics, Mode, StepEvent, TrainConfig, TrainError, Trainer,
};
use std::collections::HashSet;

fn quick(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        batch_size: 64,
        labeled_per_batch: 16,
        seeds: vec![1],
        ..TrainConfig::default()
    }
}

fn without_clock(ms: &[EpochMetrics]) -> Vec<String> {
    ms.iter()
        .map(|m| {
            let mut m = m.clone();
            m.wall_time_s = 0.0;
            serde_json::to_string(&m).unwrap()
        })
        .collect()
}

#[test]
fn supervised_toy_task_is_learned_within_fifty_epochs() {
    let data = toy_blobs(200, 10, 3);
    let cfg = TrainConfig {
        early_stop_window: 0,
        ..quick(Mode::SupervisedOnly, 50)
    };
    let out = trainer::train(&data, &cfg, 0).unwrap();
    let acc = evaluate(&out.model, &data, &data.train_indices()).unwrap().accuracy;
    assert!(acc >= 0.99, "train accuracy {acc}");
    for m in &out.metrics {
        assert!((m.val_accuracy + m.val_error - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn steps_run_in_algorithm_order() {
    let data = small_dataset(10, 0.2, 4);
    let cfg = TrainConfig {
        batch_size: 32,
        labeled_per_batch: 8,
        ..quick(Mode::Hybrid, 2)
    };
    let mut log = Vec::new();
    trainer::train_observed(&data, &cfg, 2, &mut |e| log.push(e)).unwrap();
    let mut expected = Vec::new();
    let batches = log
        .iter()
        .filter(|e| matches!(e, StepEvent::TeacherUpdate { epoch: 0, .. }))
        .count();
    assert!(batches > 1);
    for epoch in 0..2 {
        for batch in 0..batches {
            expected.push(StepEvent::LatentUpdate { epoch, batch });
            expected.push(StepEvent::ClassifierConstraintUpdate { epoch, batch });
            expected.push(StepEvent::ClassifierUpdate { epoch, batch });
            expected.push(StepEvent::TeacherUpdate { epoch, batch });
        }
        expected.push(StepEvent::EpochEnd { epoch });
    }
    assert_eq!(log, expected);
}

#[test]
fn latent_steps_descend_on_a_fixed_batch() {
    let data = small_dataset(10, 0.2, 5);
    let cfg = quick(Mode::Hybrid, 1);
    let mut t = Trainer::new(&cfg, &data, 3).unwrap();
    let batch = t.epoch_batches().remove(0);
    let hist = t.latent_steps(&batch, 60).unwrap();
    assert_eq!(hist.len(), 60);
    let rises = hist.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises * 20 <= hist.len() - 1, "{rises} increases in {:?}", hist);
    assert!(hist.last().unwrap() < hist.first().unwrap());
}

#[test]
fn identical_seed_gives_identical_stream() {
    let data = small_dataset(10, 0.2, 6);
    for mode in [Mode::Hybrid, Mode::BaselinePseudolabel] {
        let cfg = quick(mode, 3);
        let a = trainer::train(&data, &cfg, 9).unwrap();
        let b = trainer::train(&data, &cfg, 9).unwrap();
        assert_eq!(without_clock(&a.metrics), without_clock(&b.metrics));
        let c = trainer::train(&data, &cfg, 10).unwrap();
        assert_ne!(without_clock(&a.metrics), without_clock(&c.metrics));
    }
}

#[test]
fn pseudolabel_without_ramp_equals_supervised() {
    let data = small_dataset(10, 0.2, 7);
    let sup = trainer::train(&data, &quick(Mode::SupervisedOnly, 4), 5).unwrap();
    let mut cfg = quick(Mode::BaselinePseudolabel, 4);
    cfg.ramp.alpha_max = 0.0;
    let pl = trainer::train(&data, &cfg, 5).unwrap();
    let student = |ms: &[EpochMetrics]| {
        ms.iter()
            .map(|m| (m.val_accuracy.to_bits(), m.losses.l1.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(student(&sup.metrics), student(&pl.metrics));
    assert_eq!(flat_params(&sup.model.primary), flat_params(&pl.model.primary));
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

#[test]
fn teacher_is_smoother_than_student() {
    let data = small_dataset(40, 0.05, 8);
    let cfg = TrainConfig {
        early_stop_window: 0,
        ..quick(Mode::BaselineMeanteacher, 40)
    };
    let out = trainer::train(&data, &cfg, 4).unwrap();
    let tail = &out.metrics[out.metrics.len() - 20..];
    let student: Vec<f64> = tail.iter().map(|m| m.val_accuracy).collect();
    let teacher: Vec<f64> = tail.iter().map(|m| m.teacher_accuracy).collect();
    let (vs, vt) = (variance(&student), variance(&teacher));
    println!("final-20 accuracy variance: student {vs:.3e}, teacher {vt:.3e}");
    assert!(vt <= 2.0 * vs, "teacher {vt} vs student {vs}");
}

#[test]
fn student_pair_rule_trains() {
    let data = small_dataset(10, 0.2, 9);
    let mut cfg = quick(Mode::BaselineMeanteacher, 2);
    let avg = trainer::train(&data, &cfg, 1).unwrap();
    cfg.ema_rule = EmaRule::StudentPair;
    let pair = trainer::train(&data, &cfg, 1).unwrap();
    assert!(pair.metrics.iter().all(|m| m.teacher_accuracy.is_finite()));
    assert_ne!(flat_params(&avg.model.secondary), flat_params(&pair.model.secondary));
}

#[test]
fn validation_never_overlaps_training() {
    let data = small_dataset(20, 0.1, 10);
    let cfg = TrainConfig {
        label_fraction: Some(0.3),
        ..quick(Mode::SupervisedOnly, 1)
    };
    let t = Trainer::new(&cfg, &data, 0).unwrap();
    let m = &t.data().manifest;
    let val: HashSet<usize> = m.val_indices.iter().copied().collect();
    assert_eq!(m.val_indices, data.manifest.val_indices, "relabeling keeps the split");
    assert!(t.data().train_indices().iter().all(|i| !val.contains(i)));
    assert_eq!(m.labeled_indices.len() + m.unlabeled_indices.len() + val.len(), data.len());

    let mut bad: Dataset = data.clone();
    bad.manifest.labeled_indices.push(bad.manifest.val_indices[0]);
    let err = Trainer::new(&quick(Mode::SupervisedOnly, 1), &bad, 0).err().unwrap();
    assert!(matches!(err, TrainError::Config(_)), "{err}");
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let data = small_dataset(10, 0.2, 11);
    let cfg = TrainConfig {
        optimizer: OptimizerConfig::sgd(1e200, 0.0),
        ..quick(Mode::Hybrid, 3)
    };
    match trainer::train(&data, &cfg, 0) {
        Err(TrainError::Diverged(report)) => {
            assert_eq!(report.mode, Mode::Hybrid);
            assert!(!report.primary_param_norms.is_empty());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics.len())),
    }
}
