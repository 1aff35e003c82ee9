//! End-to-end cascade behavior on the shipped fixture.

mod common;

use common::fixture_set;
use gastrace::gat::{SearchSpace, TrainSchedule};
use gastrace::pipeline::{
    assign_splits, extract_all, run_cascade, stage_r1, AblationMode, CascadeConfig, EvalSplit,
};
use gastrace::svm::{ClassWeightSpec, GammaSpec, SvmGrid};
use gastrace::txmodel::Label;
use gastrace::Scalar;

fn fast_config<S: Scalar>() -> CascadeConfig<S> {
    CascadeConfig {
        grid: SvmGrid {
            c: vec![S::lit(1.0), S::lit(10.0)],
            gamma: vec![GammaSpec::Scale],
            class_weight: vec![ClassWeightSpec::Value(S::one()), ClassWeightSpec::Balanced],
        },
        search_space: SearchSpace::default(),
        bayes_budget: 3,
        bayes_init: 2,
        schedule: TrainSchedule {
            m: 3,
            n: 25,
            patience: 1,
        },
        ..CascadeConfig::default()
    }
}

#[test]
fn cascade_beats_first_stage_on_fixture_seed_one() {
    let out = run_cascade(&fixture_set(), &CascadeConfig::<f64>::default(), 1).unwrap();
    let r = &out.report;
    assert!(
        r.cascade.metrics.f1 >= r.r1.metrics.f1,
        "cascade {} vs R1 {}",
        r.cascade.metrics.f1,
        r.r1.metrics.f1
    );
}

#[test]
fn first_stage_never_sees_held_out_labels() {
    let set = fixture_set();
    let cfg = fast_config::<f64>();
    let feats = extract_all::<f64>(&set, cfg.window_secs).unwrap();
    let split = assign_splits(&set.labels, 9).unwrap();
    let base = stage_r1(&feats, &split, &cfg, 9).unwrap();

    let mut flipped = feats.clone();
    for i in 0..flipped.labels.len() {
        if !split.r1_train.contains(&flipped.addresses[i]) {
            flipped.labels[i] = match flipped.labels[i] {
                Label::Malicious => Label::Normal,
                Label::Normal => Label::Malicious,
            };
        }
    }
    let other = stage_r1(&flipped, &split, &cfg, 9).unwrap();
    assert_eq!(base.standardizer, other.standardizer);
    assert_eq!(base.model, other.model);
    assert_eq!(base.probs, other.probs);
}

#[test]
fn report_is_deterministic_and_seed_sensitive() {
    let set = fixture_set();
    let cfg = fast_config::<f64>();
    let a = run_cascade(&set, &cfg, 4).unwrap().report.report_json();
    let b = run_cascade(&set, &cfg, 4).unwrap().report.report_json();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = run_cascade(&set, &cfg, 5).unwrap().report.report_json();
    assert_ne!(a, c);
    for section in ["R1", "R2", "GasTrace"] {
        let s = &a[section];
        let (p, r, f) = (s["precision"].as_f64().unwrap(), s["recall"].as_f64().unwrap(), s["f1"].as_f64().unwrap());
        if p + r > 0.0 {
            assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-9);
        }
    }
}

#[test]
fn single_precision_pipeline_runs() {
    let out = run_cascade(&fixture_set(), &fast_config::<f32>(), 2).unwrap();
    assert!(out.report.cascade.metrics.accuracy > 0.5);
}

#[test]
fn eval_split_selects_the_scored_accounts() {
    let set = fixture_set();
    let mut cfg = fast_config::<f64>();
    let r2 = run_cascade(&set, &cfg, 3).unwrap().report;
    assert_eq!(r2.cascade.support, 40);
    assert_eq!(r2.r1.support, 60);
    cfg.eval_split = EvalSplit::R1Test;
    let r1 = run_cascade(&set, &cfg, 3).unwrap().report;
    assert_eq!(r1.cascade.support, 60);
}

#[test]
fn both_ablation_modes_run() {
    let set = fixture_set();
    let mut cfg = fast_config::<f64>();
    for mode in [AblationMode::Reuse, AblationMode::Retrain] {
        cfg.ablation = mode;
        let r = run_cascade(&set, &cfg, 6).unwrap().report;
        assert_eq!(r.r2_only.support, r.cascade.support);
        assert!((r.r2_only.true_malicious_rate - 0.25).abs() < 1e-12);
    }
}
