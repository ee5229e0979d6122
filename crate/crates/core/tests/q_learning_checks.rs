use std::collections::BTreeMap;

use bjq_core::bj_boost::LinearModel;
use bjq_core::data_model::{Action, ActionSeq, CovariateVector, StageRecord, Subject, TrialDataset};
use bjq_core::q_learning::{
    backward_induction, fit_stage_q, observed_targets, optimal_decision, pseudo_outcomes, q_values,
    ArmModel, Method, Mode, Policy, QConfig, QError, QStageModel,
};
use bjq_core::simulation::{gen_single_stage, DgpConfig};
use proptest::prelude::*;

fn record(stage: usize, x: Vec<f64>, a: u32, time: f64, event: bool) -> StageRecord {
    let names = (0..x.len()).map(|j| format!("x{j}")).collect();
    StageRecord {
        stage_index: stage,
        history: CovariateVector::new(names, x).unwrap(),
        treatment: Action(a),
        observed_time: time,
        event,
        reached: true,
    }
}

fn constant_arms(n: usize, c0: f64, c1: f64) -> TrialDataset {
    let subjects = (0..n)
        .map(|i| {
            let a = (i % 2) as u32;
            let y = if a == 0 { c0 } else { c1 };
            Subject {
                id: format!("s{i}"),
                stages: vec![record(1, vec![i as f64, (i * i % 7) as f64], a, y, true)],
            }
        })
        .collect();
    TrialDataset::new(subjects, vec![Action(0), Action(1)], 1).unwrap()
}

#[test]
fn constant_arms_give_their_constants() {
    let data = constant_arms(40, 3.0, 8.0);
    let targets = observed_targets(&data, 1);
    for method in [Method::Bj, Method::BjLs, Method::BjTree] {
        let stage = fit_stage_q(&data, 1, &targets, method, &QConfig::default()).unwrap();
        let q = stage.q_values(&[5.0, 2.0]).unwrap();
        assert!((q[&Action(0)] - 3.0).abs() < 1e-9, "{method}");
        assert!((q[&Action(1)] - 8.0).abs() < 1e-9, "{method}");
    }
}

#[test]
fn missing_arm_is_a_positivity_violation() {
    let subjects = (0..20)
        .map(|i| Subject {
            id: format!("s{i}"),
            stages: vec![record(1, vec![i as f64], 1, 1.0 + i as f64, true)],
        })
        .collect();
    let data = TrialDataset::new(subjects, vec![Action(0), Action(1)], 1).unwrap();
    let err = backward_induction(&data, Method::BjTree, &QConfig::default(), Mode::Additive).unwrap_err();
    assert!(matches!(err, QError::PositivityViolated { stage: 1, action: Action(0) }));
}

#[test]
fn zero_continuation_leaves_stage_one_outcomes() {
    let subjects = (0..60)
        .map(|i| {
            let a1 = (i % 2) as u32;
            let a2 = ((i / 2) % 2) as u32;
            Subject {
                id: format!("s{i}"),
                stages: vec![
                    record(1, vec![i as f64], a1, 2.0 + (i % 5) as f64, i % 3 != 0),
                    record(2, vec![i as f64, f64::from(a1)], a2, 0.0, true),
                ],
            }
        })
        .collect();
    let data = TrialDataset::new(subjects, vec![Action(0), Action(1)], 2).unwrap();
    let stage2 = fit_stage_q(&data, 2, &observed_targets(&data, 2), Method::BjTree, &QConfig::default()).unwrap();
    assert_eq!(pseudo_outcomes(&data, 1, &stage2).unwrap(), observed_targets(&data, 1));
}

#[test]
fn tree_q_values_track_the_truth() {
    let mut correlations: Vec<f64> = (0..20)
        .map(|seed| {
            let sim = gen_single_stage(1000, seed, &DgpConfig::default()).unwrap();
            let policy = backward_induction(&sim.dataset, Method::BjTree, &QConfig::default(), Mode::Additive).unwrap();
            let mut est = Vec::new();
            let mut truth = Vec::new();
            for (s, oracle) in sim.dataset.subjects.iter().zip(&sim.oracle) {
                for (seq, q) in q_values(&policy, s).unwrap() {
                    est.push(q);
                    truth.push(oracle[&seq]);
                }
            }
            correlation(&est, &truth)
        })
        .collect();
    correlations.sort_by(f64::total_cmp);
    let median = 0.5 * (correlations[9] + correlations[10]);
    assert!(median >= 0.9, "median correlation {median}");
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn policy_json_round_trip_keeps_decisions_bitwise() {
    let sim = gen_single_stage(200, 5, &DgpConfig::default()).unwrap();
    for method in Method::ALL {
        let policy = backward_induction(&sim.dataset, method, &QConfig::default(), Mode::Additive).unwrap();
        let restored = Policy::from_json(&policy.to_json()).unwrap();
        for s in &sim.dataset.subjects {
            let a = q_values(&policy, s).unwrap();
            let b = q_values(&restored, s).unwrap();
            assert_eq!(a.len(), b.len());
            for ((ka, va), (kb, vb)) in a.iter().zip(&b) {
                assert_eq!(ka, kb);
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }
    assert!(Policy::from_json("{\"format\":\"other\"}").is_err());
}

fn linear_stage(stage: usize, arms: &[(f64, Vec<f64>)]) -> QStageModel {
    QStageModel {
        stage_index: stage,
        method: Method::Bj,
        per_arm_models: arms
            .iter()
            .enumerate()
            .map(|(a, (b0, b))| {
                (Action(a as u32), ArmModel::Linear(LinearModel { intercept: *b0, coefficients: b.clone() }))
            })
            .collect(),
    }
}

fn two_stage_policy(mode: Mode, s1: &[(f64, Vec<f64>)], s2: &[(f64, Vec<f64>)]) -> Policy {
    Policy {
        method: Method::Bj,
        mode,
        config: QConfig::default(),
        action_set: (0..s1.len() as u32).map(Action).collect(),
        num_stages: 2,
        stage_models: vec![linear_stage(2, s2), linear_stage(1, s1)],
    }
}

fn arms_strategy(p: usize) -> impl Strategy<Value = Vec<(f64, Vec<f64>)>> {
    prop::collection::vec((-5.0f64..5.0, prop::collection::vec(-2.0f64..2.0, p)), 2..=3)
}

fn shift(arms: &[(f64, Vec<f64>)], c: f64) -> Vec<(f64, Vec<f64>)> {
    arms.iter().map(|(b0, b)| (b0 + c, b.clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn common_shift_never_changes_the_decision(
        s1 in arms_strategy(2),
        s2_raw in arms_strategy(3),
        h1 in prop::collection::vec(-3.0f64..3.0, 2),
        h2 in prop::collection::vec(-3.0f64..3.0, 3),
        c in -100.0f64..100.0,
        at_stage_two in any::<bool>(),
        backward in any::<bool>(),
    ) {
        let s2: Vec<_> = s2_raw.iter().cycle().take(s1.len()).cloned().collect();
        let mode = if backward { Mode::Backward } else { Mode::Additive };
        let subject = Subject {
            id: "x".into(),
            stages: vec![record(1, h1, 0, 1.0, true), record(2, h2, 0, 1.0, true)],
        };
        let base = two_stage_policy(mode, &s1, &s2);
        let moved = if at_stage_two {
            two_stage_policy(mode, &s1, &shift(&s2, c))
        } else {
            two_stage_policy(mode, &shift(&s1, c), &s2)
        };
        let d0 = optimal_decision(&q_values(&base, &subject).unwrap()).unwrap();
        let d1 = optimal_decision(&q_values(&moved, &subject).unwrap()).unwrap();
        prop_assert_eq!(d0, d1);
    }

    #[test]
    fn additive_values_are_sums_of_stage_values(
        s1 in arms_strategy(2),
        s2_raw in arms_strategy(3),
        h1 in prop::collection::vec(-3.0f64..3.0, 2),
        h2 in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let s2: Vec<_> = s2_raw.iter().cycle().take(s1.len()).cloned().collect();
        let subject = Subject {
            id: "x".into(),
            stages: vec![record(1, h1.clone(), 0, 1.0, true), record(2, h2.clone(), 0, 1.0, true)],
        };
        let policy = two_stage_policy(Mode::Additive, &s1, &s2);
        let q1 = policy.stage(1).unwrap().q_values(&h1).unwrap();
        let q2 = policy.stage(2).unwrap().q_values(&h2).unwrap();
        let values: BTreeMap<ActionSeq, f64> = q_values(&policy, &subject).unwrap();
        prop_assert_eq!(values.len(), s1.len() * s1.len());
        for (seq, v) in values {
            prop_assert!((v - (q1[&seq.0[0]] + q2[&seq.0[1]])).abs() <= 1e-12);
        }
    }
}
