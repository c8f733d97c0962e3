use kinject_core::net::{BackboneConfig, ModelConfig, ModelState, ParamGroup};
use kinject_core::rng;
use kinject_core::synth::Split;
use kinject_core::tensor::{Tape, Tensor};
use kinject_core::trainer::{
    cosine_loss, epoch_order, knowledge_loss, knowledge_loss_on_tape, run_classification_stage, run_knowledge_stage, sample_negatives,
    ClassificationMode, KnowledgeBundle, TrainError, TrainPlan,
};
use kinject_core::{Scale, ScaleMask};
use proptest::prelude::*;
use rand::Rng;

const CLASSES: usize = 3;
const RES: usize = 32;

fn bundle(dim: usize) -> KnowledgeBundle {
    let cats: Vec<String> = (0..CLASSES).map(|c| format!("cat{c}")).collect();
    let mut b = KnowledgeBundle::new(cats.clone());
    for s in Scale::ALL {
        let mut r = rng::stream(11, &[s.index() as u64]);
        let named: Vec<(String, Vec<f32>)> = cats
            .iter()
            .map(|c| (c.clone(), (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()))
            .collect();
        b.insert(s, &named).unwrap();
    }
    b
}

/// Each class is a bright square in its own quadrant.
fn split(n: usize, seed: u64) -> Split {
    let mut r = rng::stream(seed, &[]);
    let labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
    let plane = RES * RES;
    let images = Tensor::from_fn(&[n, 3, RES, RES], |k| {
        let i = k / (3 * plane);
        let p = k % plane;
        let (y, x) = (p / RES, p % RES);
        let (oy, ox) = [(2, 2), (2, 18), (18, 10)][labels[i]];
        let on = (oy..oy + 12).contains(&y) && (ox..ox + 12).contains(&x);
        (if on { 0.9 } else { 0.1 }) + r.gen_range(-0.05..0.05)
    });
    Split {
        images,
        labels,
        ids: (0..n).map(|i| format!("{i:05}")).collect(),
        boxes: None,
    }
}

fn model(dim: usize) -> ModelState {
    let dims: Vec<(Scale, usize)> = Scale::ALL.into_iter().map(|s| (s, dim)).collect();
    ModelState::new(ModelConfig::new(BackboneConfig::tiny(RES), &dims, CLASSES), 1).unwrap()
}

fn short_plan(mask: ScaleMask) -> TrainPlan {
    TrainPlan {
        knowledge_epochs: 2,
        classification_epochs: 2,
        batch_size: 8,
        scales: mask,
        ..TrainPlan::default()
    }
}

#[test]
fn cosine_loss_examples() {
    assert!((cosine_loss(&[1.0, 0.0], &[-2.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((cosine_loss(&[3.0, 4.0], &[3.0, 4.0]).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(cosine_loss(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
    assert!((cosine_loss(&[1.0, 0.0], &[1.0, 1.0]).unwrap() + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    assert_eq!(cosine_loss(&[0.0, 0.0], &[1.0, 0.0]), Err(TrainError::ZeroVector));
    assert!(matches!(
        cosine_loss(&[1.0], &[1.0, 0.0]),
        Err(TrainError::DimensionMismatch { .. })
    ));
}

#[test]
fn negatives_are_distinct_and_exclude_label() {
    let mut r = rng::stream(0, &[]);
    for _ in 0..200 {
        let n = sample_negatives(2, 6, 3, &mut r);
        assert_eq!(n.len(), 3);
        assert!(n.windows(2).all(|w| w[0] < w[1]));
        assert!(!n.contains(&2));
    }
    assert_eq!(sample_negatives(1, 4, 10, &mut r), vec![0, 2, 3]);
}

#[test]
fn tape_loss_matches_scalar_oracle() {
    let b = bundle(5);
    let mut r = rng::stream(4, &[]);
    let labels = vec![0, 2, 1, 1];
    let rows: Vec<Vec<f32>> = (0..2)
        .map(|_| (0..labels.len() * 5).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let scales = [Scale::Small, Scale::Large];

    let mut tape = Tape::new();
    let heads: Vec<(Scale, _)> = scales
        .iter()
        .zip(&rows)
        .map(|(&s, v)| (s, tape.param(Tensor::new(vec![labels.len(), 5], v.clone()).unwrap())))
        .collect();
    let mut rngs = vec![rng::stream(0, &[]), rng::stream(1, &[])];
    // m ≥ K − 1 uses every wrong category, so the draw does not matter.
    let loss = knowledge_loss_on_tape(&mut tape, &heads, &labels, &b, CLASSES, 1.0, &mut rngs).unwrap();
    let on_tape = f64::from(tape.value(loss).data()[0]);

    let mask = ScaleMask::from_scales(&scales);
    let oracle: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let h: Vec<(Scale, &[f32])> = scales.iter().zip(&rows).map(|(&s, v)| (s, &v[i * 5..(i + 1) * 5])).collect();
            knowledge_loss(&h, l, &b, mask, CLASSES, 1.0, &mut rng::stream(9, &[])).unwrap()
        })
        .sum::<f64>()
        / labels.len() as f64;
    assert!((on_tape - oracle).abs() < 1e-5, "{on_tape} vs {oracle}");
}

proptest! {
    #[test]
    fn tape_loss_is_scale_invariant(c in 0.05f32..20.0, seed in 0u64..1000) {
        let b = bundle(4);
        let mut r = rng::stream(seed, &[]);
        let v: Vec<f32> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let eval = |v: Vec<f32>| {
            let mut tape = Tape::new();
            let h = tape.param(Tensor::new(vec![2, 4], v).unwrap());
            let mut rngs = vec![rng::stream(seed, &[])];
            let l = knowledge_loss_on_tape(&mut tape, &[(Scale::Medium, h)], &[0, 2], &b, 1, 0.5, &mut rngs).unwrap();
            f64::from(tape.value(l).data()[0])
        };
        let base = eval(v.clone());
        let scaled = eval(v.iter().map(|x| x * c).collect());
        prop_assert!((base - scaled).abs() < 1e-5);
    }
}

#[test]
fn disabled_scales_and_classifier_untouched_by_stage_one() {
    let b = bundle(6);
    let mut m = model(6);
    let (train, val) = (split(24, 1), split(9, 2));
    let before = |m: &ModelState, g| m.group_digest(g);
    let small = before(&m, ParamGroup::Injection(Scale::Small));
    let large = before(&m, ParamGroup::Injection(Scale::Large));
    let medium = before(&m, ParamGroup::Injection(Scale::Medium));
    let clf = before(&m, ParamGroup::Classifier);
    let report = run_knowledge_stage(&mut m, &train, &val, &b, &short_plan(ScaleMask::only(Scale::Medium))).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(m.group_digest(ParamGroup::Injection(Scale::Small)), small);
    assert_eq!(m.group_digest(ParamGroup::Injection(Scale::Large)), large);
    assert_eq!(m.group_digest(ParamGroup::Classifier), clf);
    assert_ne!(m.group_digest(ParamGroup::Injection(Scale::Medium)), medium);
}

#[test]
fn zero_epochs_change_nothing() {
    let b = bundle(6);
    let (train, val) = (split(12, 1), split(6, 2));
    let mut m = model(6);
    let digests: Vec<u64> = m.groups().into_iter().map(|g| m.group_digest(g)).collect();
    let plan = TrainPlan {
        knowledge_epochs: 0,
        classification_epochs: 0,
        ..short_plan(ScaleMask::ALL)
    };
    run_knowledge_stage(&mut m, &train, &val, &b, &plan).unwrap();
    let r = run_classification_stage(&mut m, &train, &val, &plan, ClassificationMode::Injected).unwrap();
    assert!(r.epochs.is_empty());
    assert_eq!(r.final_val_accuracy, r.initial_val_accuracy);
    let after: Vec<u64> = m.groups().into_iter().map(|g| m.group_digest(g)).collect();
    assert_eq!(digests, after);
}

#[test]
fn injected_stage_two_trains_only_the_classifier() {
    let b = bundle(6);
    let (train, val) = (split(24, 1), split(9, 2));
    let mut m = model(6);
    run_knowledge_stage(&mut m, &train, &val, &b, &short_plan(ScaleMask::ALL)).unwrap();
    let frozen: Vec<(ParamGroup, u64)> = m
        .groups()
        .into_iter()
        .filter(|&g| g != ParamGroup::Classifier)
        .map(|g| (g, m.group_digest(g)))
        .collect();
    let clf = m.group_digest(ParamGroup::Classifier);
    run_classification_stage(&mut m, &train, &val, &short_plan(ScaleMask::ALL), ClassificationMode::Injected).unwrap();
    for (g, d) in frozen {
        assert_eq!(m.group_digest(g), d, "{g:?} changed");
    }
    assert_ne!(m.group_digest(ParamGroup::Classifier), clf);
}

#[test]
fn baseline_and_injected_share_data_order() {
    let b = bundle(6);
    let (train, val) = (split(20, 1), split(6, 2));
    let plan = short_plan(ScaleMask::ALL);
    let mut injected = model(6);
    run_knowledge_stage(&mut injected, &train, &val, &b, &plan).unwrap();
    let a = run_classification_stage(&mut injected, &train, &val, &plan, ClassificationMode::Injected).unwrap();
    let mut base = model(6);
    let c = run_classification_stage(&mut base, &train, &val, &plan, ClassificationMode::Baseline).unwrap();
    assert_eq!(a.data_order_digest, c.data_order_digest);
    assert_eq!(epoch_order(0, 3, 50), epoch_order(0, 3, 50));
    assert_ne!(epoch_order(0, 3, 50), epoch_order(0, 4, 50));
}

#[test]
fn first_epoch_knowledge_loss_decreases() {
    let b = bundle(6);
    let (train, val) = (split(96, 1), split(9, 2));
    let mut m = model(6);
    let plan = TrainPlan {
        knowledge_epochs: 1,
        optimizer: kinject_core::tensor::AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..short_plan(ScaleMask::ALL)
    };
    let r = run_knowledge_stage(&mut m, &train, &val, &b, &plan).unwrap();
    let l = &r.first_epoch_batch_losses;
    assert_eq!(l.len(), 12);
    let head: f64 = l[..3].iter().sum::<f64>() / 3.0;
    let tail: f64 = l[l.len() - 3..].iter().sum::<f64>() / 3.0;
    assert!(tail < head, "{l:?}");
}

#[test]
fn bundle_rejects_bad_inputs() {
    let mut b = KnowledgeBundle::new(vec!["a".into(), "b".into()]);
    assert!(matches!(
        b.insert(Scale::Small, &[("a".into(), vec![1.0, 0.0])]),
        Err(TrainError::MissingCategory { .. })
    ));
    assert_eq!(
        b.insert(Scale::Small, &[("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 0.0])]),
        Err(TrainError::ZeroVector)
    );
    b.insert(Scale::Small, &[("a".into(), vec![3.0, 4.0]), ("b".into(), vec![0.0, 2.0])])
        .unwrap();
    assert_eq!(b.vector(Scale::Small, 0).unwrap(), &[0.6, 0.8]);
    assert!(b.covers(ScaleMask::ALL).is_err());
    assert!(b.covers(ScaleMask::only(Scale::Small)).is_ok());
}
