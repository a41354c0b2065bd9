use mdfnet::checkpoint::Checkpoint;
use mdfnet::data::{Sample, SynthConfig, synth_generate};
use mdfnet::detection::{AbnormalityClass, BBox, HeadOutput, RpnOutput};
use mdfnet::model::{ClinicalInput, ForegroundRoi, Mode, Model, ModelConfig, SamplingPlan};
use mdfnet::training::{
    LossTerms, SMOOTH_L1_BETA, TrainConfig, UW_PARAM, UncertaintyWeights, compute_losses, smooth_l1, total_loss, train,
    train_observed,
};
use mdfnet::{Error, Graph, Tensor};
use proptest::prelude::*;

const BETA: f64 = 1.0 / 9.0;

fn samples(n_train: usize, n_test: usize, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let cfg = SynthConfig { n_train, n_test, lateral_fraction: 0.0, ..SynthConfig::default() };
    synth_generate(&cfg, seed).unwrap().samples().unwrap()
}

fn quick(mode: Mode) -> TrainConfig {
    let mut cfg = TrainConfig { epochs: 2, batch_size: 2, val_fraction: 0.0, ..TrainConfig::default() };
    cfg.model.mode = mode;
    cfg
}

#[test]
fn smooth_l1_examples() {
    assert_eq!(SMOOTH_L1_BETA, BETA);
    assert_eq!(smooth_l1(&[0.3, -2.0], &[0.3, -2.0], BETA).unwrap(), 0.0);
    assert!((smooth_l1(&[1.0], &[0.0], BETA).unwrap() - 17.0 / 18.0).abs() < 1e-15);
    let below = smooth_l1(&[BETA * (1.0 - 1e-13)], &[0.0], BETA).unwrap();
    let above = smooth_l1(&[BETA * (1.0 + 1e-13)], &[0.0], BETA).unwrap();
    assert!((below - 1.0 / 18.0).abs() < 1e-12 && (above - 1.0 / 18.0).abs() < 1e-12);
    assert!(smooth_l1(&[1.0, 2.0], &[1.0], BETA).is_err());
    assert!(smooth_l1(&[1.0], &[1.0], 0.0).is_err());
}

#[test]
fn unit_alpha_halves_the_sum() {
    let terms = LossTerms::from_array([0.4, 1.0, 2.0, 0.25, 3.0]);
    let t = total_loss(&terms, &UncertaintyWeights::from_alpha([1.0; 5]).unwrap()).unwrap();
    assert!((t - 6.65 / 2.0).abs() < 1e-12);
    assert!(UncertaintyWeights::from_alpha([1.0, 0.0, 1.0, 1.0, 1.0]).is_err());
    assert!(total_loss(&LossTerms::from_array([f64::NAN, 0.0, 0.0, 0.0, 0.0]), &UncertaintyWeights::default()).is_err());
}

#[test]
fn alpha_gradient_vanishes_at_half_the_loss() {
    for l in [0.1, 1.0, 10.0] {
        let terms = LossTerms { l_cls: l, ..LossTerms::default() };
        let a = (l / 2.0f64).sqrt();
        let w = UncertaintyWeights::from_alpha([a, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(w.grad_alpha(&terms)[0].abs() < 1e-6);
        let t = total_loss(&terms, &w).unwrap();
        assert!((t - (1.0 + (l / 2.0f64).ln())).abs() < 1e-12, "{l}: {t}");
        // central difference in α agrees with the closed form away from the minimum
        let f = |alpha: f64| total_loss(&terms, &UncertaintyWeights::from_alpha([alpha, 1.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let x = 1.7 * a;
        let h = 1e-6;
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        let w = UncertaintyWeights::from_alpha([x, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((fd - w.grad_alpha(&terms)[0]).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn total_is_monotone_in_each_term(
        l in prop::array::uniform5(0.0f64..50.0),
        s in prop::array::uniform5(-4.0f64..4.0),
        i in 0usize..5,
        bump in 1e-6f64..10.0,
    ) {
        let w = UncertaintyWeights { log_var: s };
        let base = total_loss(&LossTerms::from_array(l), &w).unwrap();
        let mut up = l;
        up[i] += bump;
        prop_assert!(total_loss(&LossTerms::from_array(up), &w).unwrap() > base);
    }

    #[test]
    fn smooth_l1_is_symmetric_and_nonnegative(d in prop::collection::vec(-5.0f64..5.0, 1..8), beta in 0.01f64..2.0) {
        let zero = vec![0.0; d.len()];
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let a = smooth_l1(&d, &zero, beta).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, smooth_l1(&neg, &zero, beta).unwrap());
    }
}

fn const_var(g: &mut Graph, shape: Vec<usize>, v: f64) -> mdfnet::Var {
    let n = shape.iter().product();
    g.constant(Tensor::new(shape, vec![v; n]).unwrap()).unwrap()
}

fn head_plan(r: usize, fg: usize) -> SamplingPlan {
    SamplingPlan {
        anchors: (0..10).collect(),
        anchor_labels: (0..10).map(|i| f64::from(u8::from(i < 3))).collect(),
        pos_anchors: vec![0, 1, 2],
        pos_anchor_deltas: vec![[0.0; 4]; 3],
        rois: vec![BBox::new(0.0, 0.0, 8.0, 8.0); r],
        roi_labels: (0..r).map(|i| if i < fg { 3 } else { 0 }).collect(),
        foreground: (0..fg)
            .map(|i| ForegroundRoi { roi: i, class: AbnormalityClass::PulmonaryEdema, deltas: [0.0; 4], mask: vec![1.0; 196] })
            .collect(),
    }
}

#[test]
fn uniform_scores_give_log_six_and_log_two() {
    let mut g = Graph::new();
    let rpn = RpnOutput { obj: const_var(&mut g, vec![12], 0.0), deltas: const_var(&mut g, vec![48], 0.0) };
    let head = HeadOutput {
        cls_logits: const_var(&mut g, vec![4, 6], 0.3),
        box_deltas: const_var(&mut g, vec![4, 20], 0.0),
        mask_logits: const_var(&mut g, vec![4, 5, 14, 14], 0.0),
    };
    let vars = compute_losses(&mut g, &rpn, Some(&head), &head_plan(4, 2)).unwrap();
    let t = vars.values(&g);
    assert!((t.l_cls - 6f64.ln()).abs() < 1e-12);
    assert!((t.l_obj_rpn - 2f64.ln()).abs() < 1e-12);
    assert!((t.l_mask - 2f64.ln()).abs() < 1e-12);
    assert_eq!((t.l_bb, t.l_bb_rpn), (0.0, 0.0));
    assert!(!vars.no_rois);
}

#[test]
fn perfect_predictions_and_empty_plans() {
    let mut g = Graph::new();
    let mut obj = vec![-40.0; 12];
    obj[..3].fill(40.0);
    let rpn = RpnOutput {
        obj: g.constant(Tensor::from_vec(obj)).unwrap(),
        deltas: const_var(&mut g, vec![48], 0.0),
    };
    let mut logits = vec![-40.0; 24];
    for r in 0..4 {
        logits[r * 6 + if r < 2 { 3 } else { 0 }] = 40.0;
    }
    let head = HeadOutput {
        cls_logits: g.constant(Tensor::new(vec![4, 6], logits).unwrap()).unwrap(),
        box_deltas: const_var(&mut g, vec![4, 20], 0.0),
        mask_logits: const_var(&mut g, vec![4, 5, 14, 14], 40.0),
    };
    let t = compute_losses(&mut g, &rpn, Some(&head), &head_plan(4, 2)).unwrap().values(&g);
    assert!(t.to_array().iter().all(|v| *v < 1e-9), "{t:?}");

    let empty = SamplingPlan {
        anchors: vec![],
        anchor_labels: vec![],
        pos_anchors: vec![],
        pos_anchor_deltas: vec![],
        rois: vec![],
        roi_labels: vec![],
        foreground: vec![],
    };
    let vars = compute_losses(&mut g, &rpn, None, &empty).unwrap();
    assert!(vars.no_rois);
    assert_eq!(vars.values(&g).to_array(), [0.0; 5]);
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let (tr, _) = samples(6, 0, 11);
    for resample in [false, true] {
        let mut cfg = quick(Mode::Mdf);
        cfg.lr = 0.0;
        cfg.epochs = 3;
        cfg.resample = resample;
        let out = train(&tr, &[], &cfg).unwrap();
        let fresh = Model::new(cfg.model.clone(), out.model.encoder.as_ref().map(|e| e.stats.clone()), cfg.seed).unwrap();
        for (name, t) in fresh.params.iter() {
            assert_eq!(out.model.params.get(name).unwrap(), t, "{name}");
        }
        if !resample {
            let h = &out.history;
            assert_eq!(h.len(), 3);
            assert!(h.windows(2).all(|w| w[0].terms == w[1].terms && w[0].total == w[1].total));
        }
    }
}

#[test]
fn overfits_a_single_sample() {
    let (tr, _) = samples(1, 0, 21);
    let mut cfg = quick(Mode::Mdf);
    cfg.epochs = 200;
    cfg.batch_size = 1;
    cfg.lr = 0.01;
    let out = train(&tr, &[], &cfg).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|r| r.total).collect();
    assert_eq!(losses.len(), 200);
    let avg: Vec<f64> = losses.windows(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    assert!(avg.windows(2).all(|w| w[1] < w[0]), "{avg:?}");
}

#[test]
fn alpha_stays_finite_and_positive() {
    let (tr, _) = samples(2, 0, 31);
    let mut cfg = quick(Mode::Mdf);
    cfg.epochs = 500;
    cfg.batch_size = 1;
    cfg.lr = 0.02;
    let mut steps = 0;
    let out = train_observed(&tr[..1], &[], &cfg, |r| {
        steps = r.steps;
        assert!(r.alpha.iter().all(|a| a.is_finite() && *a > 0.0), "{:?}", r.alpha);
    })
    .unwrap();
    assert_eq!(steps, 500);
    let s = out.model.params.get(UW_PARAM).unwrap();
    assert!(s.data().iter().any(|v| *v != 0.0));
    let floor = cfg.log_var_floor.unwrap();
    assert!(s.data().iter().all(|v| *v >= floor), "{:?}", s.data());
    // the mask term is near-trivial on one image, so its weight sits on the floor
    assert!(s.data().contains(&floor), "{:?}", s.data());
}

#[test]
fn same_seed_gives_identical_checkpoint_bytes() {
    let (tr, val) = samples(6, 2, 41);
    let cfg = quick(Mode::Mdf);
    let a = train(&tr, &val, &cfg).unwrap().model.to_checkpoint(Default::default()).unwrap().to_bytes().unwrap();
    let b = train(&tr, &val, &cfg).unwrap().model.to_checkpoint(Default::default()).unwrap().to_bytes().unwrap();
    assert_eq!(a, b);
    let c = train(&tr, &val, &TrainConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a, c.model.to_checkpoint(Default::default()).unwrap().to_bytes().unwrap());
}

#[test]
fn checkpoint_round_trip_reproduces_detections() {
    let (tr, val) = samples(4, 2, 51);
    for mode in [Mode::Baseline, Mode::Mdf] {
        let out = train(&tr, &[], &quick(mode)).unwrap();
        let bytes = out.model.to_checkpoint(Default::default()).unwrap().to_bytes().unwrap();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.cfg, out.model.cfg);
        for s in &val {
            let d = |m: &Model| m.detect(&m.params, &s.image, &ClinicalInput::new(Some(&s.clinical)), 0.0).unwrap();
            assert_eq!(d(&back), d(&out.model));
        }
    }
}

#[test]
fn checkpoint_config_mismatch_is_reported() {
    let (tr, _) = samples(2, 0, 61);
    let out = train(&tr, &[], &TrainConfig { epochs: 1, ..quick(Mode::Mdf) }).unwrap();
    let ck = out.model.to_checkpoint(Default::default()).unwrap();
    let mut other = ModelConfig::desk();
    other.head.hidden += 1;
    assert!(matches!(Model::from_checkpoint_with(&ck, other), Err(Error::CheckpointMismatch(_))));
    let baseline = ModelConfig { mode: Mode::Baseline, ..ModelConfig::desk() };
    assert!(matches!(Model::from_checkpoint_with(&ck, baseline), Err(Error::CheckpointMismatch(_))));
    let mut ck2 = ck.clone();
    ck2.tensors.shift_remove("norm.mean");
    assert!(matches!(Model::from_checkpoint(&ck2), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn exploding_learning_rate_reports_the_step() {
    let (tr, _) = samples(2, 0, 71);
    let cfg = TrainConfig { lr: 1e12, momentum: 0.0, clip_norm: None, epochs: 20, ..quick(Mode::Mdf) };
    match train(&tr, &[], &cfg) {
        Err(Error::Diverged { step, .. }) => assert!(step < 20),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history.len())),
    }
}

#[test]
fn validation_drives_model_selection() {
    let (tr, val) = samples(8, 4, 81);
    let cfg = TrainConfig { epochs: 4, patience: 1, ..quick(Mode::Mdf) };
    let out = train(&tr, &val, &cfg).unwrap();
    let maps: Vec<f64> = out.history.iter().map(|r| r.val_map.unwrap()).collect();
    let best = maps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(maps[out.best_epoch], best);
    assert!(maps[..out.best_epoch].iter().all(|m| *m < best));
    assert!(out.history.len() <= out.best_epoch + 2);
    assert_eq!(out.stopped_early, out.history.len() < 4);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("epochs.csv");
    out.write_history_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("epoch,steps,lr,total,l_cls,l_bb,l_mask,l_obj_rpn,l_bb_rpn,alpha_l_cls"));
    assert_eq!(lines.count(), out.history.len());
}

#[test]
fn config_validation() {
    assert!(train(&[], &[], &TrainConfig::default()).is_err());
    let (tr, _) = samples(1, 0, 91);
    assert!(train(&tr, &[], &TrainConfig { batch_size: 0, ..TrainConfig::default() }).is_err());
    assert!(train(&tr, &[], &TrainConfig { momentum: 1.0, ..TrainConfig::default() }).is_err());
    assert!(train(&tr, &[], &TrainConfig { clip_norm: Some(0.0), ..TrainConfig::default() }).is_err());
    assert!(train(&tr, &[], &TrainConfig { log_var_floor: Some(f64::NAN), ..TrainConfig::default() }).is_err());
}

