use mdfnet::clinical::{ClinicalRecord, Gender, NormalizationStats, fit_normalization};
use mdfnet::detection::{AbnormalityClass, BBox, GroundTruthBox};
use mdfnet::model::{ClinicalInput, Mode, Model, ModelConfig};
use mdfnet::tensor::gradcheck::finite_diff_check_params;
use mdfnet::training::{LossTerms, UW_PARAM, UncertaintyWeights, total_loss};
use mdfnet::{Error, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(rng: &mut ChaCha8Rng) -> ClinicalRecord {
    ClinicalRecord {
        temperature: Some(rng.gen_range(96.0..103.0)),
        heartrate: Some(rng.gen_range(50.0..130.0)),
        resprate: Some(rng.gen_range(10.0..30.0)),
        o2sat: Some(rng.gen_range(88.0..100.0)),
        sbp: Some(rng.gen_range(90.0..170.0)),
        dbp: Some(rng.gen_range(50.0..100.0)),
        pain: Some(f64::from(rng.gen_range(0..=10))),
        acuity: Some(f64::from(rng.gen_range(1..=5))),
        age: Some(f64::from(rng.gen_range(18..=90))),
        gender: Some(if rng.r#gen() { Gender::M } else { Gender::F }),
    }
}

fn stats() -> NormalizationStats {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let recs: Vec<ClinicalRecord> = (0..30).map(|_| record(&mut rng)).collect();
    fit_normalization(&recs).unwrap()
}

fn tiny(mode: Mode) -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.mode = mode;
    c.image_size = 32;
    c.spatial.e = 5;
    c
}

fn image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![1, 1, size, size], (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn gts() -> Vec<GroundTruthBox> {
    vec![
        GroundTruthBox { class: AbnormalityClass::Consolidation, bbox: BBox::new(4.0, 5.0, 12.0, 10.0) },
        GroundTruthBox { class: AbnormalityClass::Atelectasis, bbox: BBox::new(17.0, 14.0, 9.0, 13.0) },
    ]
}

fn rpn_and_cls(model: &Model, img: &Tensor, rec: &ClinicalRecord) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let input = ClinicalInput::new(Some(rec));
    let trunk = model.trunk(&mut g, &model.params, img, &input).unwrap();
    let boxes = [BBox::new(2.0, 2.0, 12.0, 12.0), BBox::new(10.0, 8.0, 16.0, 20.0)];
    let head = model.head(&mut g, &model.params, &trunk, &boxes).unwrap();
    (g.value(trunk.rpn.obj).data().to_vec(), g.value(head.cls_logits).data().to_vec())
}

fn changed(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-12)
}

#[test]
fn modes_register_only_their_paths() {
    let s = stats();
    let base = Model::new(tiny(Mode::Baseline), None, 1).unwrap();
    assert!(base.encoder.is_none());
    assert!(!base.params.contains("clin.embed"));
    assert!(!base.params.contains("spa.0.up.w"));
    assert_eq!(base.params.get("head.fc.w").unwrap().shape(), &[64, 64 * 49]);

    let m1 = Model::new(tiny(Mode::Msf1d), Some(s.clone()), 1).unwrap();
    assert!(m1.params.contains("clin.embed"));
    assert!(!m1.params.names().any(|n| n.starts_with("spa.") || n.starts_with("clin.0")));
    assert_eq!(m1.params.get("head.fc.w").unwrap().shape(), &[64, 64 * 49 + 64]);

    let m3 = Model::new(tiny(Mode::Msf3d), Some(s.clone()), 1).unwrap();
    assert!(m3.params.names().any(|n| n.starts_with("spa.")));
    assert_eq!(m3.params.get("head.fc.w").unwrap().shape(), &[64, 64 * 49]);

    let mdf = Model::new(tiny(Mode::Mdf), Some(s), 1).unwrap();
    assert_eq!(mdf.params.get("head.fc.w").unwrap().shape(), &[64, 64 * 49 + 64]);
    assert_eq!(mdf.params.get(UW_PARAM).unwrap().shape(), &[5]);
}

#[test]
fn clinical_modes_require_statistics() {
    assert!(matches!(Model::new(tiny(Mode::Mdf), None, 1), Err(Error::Config(_))));
}

#[test]
fn baseline_never_reads_clinical_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rec = record(&mut rng);
    let img = image(32, 4);
    let base = Model::new(tiny(Mode::Baseline), Some(stats()), 2).unwrap();
    let input = ClinicalInput::new(Some(&rec));
    base.detect(&base.params, &img, &input, 0.0).unwrap();
    let mut g = Graph::new();
    let trunk = base.trunk(&mut g, &base.params, &img, &input).unwrap();
    let plan = base.plan(&g, &trunk, &gts(), &mut rng).unwrap();
    base.losses_on_trunk(&mut g, &base.params, &trunk, &plan).unwrap();
    assert_eq!(input.reads(), 0);

    let mdf = Model::new(tiny(Mode::Mdf), Some(stats()), 2).unwrap();
    let input = ClinicalInput::new(Some(&rec));
    mdf.detect(&mdf.params, &img, &input, 0.0).unwrap();
    assert_eq!(input.reads(), 1);
}

#[test]
fn clinical_modes_fail_without_a_record() {
    let mdf = Model::new(tiny(Mode::Mdf), Some(stats()), 2).unwrap();
    let r = mdf.detect(&mdf.params, &image(32, 1), &ClinicalInput::new(None), 0.05);
    assert!(matches!(r, Err(Error::MissingValue(_))));
}

#[test]
fn perturbing_clinical_data_reaches_only_the_active_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = record(&mut rng);
    let b = record(&mut rng);
    let img = image(32, 6);
    let s = stats();
    let expect = [(Mode::Baseline, false, false), (Mode::Msf1d, false, true), (Mode::Msf3d, true, true), (Mode::Mdf, true, true)];
    for (mode, rpn_moves, head_moves) in expect {
        let m = Model::new(tiny(mode), Some(s.clone()), 9).unwrap();
        let (ra, ca) = rpn_and_cls(&m, &img, &a);
        let (rb, cb) = rpn_and_cls(&m, &img, &b);
        assert_eq!(changed(&ra, &rb), rpn_moves, "{mode} rpn");
        assert_eq!(changed(&ca, &cb), head_moves, "{mode} head");
    }
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let rec = record(&mut rng);
    let img = image(32, 22);
    let mut model = Model::new(tiny(Mode::Mdf), Some(stats()), 23).unwrap();
    model.params.get_mut(UW_PARAM).unwrap().data_mut().copy_from_slice(&[0.3, -0.2, 0.1, 0.5, -0.4]);
    let input = ClinicalInput::new(Some(&rec));
    let mut g = Graph::new();
    let trunk = model.trunk(&mut g, &model.params, &img, &input).unwrap();
    let plan = model.plan(&g, &trunk, &gts(), &mut rng).unwrap();
    let (vars, _) = model.losses_on_trunk(&mut g, &model.params, &trunk, &plan).unwrap();
    let terms = vars.values(&g);
    assert!(terms.to_array().iter().all(|v| *v > 0.0), "{terms:?}");

    let f = |g: &mut Graph, s: &mdfnet::ParamStore| {
        let input = ClinicalInput::new(Some(&rec));
        model.losses_with_plan(g, s, &img, &input, &plan).map(|(_, t)| t)
    };
    let report = finite_diff_check_params(f, &model.params, 1e-6, 3, 24).unwrap();
    assert!(report.max_rel_error <= 1e-3, "{report:?}");
    assert!(report.checked >= 100);
}

#[test]
fn graph_total_agrees_with_pure_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let rec = record(&mut rng);
    let img = image(32, 32);
    let mut model = Model::new(tiny(Mode::Msf3d), Some(stats()), 33).unwrap();
    model.params.get_mut(UW_PARAM).unwrap().data_mut().copy_from_slice(&[0.1, 0.2, -0.3, 0.0, 1.0]);
    let input = ClinicalInput::new(Some(&rec));
    let mut g = Graph::new();
    let trunk = model.trunk(&mut g, &model.params, &img, &input).unwrap();
    let plan = model.plan(&g, &trunk, &gts(), &mut rng).unwrap();
    let (vars, total) = model.losses_on_trunk(&mut g, &model.params, &trunk, &plan).unwrap();
    let w = UncertaintyWeights::from_store(&model.params).unwrap();
    let pure = total_loss(&vars.values(&g), &w).unwrap();
    assert!((g.value(total).item() - pure).abs() < 1e-12);
}

#[test]
fn plan_appends_ground_truths_as_foreground() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let model = Model::new(tiny(Mode::Baseline), None, 42).unwrap();
    let mut g = Graph::new();
    let trunk = model.trunk(&mut g, &model.params, &image(32, 43), &ClinicalInput::new(None)).unwrap();
    let plan = model.plan(&g, &trunk, &gts(), &mut rng).unwrap();
    assert!(plan.foreground.len() >= 2);
    assert!(plan.rois.len() <= model.cfg.roi_batch);
    assert!(!plan.pos_anchors.is_empty());
    assert!(plan.anchors.len() <= model.cfg.rpn.batch);
    for f in &plan.foreground {
        assert_eq!(plan.roi_labels[f.roi], f.class.index() + 1);
        assert_eq!(f.mask.len(), 14 * 14);
    }
    let n_pos = plan.anchor_labels.iter().filter(|&&l| l == 1.0).count();
    assert_eq!(n_pos, plan.pos_anchors.len());
}

#[test]
fn detections_are_sorted_capped_and_inside_the_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let rec = record(&mut rng);
    let mut cfg = tiny(Mode::Mdf);
    cfg.max_detections = 7;
    let model = Model::new(cfg, Some(stats()), 52).unwrap();
    let dets = model.detect(&model.params, &image(32, 53), &ClinicalInput::new(Some(&rec)), 0.0).unwrap();
    assert!(dets.len() <= 7);
    assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    for d in &dets {
        assert!(d.bbox.within(32.0, 32.0));
        assert!((0.0..=1.0).contains(&d.score));
    }
    let none = model.detect(&model.params, &image(32, 53), &ClinicalInput::new(Some(&rec)), 1.1).unwrap();
    assert!(none.is_empty());
}

#[test]
fn mode_names_round_trip() {
    for m in Mode::ALL {
        assert_eq!(m.name().parse::<Mode>().unwrap(), m);
    }
    assert!("both".parse::<Mode>().is_err());
}

#[test]
fn unit_alpha_total_is_half_the_sum() {
    let t = LossTerms::from_array([0.4, 1.0, 2.0, 0.1, 3.0]);
    let total = total_loss(&t, &UncertaintyWeights::default()).unwrap();
    assert!((total - 6.5 / 2.0).abs() < 1e-12);
}
