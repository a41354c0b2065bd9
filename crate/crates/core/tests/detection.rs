use mdfnet::detection::{
    AbnormalityClass, AnchorConfig, AnchorGrid, BBox, GroundTruthBox, HeadConfig, NUM_CLASSES, Proposal, RoiTarget,
    RpnConfig, assign_targets, decode_boxes, encode, generate_proposals, head_forward, label_anchors, mask_target, nms,
    read_outputs, register_head, register_rpn, roi_pool, roi_rect, rpn_head, score_order,
};
use mdfnet::tensor::kernels::CellRect;
use mdfnet::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_box(rng: &mut ChaCha8Rng, size: f64) -> BBox {
    let w = rng.gen_range(1.0..size / 2.0);
    let h = rng.gen_range(1.0..size / 2.0);
    BBox::new(rng.gen_range(0.0..size - w), rng.gen_range(0.0..size - h), w, h)
}

#[test]
fn paper_grid_has_2304_anchor_predictions() {
    let grid = AnchorGrid::build(&AnchorConfig::paper(), 16, 16, 32.0).unwrap();
    assert_eq!(grid.len(), 2304);
    let mut store = ParamStore::new(0);
    let cfg = RpnConfig::default();
    register_rpn(&mut store, 64, &cfg, grid.per_cell).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let fused = g.constant(rand_tensor(&[1, 64, 16, 16], &mut rng)).unwrap();
    let out = rpn_head(&mut g, &store, fused, &grid).unwrap();
    assert_eq!(g.value(out.obj).numel(), 2304);
    assert_eq!(g.value(out.deltas).numel(), 4 * 2304);
}

#[test]
fn anchor_layout_and_empty_grid() {
    let grid = AnchorGrid::build(&AnchorConfig::default(), 2, 3, 8.0).unwrap();
    // anchor (y=1, x=2, k=4): size 16, ratio 1, centered at (20, 12)
    let a = grid.boxes[(3 + 2) * 9 + 4];
    assert_eq!(a, BBox::new(12.0, 4.0, 16.0, 16.0));
    let empty = AnchorConfig { sizes: vec![], ratios: vec![1.0] };
    assert!(AnchorGrid::build(&empty, 2, 2, 8.0).is_err());
}

#[test]
fn equal_objectness_falls_back_to_anchor_index() {
    assert_eq!(score_order(&[0.5; 6]), vec![0, 1, 2, 3, 4, 5]);
    let grid = AnchorGrid::build(&AnchorConfig { sizes: vec![8.0], ratios: vec![1.0] }, 4, 4, 8.0).unwrap();
    let cfg = RpnConfig { nms_thresh: 0.7, ..RpnConfig::default() };
    let props = generate_proposals(&[0.0; 16], &[0.0; 64], &grid, &cfg, 32.0, 32.0).unwrap();
    // non-overlapping anchors: all survive, in index order
    let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
    assert_eq!(boxes, grid.boxes);
}

#[test]
fn zero_objectness_head_scores_one_half() {
    let grid = AnchorGrid::build(&AnchorConfig::default(), 8, 8, 8.0).unwrap();
    let cfg = RpnConfig::default();
    let mut store = ParamStore::new(1);
    register_rpn(&mut store, 16, &cfg, grid.per_cell).unwrap();
    store.zero_prefix("rpn.obj");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let fused = g.constant(rand_tensor(&[1, 16, 8, 8], &mut rng)).unwrap();
    let out = rpn_head(&mut g, &store, fused, &grid).unwrap();
    let props =
        generate_proposals(g.value(out.obj).data(), g.value(out.deltas).data(), &grid, &cfg, 64.0, 64.0).unwrap();
    assert!(!props.is_empty());
    assert!(props.iter().all(|p| p.score == 0.5));
    assert!(props.iter().all(|p| p.bbox.within(64.0, 64.0) && p.bbox.w > 0.0 && p.bbox.h > 0.0));
    assert!(props.len() <= cfg.post_nms);
}

/// Pairwise oracle: repeatedly take the best remaining box and delete
/// everything overlapping it by more than `t`.
fn nms_oracle(props: &[Proposal], t: f64) -> Vec<Proposal> {
    let iou = |a: &BBox, b: &BBox| {
        let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
        let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
        let inter = if ix > 0.0 && iy > 0.0 { ix * iy } else { 0.0 };
        inter / (a.w * a.h + b.w * b.h - inter)
    };
    let mut alive: Vec<usize> = (0..props.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if props[i].score > props[best].score || (props[i].score == props[best].score && i < best) {
                best = i;
            }
        }
        out.push(props[best]);
        alive.retain(|&i| i != best && iou(&props[i].bbox, &props[best].bbox) <= t);
    }
    out
}

#[test]
fn nms_small_cases() {
    let b = BBox::new(1.0, 1.0, 5.0, 5.0);
    let one = vec![Proposal { bbox: b, score: 0.3 }];
    assert_eq!(nms(&one, 0.5), one);
    let two = vec![Proposal { bbox: b, score: 0.8 }, Proposal { bbox: b, score: 0.9 }];
    assert_eq!(nms(&two, 0.5), vec![two[1]]);
    assert!(nms(&[], 0.5).is_empty());
}

#[test]
fn nms_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let props: Vec<Proposal> = (0..50)
            .map(|_| Proposal { bbox: rand_box(&mut rng, 64.0), score: (rng.gen_range(0..20) as f64) / 20.0 })
            .collect();
        let t = rng.gen_range(0.1..0.9);
        assert_eq!(nms(&props, t), nms_oracle(&props, t));
    }
}

/// Independent bin arithmetic in integers.
fn roi_pool_oracle(map: &Tensor, r: &CellRect, ph: usize, pw: usize) -> Vec<f64> {
    let (_, c, _, _) = map.dims4().unwrap();
    let (lh, lw) = (r.y1 - r.y0, r.x1 - r.x0);
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..ph {
            for j in 0..pw {
                let ys = r.y0 + (i * lh) / ph;
                let ye = r.y0 + ((i + 1) * lh).div_ceil(ph);
                let xs = r.x0 + (j * lw) / pw;
                let xe = r.x0 + ((j + 1) * lw).div_ceil(pw);
                let mut m = f64::NEG_INFINITY;
                for y in ys..ye {
                    for x in xs..xe {
                        m = m.max(map.at4(0, ch, y, x));
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

#[test]
fn roi_pool_constant_and_identity() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(vec![1, 3, 8, 8], 2.5)).unwrap();
    let y = roi_pool(&mut g, c, &[BBox::new(5.0, 9.0, 20.0, 30.0)], 8.0, 7).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 7, 7]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = rand_tensor(&[1, 2, 7, 7], &mut rng);
    let x = g.constant(map.clone()).unwrap();
    let y = roi_pool(&mut g, x, &[BBox::new(0.0, 0.0, 56.0, 56.0)], 8.0, 7).unwrap();
    assert_eq!(g.value(y).data(), map.data());
}

#[test]
fn roi_pool_matches_per_cell_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let map = rand_tensor(&[1, 3, h, w], &mut rng);
        let stride = 8.0;
        let boxes: Vec<BBox> = (0..4).map(|_| rand_box(&mut rng, (h.min(w) * 8) as f64)).collect();
        let mut g = Graph::new();
        let x = g.constant(map.clone()).unwrap();
        let y = roi_pool(&mut g, x, &boxes, stride, 7).unwrap();
        let got = g.value(y).data();
        let per = 3 * 49;
        for (k, b) in boxes.iter().enumerate() {
            let r = roi_rect(b, stride, h, w);
            assert!(r.x1 > r.x0 && r.y1 > r.y0 && r.x1 <= w && r.y1 <= h);
            assert_eq!(&got[k * per..(k + 1) * per], roi_pool_oracle(&map, &r, 7, 7).as_slice());
        }
    }
}

#[test]
fn sub_pixel_box_gets_one_cell() {
    let r = roi_rect(&BBox::new(17.0, 17.0, 0.1, 0.1), 8.0, 8, 8);
    assert_eq!(r, CellRect { x0: 2, y0: 2, x1: 3, y1: 3 });
    let r = roi_rect(&BBox::new(64.0, 64.0, 0.0, 0.0), 8.0, 8, 8);
    assert_eq!(r, CellRect { x0: 7, y0: 7, x1: 8, y1: 8 });
}

proptest! {
    #[test]
    fn roi_pool_is_monotone(seed in any::<u64>(), cell in 0usize..64, bump in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = rand_tensor(&[1, 1, 8, 8], &mut rng);
        let boxes: Vec<BBox> = (0..3).map(|_| rand_box(&mut rng, 64.0)).collect();
        let mut bigger = map.clone();
        bigger.data_mut()[cell] += bump;
        let pool = |m: Tensor| {
            let mut g = Graph::new();
            let x = g.constant(m).unwrap();
            let y = roi_pool(&mut g, x, &boxes, 8.0, 7).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (pool(map), pool(bigger));
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| y >= x));
    }

    #[test]
    fn nms_output_is_ordered_subset(seed in any::<u64>(), n in 0usize..30, t in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let props: Vec<Proposal> =
            (0..n).map(|_| Proposal { bbox: rand_box(&mut rng, 64.0), score: rng.r#gen() }).collect();
        let kept = nms(&props, t);
        prop_assert!(kept.iter().all(|k| props.contains(k)));
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.bbox.iou(&b.bbox) <= t);
            }
        }
    }
}

fn head_store(d: usize, clin: Option<usize>) -> ParamStore {
    let mut store = ParamStore::new(6);
    register_head(&mut store, d, clin, &HeadConfig::default()).unwrap();
    store
}

#[test]
fn classifier_input_widths() {
    let cfg = HeadConfig::default();
    assert_eq!(cfg.classifier_input(64, Some(64)), 3200);
    assert_eq!(cfg.classifier_input(64, None), 3136);
    assert_eq!(head_store(64, Some(64)).get("head.fc.w").unwrap().shape(), &[64, 3200]);
    assert_eq!(head_store(64, None).get("head.fc.w").unwrap().shape(), &[64, 3136]);
}

#[test]
fn zero_weights_give_uniform_scores() {
    let mut store = head_store(4, Some(5));
    for name in store.names().cloned().collect::<Vec<_>>() {
        store.zero_prefix(&name);
    }
    let mut g = Graph::new();
    let rois = g.constant(Tensor::ones(vec![3, 4, 7, 7])).unwrap();
    let z = g.constant(Tensor::ones(vec![1, 5])).unwrap();
    let out = head_forward(&mut g, &store, rois, Some(z)).unwrap();
    assert_eq!(g.shape(out.mask_logits), &[3, 5, 14, 14]);
    for det in read_outputs(&mut g, &out).unwrap() {
        assert_eq!(det.class_scores.len(), NUM_CLASSES);
        assert!(det.class_scores.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
    }
}

#[test]
fn one_d_fusion_path_is_live_and_length_checked() {
    let store = head_store(4, Some(5));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rois = rand_tensor(&[2, 4, 7, 7], &mut rng);
    let logits = |z: Tensor| {
        let mut g = Graph::new();
        let r = g.constant(rois.clone()).unwrap();
        let zv = g.constant(z).unwrap();
        let out = head_forward(&mut g, &store, r, Some(zv)).unwrap();
        g.value(out.cls_logits).clone()
    };
    let a = logits(rand_tensor(&[1, 5], &mut rng));
    let b = logits(rand_tensor(&[1, 5], &mut rng));
    assert!(a.max_abs_diff(&b) > 0.0);
    let mut g = Graph::new();
    let r = g.constant(rois.clone()).unwrap();
    let z = g.constant(Tensor::ones(vec![1, 6])).unwrap();
    assert!(head_forward(&mut g, &store, r, Some(z)).is_err());
    assert!(head_forward(&mut g, &store, r, None).is_err());
}

fn gt(class: AbnormalityClass, b: BBox) -> GroundTruthBox {
    GroundTruthBox { class, bbox: b }
}

#[test]
fn target_assignment_cases() {
    let g0 = gt(AbnormalityClass::Atelectasis, BBox::new(0.0, 0.0, 10.0, 10.0));
    let props = [
        BBox::new(0.0, 0.0, 10.0, 10.0),
        BBox::new(30.0, 30.0, 5.0, 5.0),
        BBox::new(0.0, 0.0, 10.0, 5.0), // IoU exactly 0.5
        BBox::new(0.0, 0.0, 10.0, 4.0), // IoU 0.4
    ];
    let t = assign_targets(&props, &[g0], 0.5, 0.3).unwrap();
    assert_eq!(t[0], RoiTarget::Foreground { class: AbnormalityClass::Atelectasis, gt: 0, deltas: [0.0; 4] });
    assert_eq!(t[1], RoiTarget::Background);
    assert!(matches!(t[2], RoiTarget::Foreground { .. }));
    assert_eq!(t[3], RoiTarget::Ignore);
    assert!(assign_targets(&props, &[g0], 0.3, 0.5).is_err());
    assert!(assign_targets(&props, &[], 0.5, 0.3).unwrap().iter().all(|t| *t == RoiTarget::Background));
}

#[test]
fn encode_decode_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let a = rand_box(&mut rng, 64.0);
        let b = rand_box(&mut rng, 64.0);
        let back = decode_boxes(&a, encode(&b, &a), 64.0, 64.0).unwrap();
        for (x, y) in [(back.x, b.x), (back.y, b.y), (back.w, b.w), (back.h, b.h)] {
            assert!((x - y).abs() < 1e-9);
        }
    }
    let clipped = decode_boxes(&BBox::new(50.0, 50.0, 10.0, 10.0), [1.0, 1.0, 0.0, 0.0], 64.0, 64.0).unwrap();
    assert!(clipped.within(64.0, 64.0));
}

#[test]
fn best_anchor_rule_marks_a_positive_for_every_gt() {
    let grid = AnchorGrid::build(&AnchorConfig::default(), 8, 8, 8.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let gts: Vec<GroundTruthBox> =
            (0..3).map(|_| gt(AbnormalityClass::Consolidation, rand_box(&mut rng, 64.0))).collect();
        let l = label_anchors(&grid.boxes, &gts, 0.7, 0.3);
        for j in 0..gts.len() {
            assert!(l.labels.iter().zip(&l.matched).any(|(&lab, &m)| lab == 1 && m == Some(j)));
        }
        for (a, &lab) in l.labels.iter().enumerate() {
            let best = gts.iter().map(|g| grid.boxes[a].iou(&g.bbox)).fold(0.0, f64::max);
            if best >= 0.7 {
                assert_eq!(lab, 1);
            }
            if lab == 0 {
                assert!(best < 0.3);
            }
        }
    }
}

#[test]
fn mask_of_identical_box_is_full() {
    let b = BBox::new(3.0, 4.0, 14.0, 7.0);
    assert!(mask_target(&b, &b, 14).iter().all(|&v| v == 1.0));
    let half = mask_target(&b, &BBox::new(3.0, 4.0, 7.0, 7.0), 14);
    assert_eq!(half.iter().sum::<f64>(), 98.0);
}
