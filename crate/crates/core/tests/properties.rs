use densedet_core::assignment::{ams_labels, pono_labels, pred_iou_map};
use densedet_core::eval::average_precision;
use densedet_core::loss::{weight_gradients, LossTerms};
use densedet_core::{
    assign_ao, build_grid, compute_pono, iou, AnchorGrid, AnchorSet, BBox, BalanceWeights, Detection, GroundTruth,
    Offsets,
};
use proptest::prelude::*;

fn arb_box(extent: f64) -> impl Strategy<Value = BBox> {
    (2.0..extent - 2.0, 2.0..extent - 2.0, 4.0..24.0f64, 4.0..24.0f64)
        .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn arb_scene() -> impl Strategy<Value = (AnchorGrid, GroundTruth)> {
    let shapes = (1..3usize, 1..4usize).prop_flat_map(|(n_c, n_a)| {
        prop::collection::vec(prop::collection::vec((3.0..40.0f64, 3.0..40.0f64), n_a), n_c)
    });
    shapes
        .prop_flat_map(|shapes| {
            let n_c = shapes.len();
            let objects = prop::collection::vec((arb_box(48.0), 0..n_c), 0..6);
            (Just(shapes), objects)
        })
        .prop_map(|(shapes, objects)| {
            let grid = build_grid(&AnchorSet::new(shapes).unwrap(), 6, 6, 8).unwrap();
            let (boxes, classes) = objects.into_iter().unzip();
            (grid, GroundTruth::new(boxes, classes).unwrap())
        })
}

proptest! {
    #[test]
    fn every_object_has_a_unit_pono_cell((grid, gt) in arb_scene()) {
        let asg = assign_ao(&grid, &gt);
        let o = compute_pono(&grid, &gt, &asg);
        for n in 0..gt.len() {
            prop_assert!(asg.values().iter().zip(o.values()).any(|(a, &v)| *a == Some(n) && v == 1.0));
        }
    }

    #[test]
    fn assignment_respects_class_and_overlap((grid, gt) in arb_scene()) {
        let asg = assign_ao(&grid, &gt);
        let o = compute_pono(&grid, &gt, &asg);
        for (idx, a) in asg.values().iter().enumerate() {
            match a {
                Some(n) => {
                    let ao = iou(&grid.cells()[idx], &gt.boxes[*n]);
                    prop_assert_eq!(gt.class_ids[*n], grid.dims().grid_of(idx).0);
                    prop_assert!(ao > 0.0);
                    prop_assert!(o[idx] >= ao && o[idx] <= 1.0);
                }
                None => prop_assert_eq!(o[idx], 0.0),
            }
        }
    }

    #[test]
    fn ams_positives_are_pono_positives(
        (grid, gt) in arb_scene(),
        shift in -0.4..0.4f64,
        scale in -0.5..0.5f64,
    ) {
        let asg = assign_ao(&grid, &gt);
        let o = compute_pono(&grid, &gt, &asg);
        let offsets = vec![Offsets::new(shift, -shift, scale, -scale); grid.cells().len()];
        let o_hat = pred_iou_map(&grid, &offsets, &gt, &asg).unwrap();
        let ams = ams_labels(&o, &o_hat, 0.5).unwrap();
        let pono = pono_labels(&o, 0.5);
        for (a, p) in ams.values().iter().zip(pono.values()) {
            prop_assert!(!a || *p);
        }
    }

    #[test]
    fn grids_without_positives_get_no_weight_gradient(
        pos in prop::collection::vec(0usize..3, 6),
        loc in prop::collection::vec(0.0..3.0f64, 6),
        cls in prop::collection::vec(0.0..3.0f64, 6),
        s in prop::collection::vec(-2.0..2.0f64, 14),
    ) {
        let terms = LossTerms {
            n_classes: 2,
            n_anchors: 3,
            loc,
            cls_pos_norm: cls.clone(),
            cls,
            n_pos: pos.iter().sum(),
            per_grid_pos: pos.clone(),
        };
        let mut w = BalanceWeights::new(2, 3, 1.0);
        w.set_flat(&s);
        let g = weight_gradients(&terms, &w).unwrap();
        for (k, &n) in pos.iter().enumerate() {
            if n == 0 {
                prop_assert_eq!(g[2 + k], 0.0);
                prop_assert_eq!(g[8 + k], 0.0);
            }
        }
    }

    #[test]
    fn perfect_detections_score_full_ap(boxes in prop::collection::vec(arb_box(64.0), 1..6), seed in 0.0..1.0f64) {
        let gt = GroundTruth::new(boxes.clone(), vec![0; boxes.len()]).unwrap();
        let dets: Vec<Detection> = boxes
            .iter()
            .enumerate()
            .map(|(k, &bbox)| Detection { bbox, class_id: 0, score: (seed + k as f64 * 0.1) % 1.0 })
            .collect();
        prop_assert_eq!(average_precision(&[dets.clone()], &[gt.clone()], 0.5, 0), 1.0);
        // a duplicate of every detection, scored lower, only adds false positives after full recall
        let mut doubled = dets.clone();
        doubled.extend(dets.iter().map(|d| Detection { score: d.score - 2.0, ..*d }));
        prop_assert_eq!(average_precision(&[doubled], &[gt], 0.5, 0), 1.0);
    }

    #[test]
    fn ap_stays_in_unit_interval(
        gt_boxes in prop::collection::vec(arb_box(64.0), 0..5),
        det_boxes in prop::collection::vec((arb_box(64.0), 0.0..1.0f64), 0..10),
    ) {
        let gt = GroundTruth::new(gt_boxes.clone(), vec![0; gt_boxes.len()]).unwrap();
        let dets: Vec<Detection> = det_boxes
            .into_iter()
            .map(|(bbox, score)| Detection { bbox, class_id: 0, score })
            .collect();
        let ap = average_precision(&[dets], &[gt], 0.5, 0);
        prop_assert!((0.0..=1.0).contains(&ap));
    }
}
