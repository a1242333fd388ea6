use proptest::prelude::*;
use rscn_core::detector::Detection;
use rscn_core::eval::ap50;
use rscn_core::geometry::BBox;
use rscn_core::synthbench::GtObject;

fn bbox() -> impl Strategy<Value = BBox> {
    (0..10i32, 0..10i32, 2..8i32, 2..8i32)
        .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
}

fn gt() -> impl Strategy<Value = GtObject> {
    (0..2usize, bbox()).prop_map(|(class, bbox)| GtObject { class, bbox })
}

fn det() -> impl Strategy<Value = Detection> {
    (0..2usize, bbox(), 0.01f64..1.0).prop_map(|(class, bbox, score)| Detection { bbox, class, score })
}

/// Two images, up to 4 GTs and 6 detections each.
fn case() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<GtObject>>)> {
    (
        prop::collection::vec(prop::collection::vec(det(), 0..=6), 2),
        prop::collection::vec(prop::collection::vec(gt(), 0..=4), 2),
    )
}

fn remap(dets: &[Vec<Detection>], f: impl Fn(f64) -> f64) -> Vec<Vec<Detection>> {
    dets.iter()
        .map(|ds| ds.iter().map(|d| Detection { score: f(d.score), ..*d }).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ap_is_a_probability((dets, gts) in case()) {
        for c in 0..2 {
            if let Some(ap) = ap50(&dets, &gts, c) {
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }
    }

    #[test]
    fn monotone_score_transforms_leave_ap_unchanged((dets, gts) in case()) {
        let squashed = remap(&dets, |s| (3.0 * s).tanh());
        let shifted = remap(&dets, |s| s * s * s + 7.0);
        for c in 0..2 {
            let ap = ap50(&dets, &gts, c);
            prop_assert_eq!(ap, ap50(&squashed, &gts, c));
            prop_assert_eq!(ap, ap50(&shifted, &gts, c));
        }
    }

    #[test]
    fn lowest_scored_duplicate_changes_nothing((dets, gts) in case(), img in 0..2usize, k in 0..6usize) {
        prop_assume!(!dets[img].is_empty());
        let d = dets[img][k % dets[img].len()];
        let mut more = dets.clone();
        more[img].push(Detection { score: 0.001, ..d });
        prop_assert_eq!(ap50(&dets, &gts, d.class), ap50(&more, &gts, d.class));
    }

    #[test]
    fn exact_boxes_at_any_scores_give_full_ap(gts in prop::collection::vec(prop::collection::vec(gt(), 1..=4), 2),
                                              scores in prop::collection::vec(0.01f64..1.0, 8)) {
        let mut i = 0;
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|o| { i += 1; Detection { bbox: o.bbox, class: o.class, score: scores[i - 1] } }).collect())
            .collect();
        for c in 0..2 {
            if let Some(ap) = ap50(&dets, &gts, c) {
                // identical GTs of one class can steal each other's match
                let distinct = gts.iter().all(|g| {
                    g.iter().enumerate().all(|(a, x)| g.iter().skip(a + 1).all(|y| y.class != x.class || x.bbox.iou_unchecked(&y.bbox) < 0.5))
                });
                if distinct {
                    prop_assert_eq!(ap, 1.0);
                }
            }
        }
    }
}
