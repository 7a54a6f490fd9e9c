use proptest::prelude::*;

use offnadir_core::datagen::{displacement_px, rasterize_mask, ViewGeometry};
use offnadir_core::geometry::{Point, Polygon};
use offnadir_core::losses::{binary_focal_loss, bce_loss, dice_loss, jaccard_loss, mutual_loss, MaskPair};
use offnadir_core::metrics::{confusion, read_confusion_csv, score, write_confusion_csv, ConfusionCounts, TileConfusion};
use offnadir_core::trainers::{plateau_step, PlateauConfig, PlateauState};

fn mask_and_probs(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..max).prop_flat_map(|n| (prop::collection::vec(0u8..2, n), prop::collection::vec(0.0f64..=1.0, n)))
        .prop_map(|(y, p)| (y.into_iter().map(f64::from).collect(), p))
}

fn binary_pair(max: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1..max).prop_flat_map(|n| (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n)))
}

proptest! {
    #[test]
    fn loss_ranges((y, p) in mask_and_probs(200)) {
        let pair = MaskPair::new(&y, &p).unwrap();
        let d = dice_loss(pair).value;
        let j = jaccard_loss(pair).value;
        prop_assert!((0.0..1.0).contains(&d), "dice {d}");
        prop_assert!((0.0..1.0).contains(&j), "jaccard {j}");
        prop_assert!(bce_loss(pair).value >= 0.0);
        prop_assert!(binary_focal_loss(pair, 2.0, 0.25).value >= 0.0);
    }

    #[test]
    fn dice_moves_down_toward_target((y, p) in mask_and_probs(100), t in 0.0f64..=1.0) {
        let closer: Vec<f64> = y.iter().zip(&p).map(|(&yi, &pi)| pi + t * (yi - pi)).collect();
        let before = dice_loss(MaskPair::new(&y, &p).unwrap()).value;
        let after = dice_loss(MaskPair::new(&y, &closer).unwrap()).value;
        prop_assert!(after <= before + 1e-12, "{before} -> {after}");
    }

    #[test]
    fn mutual_loss_is_a_symmetric_divergence(
        (a, b) in (1usize..100).prop_flat_map(|n| (prop::collection::vec(0.01f64..0.99, n), prop::collection::vec(0.01f64..0.99, n)))
    ) {
        let ab = mutual_loss(&a, &b).unwrap().value;
        let ba = mutual_loss(&b, &a).unwrap().value;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(mutual_loss(&a, &a).unwrap().value, 0.0);
        if a != b {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn confusion_counts_cover_every_pixel((pred, gt) in binary_pair(500)) {
        let c = confusion(&pred, &gt).unwrap();
        prop_assert_eq!(c.total(), pred.len() as u64);
        prop_assert_eq!(c.tp + c.fn_, gt.iter().map(|&g| g as u64).sum::<u64>());
        prop_assert_eq!(c.tp + c.fp, pred.iter().map(|&g| g as u64).sum::<u64>());
    }

    #[test]
    fn f1_is_a_function_of_iou((pred, gt) in binary_pair(500)) {
        let s = score(&confusion(&pred, &gt).unwrap());
        if !s.degenerate {
            prop_assert!(s.iou <= s.f1 + 1e-15);
            prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_pixel_order((pred, gt) in binary_pair(300), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..pred.len()).collect();
        let mut state = seed | 1;
        for i in (1..order.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            order.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let pp: Vec<u8> = order.iter().map(|&i| pred[i]).collect();
        let gp: Vec<u8> = order.iter().map(|&i| gt[i]).collect();
        prop_assert_eq!(confusion(&pred, &gt).unwrap(), confusion(&pp, &gp).unwrap());
    }

    #[test]
    fn pooled_counts_are_additive((pred, gt) in binary_pair(400), cut in 0.0f64..1.0) {
        let k = (cut * pred.len() as f64) as usize;
        let whole = confusion(&pred, &gt).unwrap();
        let parts = confusion(&pred[..k], &gt[..k]).unwrap_or_default() + confusion(&pred[k..], &gt[k..]).unwrap_or_default();
        prop_assert_eq!(whole, parts);
    }

    #[test]
    fn confusion_csv_round_trips(rows in prop::collection::vec((any::<u32>(), any::<u32>(), any::<u32>(), any::<u32>(), 0usize..4, 0usize..3), 0..20)) {
        let strata = ["low", "mid", "high", "sky"];
        let gsd = [30, 60, 120];
        let rows: Vec<TileConfusion> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (tp, fp, fn_, tn, s, g))| TileConfusion {
                tile_id: format!("t{i:04}"),
                tp: tp as u64,
                fp: fp as u64,
                fn_: fn_ as u64,
                tn: tn as u64,
                stratum: strata[s].into(),
                gsd_cm: gsd[g],
            })
            .collect();
        let mut buf = Vec::new();
        write_confusion_csv(&rows, &mut buf).unwrap();
        prop_assert_eq!(read_confusion_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn rasterizer_matches_point_in_polygon(
        cx in 2.0f64..14.0, cy in 2.0f64..14.0, w in 0.5f64..10.0, h in 0.5f64..10.0, angle in 0.0f64..std::f64::consts::PI, gsd in prop::sample::select(vec![0.3, 0.6, 1.2])
    ) {
        let size = 24;
        let poly = Polygon::rotated_rect(Point::new(cx, cy), w, h, angle);
        prop_assert!(poly.is_simple());
        prop_assert!((poly.area() - w * h).abs() < 1e-9);
        let mask = rasterize_mask(std::slice::from_ref(&poly), Point::new(0.0, 0.0), size, gsd);
        for r in 0..size {
            for c in 0..size {
                let centre = Point::new((c as f64 + 0.5) * gsd, (r as f64 + 0.5) * gsd);
                prop_assert_eq!(mask[r * size + c] == 1, poly.contains(centre), "pixel ({}, {})", r, c);
            }
        }
    }

    #[test]
    fn nadir_view_never_displaces(height in 0.0f64..200.0, azimuth in 0.0f64..6.3, gsd in 0.1f64..2.0) {
        let view = ViewGeometry { off_nadir_tan: 0.0, azimuth_rad: azimuth };
        let (dx, dy) = displacement_px(height, &view, gsd);
        prop_assert_eq!(dx.abs() + dy.abs(), 0.0);
    }

    #[test]
    fn plateau_only_steps_down_by_tenths(ious in prop::collection::vec(0.0f64..1.0, 1..80), patience in 1usize..6) {
        let base = 1e-4;
        let mut state = PlateauState::new(base, PlateauConfig { patience, ..Default::default() });
        let mut prev = base;
        for v in ious {
            let lr = plateau_step(&mut state, v);
            prop_assert!(lr <= prev);
            prop_assert_eq!(lr, base / 10f64.powi(state.reductions as i32));
            prev = lr;
        }
    }
}

#[test]
fn default_confusion_is_degenerate() {
    assert_eq!(ConfusionCounts::default().total(), 0);
    assert!(score(&ConfusionCounts::default()).degenerate);
}
