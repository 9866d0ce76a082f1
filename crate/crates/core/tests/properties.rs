use proptest::prelude::*;

use ptrack::autodiff::{Tape, Tensor};
use ptrack::data::{tokenize, Vocabulary};
use ptrack::harness::metrics::{tally_boxes, threshold, AUC_BINS};
use ptrack::harness::{Checkpoint, DType};
use ptrack::heads::{decode_box, BoxMaps};
use ptrack::inference::{hanning_2d, CropWindow};
use ptrack::losses::{
    boxinst_projection_loss, gaussian_target, giou_loss, l1_box_loss, mask_bce_dice, weighted_focal, BoxVars,
};
use ptrack::peft::MAX_TEXT_TOKENS;
use ptrack::BBox;

fn unit_box() -> impl Strategy<Value = BBox> {
    (0.05..0.95f64, 0.05..0.95f64, 0.02..0.6f64, 0.02..0.6f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn scalar(tape: &Tape, v: ptrack::autodiff::Var) -> f64 {
    tape.value(v).item().unwrap()
}

fn giou_value(a: BBox, b: BBox) -> f64 {
    let mut tape = Tape::new();
    let p = BoxVars::constant(&mut tape, a);
    let v = giou_loss(&mut tape, p, b).unwrap();
    scalar(&tape, v)
}

fn maps(g: usize, score: Vec<f64>, offset: Vec<f64>, size: Vec<f64>) -> BoxMaps {
    BoxMaps {
        score: Tensor::new(vec![1, g, g], score).unwrap(),
        offset: Tensor::new(vec![2, g, g], offset).unwrap(),
        size: Tensor::new(vec![2, g, g], size).unwrap(),
        grid: g,
    }
}

fn maps_strategy() -> impl Strategy<Value = BoxMaps> {
    (2usize..9).prop_flat_map(|g| {
        let n = g * g;
        (
            prop::collection::vec(0.0..1.0f64, n),
            prop::collection::vec(-3.0..3.0f64, 2 * n),
            prop::collection::vec(-3.0..3.0f64, 2 * n),
        )
            .prop_map(move |(s, o, z)| maps(g, s, o, z))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn giou_loss_is_symmetric_translation_invariant_and_bounded(a in unit_box(), b in unit_box(), dx in -5.0..5.0f64, dy in -5.0..5.0f64) {
        let ab = giou_value(a, b);
        let ba = giou_value(b, a);
        prop_assert!((ab - ba).abs() < 1e-12);
        let shift = |x: BBox| BBox::new(x.cx + dx, x.cy + dy, x.w, x.h);
        prop_assert!((giou_value(shift(a), shift(b)) - ab).abs() < 1e-9);
        prop_assert!((0.0..=2.0).contains(&ab));
        prop_assert!((ab - (1.0 - a.giou(b))).abs() < 1e-12);
    }

    #[test]
    fn decoded_boxes_are_valid_for_finite_maps(m in maps_strategy()) {
        let (b, score) = decode_box(&m, None);
        prop_assert!(b.is_normalized(), "{b:?}");
        prop_assert!(!b.is_degenerate());
        prop_assert!(score.is_finite());
    }

    #[test]
    fn decode_ignores_positive_rescaling(m in maps_strategy(), c in 1e-3..1e3f64, hann in any::<bool>()) {
        let penalty = hann.then(|| hanning_2d(m.grid).unwrap());
        let mut scaled = m.clone();
        scaled.score = m.score.map(|v| v * c);
        prop_assert_eq!(decode_box(&m, penalty.as_ref()).0, decode_box(&scaled, penalty.as_ref()).0);
    }

    #[test]
    fn hanning_keeps_an_interior_delta(g in 3usize..12, cell in any::<prop::sample::Index>(), peak in 0.01..1.0f64) {
        let n = g * g;
        let window = hanning_2d(g).unwrap();
        let interior: Vec<usize> = (0..n).filter(|&i| window.data()[i] > 0.0).collect();
        let at = interior[cell.index(interior.len())];
        let mut score = vec![0.0; n];
        score[at] = peak;
        let offset = (0..2 * n).map(|i| (i as f64 * 0.13).fract()).collect();
        let size = (0..2 * n).map(|i| 0.1 + (i as f64 * 0.07).fract() * 0.5).collect();
        let m = maps(g, score, offset, size);
        prop_assert_eq!(decode_box(&m, None), decode_box(&m, Some(&window)));
    }

    #[test]
    fn crop_affine_round_trip(cx in 20.0..108.0f64, cy in 20.0..108.0f64, w in 4.0..40.0f64, h in 4.0..40.0f64,
                              factor in 1.0..5.0f64, out in 8usize..129, u in 0.0..1.0f64, v in 0.0..1.0f64) {
        let win = CropWindow::around(BBox::new(cx, cy, w, h), factor, out).unwrap();
        let inner = BBox::new(u, v, 0.3 * u + 0.01, 0.2 * v + 0.01);
        let back = win.box_to_crop(win.box_to_frame(inner));
        for (a, b) in [(back.cx, inner.cx), (back.cy, inner.cy), (back.w, inner.w), (back.h, inner.h)] {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let (x, y) = win.to_frame(u * out as f64, v * out as f64);
        let (uu, vv) = win.to_crop(x, y);
        prop_assert!((uu - u * out as f64).abs() <= 1e-9 && (vv - v * out as f64).abs() <= 1e-9);
    }

    #[test]
    fn focal_decreases_as_the_positive_score_rises(b in unit_box(), p in 0.01..0.98f64, dp in 0.001..0.01f64, rest in 0.01..0.99f64) {
        let g = 8;
        let target = gaussian_target(b, g);
        let peak = target.data().iter().position(|&v| v == 1.0).unwrap();
        let loss = |pp: f64| {
            let mut s = vec![rest; g * g];
            s[peak] = pp;
            let mut tape = Tape::new();
            let v = tape.input(Tensor::new(vec![g, g], s).unwrap());
            let l = weighted_focal(&mut tape, v, &target).unwrap();
            scalar(&tape, l)
        };
        prop_assert!(loss(p + dp) < loss(p));
    }

    #[test]
    fn losses_are_nonnegative(a in unit_box(), b in (0.2..0.8f64, 0.2..0.8f64, 0.15..0.4f64, 0.15..0.4f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h)), logits in prop::collection::vec(-6.0..6.0f64, 64),
                              scores in prop::collection::vec(0.0..1.0f64, 64), bits in prop::collection::vec(any::<bool>(), 64)) {
        let mut tape = Tape::new();
        let target = gaussian_target(b, 8);
        let s = tape.input(Tensor::new(vec![8, 8], scores).unwrap());
        let focal = weighted_focal(&mut tape, s, &target).unwrap();
        let pa = BoxVars::constant(&mut tape, a);
        let l1 = l1_box_loss(&mut tape, pa, b).unwrap();
        let lg = tape.input(Tensor::new(vec![8, 8], logits).unwrap());
        let proj = boxinst_projection_loss(&mut tape, lg, b).unwrap();
        let gt = Tensor::new(vec![8, 8], bits.iter().map(|&x| f64::from(u8::from(x))).collect()).unwrap();
        let bce = mask_bce_dice(&mut tape, lg, &gt).unwrap();
        for v in [focal, l1, proj, bce] {
            prop_assert!(scalar(&tape, v) >= 0.0);
        }
        prop_assert!(scalar(&tape, proj) <= 2.0 + 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..40),
                                          names in prop::collection::btree_set("[a-z][a-z0-9_.]{0,12}", 1..4)) {
        let mut c = Checkpoint::new();
        for (i, name) in names.iter().enumerate() {
            let t = Tensor::new(vec![values.len()], values.iter().map(|v| v * (i + 1) as f64).collect()).unwrap();
            c.insert(name.clone(), &t, if i % 2 == 0 { DType::F64 } else { DType::F32 });
        }
        let bytes = c.encode();
        prop_assert_eq!(bytes.len(), c.encoded_len());
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), names.len());
        for (i, name) in names.iter().enumerate() {
            let got = back.get(name).unwrap();
            let want = c.get(name).unwrap();
            prop_assert!(got.bit_eq(want), "{name}");
            if i % 2 == 1 {
                prop_assert!(got.data().iter().all(|&v| v == (v as f32) as f64));
            }
        }
        let mut flipped = bytes.clone();
        let at = bytes.len() / 2;
        flipped[at] ^= 0x04;
        prop_assert!(Checkpoint::decode(&flipped).is_err());
    }

    #[test]
    fn tokenizer_output_is_short_and_in_vocabulary(s in ".{0,200}") {
        let v = Vocabulary::default();
        let ids = tokenize(&s, &v);
        prop_assert!(!ids.is_empty() && ids.len() <= MAX_TEXT_TOKENS);
        prop_assert!(ids.iter().all(|&i| i < v.len()));
    }

    #[test]
    fn box_metrics_lie_in_the_unit_interval(pairs in prop::collection::vec((unit_box(), unit_box()), 1..30), scale in 1.0..400.0f64) {
        let s = |b: BBox| BBox::new(b.cx * scale, b.cy * scale, b.w * scale, b.h * scale);
        let pred: Vec<BBox> = pairs.iter().map(|p| s(p.0)).collect();
        let gt: Vec<BBox> = pairs.iter().map(|p| s(p.1)).collect();
        let t = tally_boxes(&pred, &gt, 0..pred.len()).unwrap();
        let r = t.report();
        for v in [r.auc, r.precision, r.norm_precision, r.mean_iou] {
            prop_assert!((0.0..=1.0).contains(&v), "{r:?}");
        }
        prop_assert!(t.success.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(t.success[0], pred.len());
        let direct = (0..AUC_BINS)
            .map(|k| pred.iter().zip(&gt).filter(|(p, g)| p.iou(**g) >= threshold(k)).count() as f64 / pred.len() as f64)
            .sum::<f64>() / AUC_BINS as f64;
        prop_assert!((direct - r.auc).abs() < 1e-12);
    }
}
