use pbr_core::boxgeom::{boundary_areas, clamp_sigma, decode_box, encode_sigma, iou, BBox, Side, Sigma};
use pbr_core::evalkit::{coco_map, DetBox, ImageEval};
use pbr_core::synthdata::{generate_split, SceneSpec, CATEGORIES};
use pbr_core::tensor::{ConvSpec, Graph, Tensor};
use pbr_core::verify::random_eval_case;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IMG: f64 = 128.0;

/// Boxes whose areas stay clear of the border for every shrink factor up to 0.5.
fn arb_interior_box() -> impl Strategy<Value = BBox> {
    (2.0..80.0f64, 2.0..80.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(w, h, u, v)| {
        let x = 0.25 * w + u * (IMG - 1.5 * w);
        let y = 0.25 * h + v * (IMG - 1.5 * h);
        BBox::new(x, y, x + w, y + h).unwrap()
    })
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..120.0f64, 0.0..120.0f64, 2.0..100.0f64, 2.0..100.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(IMG), (y + h).min(IMG)).unwrap())
        .prop_filter("at least 2 px", |b| b.width() >= 2.0 && b.height() >= 2.0)
}

fn untruncated(b: &BBox, c: f64) -> bool {
    boundary_areas(b, c, IMG, IMG).is_ok_and(|a| a.truncated.iter().all(|t| !t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn round_trip_inside_clamp_range(b in arb_interior_box(), s in prop::array::uniform4(-0.49..0.49f64), half in any::<bool>()) {
        let c = if half { 0.5 } else { 0.25 };
        prop_assume!(untruncated(&b, c));
        let a = boundary_areas(&b, c, IMG, IMG).unwrap();
        let target = BBox::new(b.x1 + s[0] * c * b.width(), b.y1 + s[2] * c * b.height(), b.x2 + s[1] * c * b.width(), b.y2 + s[3] * c * b.height());
        prop_assume!(target.as_ref().is_ok_and(|t| t.inside(IMG, IMG)));
        let target = target.unwrap();
        let sigma = encode_sigma(&a, &b, c, &target).unwrap();
        prop_assert!(sigma.max_abs() < 0.5);
        let back = decode_box(&a, &b, c, &sigma).unwrap().bbox;
        for (x, y) in back.to_array().iter().zip(target.to_array()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn areas_keep_extent_and_contain_center_lines(b in arb_box(), c in prop::sample::select(vec![0.5, 0.25, 1.0])) {
        let a = boundary_areas(&b, c, IMG, IMG).unwrap();
        for side in Side::ALL {
            let r = a.area(side);
            prop_assert!(r.inside(IMG, IMG));
            let (lo, hi, extent, want) = if side.is_vertical() {
                (r.x1, r.x2, r.width(), c * b.width())
            } else {
                (r.y1, r.y2, r.height(), c * b.height())
            };
            prop_assert!((extent - want).abs() < 1e-9);
            let m = a.center_line(side);
            prop_assert!(lo < m && m < hi);
        }
        if a.truncated.iter().all(|t| !t) {
            for (m, side) in [a.m_l, a.m_r, a.m_u, a.m_b].iter().zip([b.x1, b.x2, b.y1, b.y2]) {
                prop_assert!((m - side).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clamp_is_monotone(a in -3.0..3.0f64, d in 0.0..2.0f64, q in 0.1..1.0f64) {
        let lo = clamp_sigma(&Sigma::new(a, a, a, a), q).0;
        let hi = clamp_sigma(&Sigma::new(a + d, a + d, a + d, a + d), q).0;
        for side in Side::ALL {
            prop_assert!(lo.get(side) <= hi.get(side));
        }
    }

    #[test]
    fn softmax_sums_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1..200.0f32, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0f32) * scale).collect();
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![rows, cols], data).unwrap(), false);
        let y = g.softmax(x, 1).unwrap();
        for r in g.value(y).data().chunks(cols) {
            prop_assert!(r.iter().all(|v| v.is_finite()));
            prop_assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_ops_stay_finite(scale in 0.1..1e3f32, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0f32) * scale).collect()).unwrap()
        };
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[2, 4, 6, 6]), false);
        let w = g.input(t(&[4, 2, 3, 3]), false);
        let y = g.conv2d(x, w, None, ConvSpec::SAME3.grouped(2)).unwrap();
        let y = g.relu(y);
        let wa = g.input(t(&[1, 4, 1, 1]), false);
        let a = g.conv2d(y, wa, None, ConvSpec::POINT).unwrap();
        let a = g.softmax(a, 2).unwrap();
        let y = g.mul_channels(y, a).unwrap();
        let y = g.sum_axis(y, 2).unwrap();
        let flat = g.reshape(y, &[2, 24]).unwrap();
        let fw = g.input(t(&[3, 24]), false);
        let logits = g.linear(flat, fw, None).unwrap();
        let ce = g.cross_entropy(logits, &[0, 2]).unwrap();
        let sl = g.smooth_l1(logits, vec![0.0; 6], 1.0).unwrap();
        for v in [a, y, logits, ce, sl] {
            prop_assert!(g.value(v).is_finite());
        }
    }

    #[test]
    fn ap_depends_only_on_score_ranks(seed in any::<u64>(), e in -6i32..7) {
        let k = 2f64.powi(e);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = random_eval_case(&mut rng, 3, 6, 4, 2);
        let names = vec!["a".to_string(), "b".to_string()];
        let scaled: Vec<ImageEval> = images
            .iter()
            .map(|im| ImageEval { dets: im.dets.iter().map(|d| DetBox { score: d.score * k, ..*d }).collect(), gts: im.gts.clone() })
            .collect();
        prop_assert_eq!(coco_map(&images, &names), coco_map(&scaled, &names));
    }

    #[test]
    fn duplicate_of_matched_det_never_helps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = vec!["a".to_string(), "b".to_string()];
        let mut images = random_eval_case(&mut rng, 2, 6, 4, 2);
        // a det sitting exactly on a gt is matched at every threshold; the copy
        // must not be able to match any other gt instead
        let Some(g) = images.iter().flat_map(|im| im.gts.first()).next().copied() else { return Ok(()) };
        let im = images.iter().find(|im| im.gts.first() == Some(&g)).unwrap();
        prop_assume!(im.gts[1..].iter().all(|o| o.category != g.category || iou(&o.bbox, &g.bbox) < 0.5));
        let im = images.iter_mut().find(|im| im.gts.first() == Some(&g)).unwrap();
        im.dets.push(DetBox { bbox: g.bbox, score: 2.0, category: g.category });
        let before = coco_map(&images, &names);
        let im = images.iter_mut().find(|im| im.gts.first() == Some(&g)).unwrap();
        im.dets.push(DetBox { bbox: g.bbox, score: rng.gen_range(0.0..2.0), category: g.category });
        let after = coco_map(&images, &names);
        for (b, a) in before.ap_per_threshold.iter().zip(&after.ap_per_threshold) {
            prop_assert!(a.unwrap_or(0.0) <= b.unwrap_or(0.0) + 1e-12);
        }
    }
}

#[test]
fn encode_is_antisymmetric_for_equal_sized_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 1000 {
        let (w, h) = (rng.gen_range(4.0..60.0), rng.gen_range(4.0..60.0));
        let (x, y) = (rng.gen_range(0.0..IMG - w), rng.gen_range(0.0..IMG - h));
        let a = BBox::new(x, y, x + w, y + h).unwrap();
        let b = a.translate(rng.gen_range(-0.2..0.2) * w, rng.gen_range(-0.2..0.2) * h);
        let c = 0.5;
        if !untruncated(&a, c) || !untruncated(&b, c) || !b.inside(IMG, IMG) {
            continue;
        }
        let ab = encode_sigma(&boundary_areas(&a, c, IMG, IMG).unwrap(), &a, c, &b).unwrap();
        let ba = encode_sigma(&boundary_areas(&b, c, IMG, IMG).unwrap(), &b, c, &a).unwrap();
        for side in Side::ALL {
            assert!((ab.get(side) + ba.get(side)).abs() < 1e-12, "{ab:?} {ba:?}");
        }
        checked += 1;
    }
}

#[test]
fn thousand_scenes_cover_categories_and_scales() {
    let spec = SceneSpec { seed: 77, ..SceneSpec::default() };
    let scenes = generate_split(&spec, 1000).unwrap();
    let mut per_cat = [0usize; CATEGORIES.len()];
    let bins = 8;
    let mut hist = vec![0usize; bins];
    let width = (spec.scale_max - spec.scale_min) / bins as f64;
    for s in &scenes {
        for o in &s.annotation.objects {
            per_cat[o.category_id] += 1;
            let scale = o.bbox.width().max(o.bbox.height());
            assert!(scale >= spec.scale_min - 0.25 && scale <= spec.scale_max + 0.25, "{scale}");
            let k = (((scale - spec.scale_min) / width) as usize).min(bins - 1);
            hist[k] += 1;
        }
    }
    assert!(per_cat.iter().all(|n| *n > 0), "{per_cat:?}");
    assert!(hist.iter().all(|n| *n > 0), "{hist:?}");
}
