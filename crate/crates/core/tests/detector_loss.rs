//! Audit of the refinement loss: which boxes it sees and which target it regresses to.

use pbr_core::boxgeom::{boundary_areas, clamp_sigma, clip_to_image, decode_box, decode_delta, encode_sigma, iou, BBox, Side, Sigma};
use pbr_core::detector::{forward_loss, Detector, DetectorConfig, Proposal, TrainSample};
use pbr_core::pyramid::assign_level;
use pbr_core::synthdata::{generate_scene, scene_rng, SceneSpec};
use pbr_core::tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> DetectorConfig {
    let mut c = DetectorConfig { channels: 8, backbone_widths: [4, 8, 8, 8, 8], head_hidden: 16, ..Default::default() };
    c.attention_groups = 2;
    c
}

/// Detector whose zero-initialized output layers are perturbed too.
fn perturbed(cfg: DetectorConfig, seed: u64) -> Detector {
    let mut det = Detector::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in det.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    det
}

fn proposal(det: &Detector, bbox: BBox, gt: Option<usize>) -> Proposal {
    Proposal { bbox, gt, level: assign_level(&bbox, &det.config.levels).unwrap(), relaxed: false }
}

fn sample(det: &Detector, gts: Vec<(BBox, usize)>, proposals: Vec<Proposal>) -> TrainSample {
    let spec = SceneSpec { image_size: det.config.image_size, ..SceneSpec::default() };
    let scene = generate_scene(&spec, &mut scene_rng(3, 0), "x.ppm".into()).unwrap();
    TrainSample { image: scene.image.to_tensor(), gts, proposals }
}

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn negatives(det: &Detector) -> Vec<Proposal> {
    [b(0.0, 0.0, 12.0, 10.0), b(100.0, 4.0, 124.0, 30.0), b(2.0, 96.0, 40.0, 126.0)].map(|x| proposal(det, x, None)).to_vec()
}

fn sl1(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

#[test]
fn negatives_only_batch_has_no_refinement_loss_or_gradient() {
    let det = perturbed(tiny(), 1);
    let s = sample(&det, vec![(b(30.0, 30.0, 70.0, 64.0), 1)], negatives(&det));
    let mut g = Graph::<f32>::new();
    let p = det.store.bind(&mut g);
    let (loss, parts) = forward_loss(&det, &mut g, &p, &[s]).unwrap();
    assert_eq!(parts.positives, 0);
    assert_eq!(parts.refine, vec![0.0, 0.0]);
    assert_eq!(parts.refined, vec![0, 0]);
    let grads = g.backward(loss).unwrap();
    let mut seen = 0;
    for (param, &v) in det.store.iter().zip(p.vars()) {
        if param.name.starts_with("refine.") {
            seen += 1;
            if let Some(gr) = grads.get(v) {
                assert!(gr.data().iter().all(|x| *x == 0.0), "{}", param.name);
            }
        }
    }
    assert!(seen > 0);
}

#[test]
fn adding_negatives_leaves_the_refinement_loss_unchanged() {
    let det = perturbed(tiny(), 2);
    let gts = vec![(b(30.0, 30.0, 70.0, 64.0), 1), (b(80.0, 70.0, 110.0, 118.0), 3)];
    let pos = vec![
        proposal(&det, b(32.0, 28.0, 72.0, 66.0), Some(0)),
        proposal(&det, b(78.0, 72.0, 112.0, 116.0), Some(1)),
        proposal(&det, b(27.0, 33.0, 69.0, 61.0), Some(0)),
    ];
    let run = |props: Vec<Proposal>| {
        let mut g = Graph::<f64>::new();
        let p = det.store.bind(&mut g);
        forward_loss(&det, &mut g, &p, &[sample(&det, gts.clone(), props)]).unwrap().1
    };
    let plain = run(pos.clone());
    let mut mixed = negatives(&det);
    mixed.extend(pos);
    mixed.extend(negatives(&det));
    let more = run(mixed);
    assert_eq!(plain.refined, vec![3, 3]);
    assert_eq!(plain.refined, more.refined);
    for (a, c) in plain.refine.iter().zip(&more.refine) {
        assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {c}");
    }
    assert!(plain.refine.iter().all(|v| *v > 0.0));
}

#[test]
fn every_stage_regresses_toward_the_assigned_ground_truth() {
    let det = Detector::new(tiny()).unwrap();
    let cfg = &det.config;
    let (gt0, gt1) = (b(20.0, 20.0, 60.0, 60.0), b(40.0, 40.0, 90.0, 90.0));
    let pbox = b(38.0, 38.0, 80.0, 80.0);
    assert!(iou(&pbox, &gt1) > iou(&pbox, &gt0));
    let s = sample(&det, vec![(gt0, 2), (gt1, 2)], vec![proposal(&det, pbox, Some(0))]);
    let mut g = Graph::<f64>::new();
    let p = det.store.bind(&mut g);
    let parts = forward_loss(&det, &mut g, &p, &[s]).unwrap().1;

    // zero-initialized heads: stage-1 deltas and every σ are zero
    let img = cfg.image_size as f64;
    let eta = cfg.refine.side_norm;
    let beta = cfg.loss.smooth_l1_beta;
    let q = cfg.refine.clamp_q.unwrap();
    let stage_loss = |bx: &BBox, c: f64, gt: &BBox| {
        let areas = boundary_areas(bx, c, img, img).unwrap();
        let target = clamp_sigma(&encode_sigma(&areas, bx, c, gt).unwrap(), q).0;
        cfg.loss.refine_weight * Side::ALL.iter().map(|&sd| sl1(0.0 - target.get(sd) / eta, beta)).sum::<f64>()
    };
    let mut bx = clip_to_image(&decode_delta(&pbox, &[0.0; 4], cfg.loss.delta_norm).unwrap(), img, img).unwrap();
    for (t, &c) in cfg.refine.schedule.iter().enumerate() {
        let want = stage_loss(&bx, c, &gt0);
        let other = stage_loss(&bx, c, &gt1);
        assert!((parts.refine[t] - want).abs() <= 1e-9 * want, "stage {}: {} vs {want}", t + 2, parts.refine[t]);
        assert!((parts.refine[t] - other).abs() > 1e-3, "stage {} also fits gt 1", t + 2);
        let areas = boundary_areas(&bx, c, img, img).unwrap();
        bx = decode_box(&areas, &bx, c, &Sigma::new(0.0, 0.0, 0.0, 0.0)).unwrap().bbox;
    }
    assert_eq!(parts.refined, vec![1, 1]);
}
