//! Self-verification suites: geometry invariants, oracle equivalence,
//! finite-difference gradients and identity-at-init. Used by `pbr selftest`
//! and the acceptance tests.

pub mod gradcheck;
pub mod oracles;

use crate::boxgeom::{boundary_areas, clamp_sigma, decode_box, encode_sigma, nms, BBox, RefineConfig, Scored, Sigma};
use crate::bpn::{bpn_forward, BpnConfig};
use crate::detector::{Detector, DetectorConfig, RefineItem};
use crate::evalkit::{coco_map, DetBox, GtBox, ImageEval};
use crate::nn::fan_in_uniform;
use crate::pyramid::{assign_level, roi_align, PoolSpec};
use crate::synthdata::{generate_scene, scene_rng, SceneSpec};
use crate::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed, detail: detail.into() }
    }

    /// `value ≤ tol`, with the measured value in the detail.
    fn within(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self::new(name, value <= tol, format!("{value:.3e} (tol {tol:.0e})"))
    }

    fn error(name: impl Into<String>, err: impl fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checks: Vec<CheckResult>,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.elapsed <= self.budget && self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "{status} {} ({:.2}s, budget {}s)", self.name, self.elapsed.as_secs_f64(), self.budget.as_secs())?;
        for c in &self.checks {
            writeln!(f, "  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

fn timed(name: &'static str, budget_secs: u64, body: impl FnOnce() -> Vec<CheckResult>) -> SuiteResult {
    let start = Instant::now();
    let checks = body();
    SuiteResult { name, checks, elapsed: start.elapsed(), budget: Duration::from_secs(budget_secs) }
}

const IMG: f64 = 128.0;

fn random_box(rng: &mut ChaCha8Rng, img: f64, min: f64, max: f64) -> BBox {
    let w = rng.gen_range(min..max);
    let h = rng.gen_range(min..max);
    let x1 = rng.gen_range(0.0..img - w);
    let y1 = rng.gen_range(0.0..img - h);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("valid box")
}

fn geometry_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refine = RefineConfig::default();
    let mut out = Vec::new();

    // encode/decode round trip
    let mut worst = 0.0_f64;
    let mut failures = 0;
    for i in 0..10_000 {
        let b = random_box(&mut rng, IMG, 2.0, 120.0);
        let c = refine.schedule[i % refine.schedule.len()];
        let t = random_box(&mut rng, IMG, 2.0, 120.0);
        let res = boundary_areas(&b, c, IMG, IMG)
            .and_then(|a| encode_sigma(&a, &b, c, &t).and_then(|s| decode_box(&a, &b, c, &s)));
        match res {
            Ok(d) => {
                let err = d.bbox.to_array().iter().zip(t.to_array()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
                worst = worst.max(err);
            }
            Err(_) => failures += 1,
        }
    }
    out.push(CheckResult::new(
        "encode/decode round trip (10^4 boxes)",
        failures == 0 && worst < 1e-9,
        format!("max |err| {worst:.3e} (tol 1e-9), {failures} errors"),
    ));

    // width preservation, with a bias toward edge-touching boxes
    let mut worst = 0.0_f64;
    let mut truncated = 0;
    let mut outside = 0;
    for i in 0..10_000 {
        let mut b = random_box(&mut rng, IMG, 2.0, 120.0);
        if i % 2 == 0 {
            b = BBox::new(0.0_f64.max(b.x1 - 40.0), b.y1, b.x2, IMG.min(b.y2 + 40.0)).expect("valid box");
        }
        let c = refine.schedule[i % refine.schedule.len()];
        let Ok(a) = boundary_areas(&b, c, IMG, IMG) else {
            outside += 1;
            continue;
        };
        truncated += a.truncated.iter().filter(|t| **t).count();
        for (k, side) in crate::boxgeom::Side::ALL.into_iter().enumerate() {
            let area = a.area(side);
            let (extent, expect) = if k < 2 { (area.width(), c * b.width()) } else { (area.height(), c * b.height()) };
            worst = worst.max((extent - expect).abs());
            if !area.inside(IMG, IMG) {
                outside += 1;
            }
        }
    }
    out.push(CheckResult::new(
        "boundary-area extent preserved under edge truncation",
        worst < 1e-9 && outside == 0 && truncated > 0,
        format!("max |extent − c·size| {worst:.3e}, {truncated} truncated areas, {outside} outside/failed"),
    ));

    // clamp idempotence
    let q = refine.clamp_q.unwrap_or(0.5);
    let mut bad = 0;
    for _ in 0..10_000 {
        let s = Sigma::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let (once, _) = clamp_sigma(&s, q);
        let (twice, clipped) = clamp_sigma(&once, q);
        if once != twice || clipped.iter().any(|c| *c) || once.max_abs() > q {
            bad += 1;
        }
    }
    out.push(CheckResult::new("clamp idempotence", bad == 0, format!("{bad} violations in 10^4 draws")));

    // NMS fixed point and agreement with the definitional version
    let mut not_fixed = 0;
    let mut disagree = 0;
    for _ in 0..500 {
        let n = rng.gen_range(0..40);
        let dets: Vec<Scored> = (0..n)
            .map(|_| Scored { bbox: random_box(&mut rng, 64.0, 4.0, 40.0), score: rng.gen(), category: rng.gen_range(0..3) })
            .collect();
        let once = nms(&dets, 0.5);
        if nms(&once, 0.5) != once {
            not_fixed += 1;
        }
        if oracles::brute_nms(&dets, 0.5) != once {
            disagree += 1;
        }
    }
    out.push(CheckResult::new(
        "NMS fixed point",
        not_fixed == 0 && disagree == 0,
        format!("{not_fixed} non-idempotent, {disagree} differ from the definitional NMS (500 sets)"),
    ));
    out
}

pub fn geometry_suite(seed: u64) -> SuiteResult {
    timed("geometry", 10, || geometry_checks(seed))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

fn roi_align_check(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0_f64;
    for level in 2..=5usize {
        let stride = crate::pyramid::stride_of(level);
        let (d, h, w) = (3, 128 / stride, 128 / stride);
        let data: Vec<f64> = (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(vec![d, h, w], data.clone()).expect("shape");
        for _ in 0..100 {
            // boxes may stick out of the image by up to a third of their size
            let b = random_box(rng, 170.0, 1.0, 120.0).translate(-21.0, -21.0);
            let pool = PoolSpec { out: rng.gen_range(2..8), sampling: rng.gen_range(1..4) };
            match roi_align(&t, &b, stride, pool) {
                Ok(fast) => {
                    let slow = oracles::roi_align(&data, d, h, w, &b, stride as f64, pool.out, pool.sampling);
                    worst = worst.max(max_abs_diff(fast.data(), &slow));
                }
                Err(e) => return CheckResult::error("RoI Align vs bilinear oracle", e),
            }
        }
    }
    CheckResult::within("RoI Align vs bilinear oracle (400 boxes)", worst, 1e-9)
}

fn bpn_forward_check(seed: u64) -> CheckResult {
    let name = "BPN forward vs straight-line oracle";
    let cfg = BpnConfig { channels: 32, pool: 7, num_categories: 5, attention_groups: 4 };
    let (store, params) = gradcheck::random_bpn(seed, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let n = 6;
    let k = cfg.pool;
    let feat: Vec<f64> = (0..n * cfg.channels * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut worst = 0.0_f64;
    for side in crate::boxgeom::Side::ALL {
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g);
        let x = g.input(Tensor::new(vec![n, cfg.channels, k, k], feat.clone()).expect("shape"), false);
        let y = match bpn_forward(&mut g, &p, x, side, &params, &cfg) {
            Ok(y) => y,
            Err(e) => return CheckResult::error(name, e),
        };
        let fast = g.value(y).data();
        let per = cfg.channels * k * k;
        for r in 0..n {
            let m = oracles::Map { c: cfg.channels, h: k, w: k, data: feat[r * per..(r + 1) * per].to_vec() };
            let slow = oracles::bpn_side(&store, params.side(side), &cfg, &m, side);
            worst = worst.max(max_abs_diff(&fast[r * cfg.num_categories..(r + 1) * cfg.num_categories], &slow));
        }
    }
    CheckResult::within(name, worst, 1e-6)
}

fn stage1_head_check(seed: u64) -> CheckResult {
    let name = "stage-1 head vs straight-line oracle";
    let mut det = match Detector::new(DetectorConfig { channels: 8, backbone_widths: [4, 8, 8, 8, 8], head_hidden: 16, ..Default::default() }) {
        Ok(d) => d,
        Err(e) => return CheckResult::error(name, e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in det.store.iter_mut() {
        if p.name.starts_with("head.") {
            let shape = p.value.shape().to_vec();
            p.value = fan_in_uniform(&mut rng, &shape, *shape.last().unwrap_or(&1));
        }
    }
    let k = det.config.pool.out;
    let per = det.config.channels * k * k;
    let n = 5;
    let pooled: Vec<f64> = (0..n * per).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::<f64>::new();
    let p = det.store.bind(&mut g);
    let x = g.input(Tensor::new(vec![n, det.config.channels, k, k], pooled.clone()).expect("shape"), false);
    let (logits, deltas) = match det.stage1_forward(&mut g, &p, x) {
        Ok(v) => v,
        Err(e) => return CheckResult::error(name, e),
    };
    let layers = det.stage1_layers();
    let ncls = det.config.num_categories + 1;
    let nreg = 4 * det.config.num_categories;
    let mut worst = 0.0_f64;
    for r in 0..n {
        let (l, d) = oracles::stage1_head(&det.store, &layers, &pooled[r * per..(r + 1) * per]);
        worst = worst.max(max_abs_diff(&g.value(logits).data()[r * ncls..(r + 1) * ncls], &l));
        worst = worst.max(max_abs_diff(&g.value(deltas).data()[r * nreg..(r + 1) * nreg], &d));
    }
    CheckResult::within(name, worst, 1e-9)
}

/// Random evaluation instance with at most `max_dets` detections and `max_gts` gts per image.
pub fn random_eval_case(rng: &mut ChaCha8Rng, images: usize, max_dets: usize, max_gts: usize, ncat: usize) -> Vec<ImageEval> {
    (0..images)
        .map(|_| {
            let size = [24.0, 64.0, 128.0][rng.gen_range(0..3)];
            let gts: Vec<GtBox> = (0..rng.gen_range(0..=max_gts))
                .map(|_| GtBox { bbox: random_box(rng, size, 3.0, size - 1.0), category: rng.gen_range(0..ncat) })
                .collect();
            let dets = (0..rng.gen_range(0..=max_dets))
                .map(|_| {
                    let category = rng.gen_range(0..ncat);
                    // half of the detections are jittered copies of a gt
                    let bbox = match gts.get(rng.gen_range(0..2 * gts.len().max(1))) {
                        Some(g) => {
                            let j = 0.15 * g.bbox.width().min(g.bbox.height());
                            g.bbox.translate(rng.gen_range(-j..j), rng.gen_range(-j..j))
                        }
                        None => random_box(rng, size, 3.0, size - 1.0),
                    };
                    DetBox { bbox, score: rng.gen(), category }
                })
                .collect();
            ImageEval { dets, gts }
        })
        .collect()
}

fn coco_check(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ncat = 3;
    let names: Vec<String> = (0..ncat).map(|c| format!("c{c}")).collect();
    let cases = 2000;
    let mut mismatches = 0;
    let mut first = String::new();
    for i in 0..cases {
        let images = random_eval_case(&mut rng, 1 + i % 5, 6, 4, ncat);
        let r = coco_map(&images, &names);
        let fast = [r.map, r.ap50, r.ap75, r.ap_small, r.ap_medium, r.ap_large];
        let slow = oracles::brute_coco(&images, ncat);
        if fast != slow {
            mismatches += 1;
            if first.is_empty() {
                first = format!("; first at case {i}: {fast:?} vs {slow:?}");
            }
        }
    }
    CheckResult::new(
        "coco_map vs brute-force evaluator (≤6 dets, ≤4 gts per image)",
        mismatches == 0,
        format!("{mismatches} of {cases} cases differ{first}"),
    )
}

pub fn oracle_suite(seed: u64) -> SuiteResult {
    timed("oracle", 60, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![roi_align_check(&mut rng), bpn_forward_check(seed), stage1_head_check(seed), coco_check(seed)]
    })
}

pub fn gradient_suite(seed: u64) -> SuiteResult {
    timed("gradient", 120, || {
        let mut out = Vec::new();
        match gradcheck::op_checks(seed) {
            Ok(ops) => out.extend(ops.into_iter().map(|(name, e)| CheckResult::within(format!("op {name} (f64)"), e, 1e-4))),
            Err(e) => out.push(CheckResult::error("op checks", e)),
        }
        let cfg = BpnConfig { channels: 8, pool: 5, num_categories: 3, attention_groups: 2 };
        match gradcheck::bpn_check::<f32>(seed, &cfg, 2) {
            Ok(e) => out.push(CheckResult::within("composed BPN, f32 analytic vs f64 numeric", e, 1e-3)),
            Err(e) => out.push(CheckResult::error("composed BPN f32", e)),
        }
        match gradcheck::bpn_check::<f64>(seed, &cfg, 2) {
            Ok(e) => out.push(CheckResult::within("composed BPN, f64 analytic vs f64 numeric", e, 1e-4)),
            Err(e) => out.push(CheckResult::error("composed BPN f64", e)),
        }
        out
    })
}

/// Boxes on the 0.25 px grid whose boundary areas stay clear of the image
/// edges at every refinement stage, so zero σ maps each side onto itself.
pub fn interior_boxes(seed: u64, n: usize, img: f64, refine: &RefineConfig) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cmax = refine.schedule.iter().copied().fold(0.0_f64, f64::max);
    let q = |v: f64| (v * 4.0).round() / 4.0;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = q(rng.gen_range(8.0..80.0));
        let h = q(rng.gen_range(8.0..80.0));
        let x1 = q(rng.gen_range(0.0..img - w));
        let y1 = q(rng.gen_range(0.0..img - h));
        let mx = 0.5 * cmax * w;
        let my = 0.5 * cmax * h;
        if x1 - mx >= 0.0 && x1 + w + mx <= img && y1 - my >= 0.0 && y1 + h + my <= img {
            out.push(BBox::new(x1, y1, x1 + w, y1 + h).expect("valid box"));
        }
    }
    out
}

fn identity_check(seed: u64) -> Vec<CheckResult> {
    let name = "zero-init refinement leaves boxes unchanged";
    let config = DetectorConfig { seed, ..Default::default() };
    let det = match Detector::new(config) {
        Ok(d) => d,
        Err(e) => return vec![CheckResult::error(name, e)],
    };
    let spec = SceneSpec { image_size: det.config.image_size, seed, ..Default::default() };
    let scene = match generate_scene(&spec, &mut scene_rng(seed, 0), String::new()) {
        Ok(s) => s,
        Err(e) => return vec![CheckResult::error(name, e)],
    };
    let img = det.config.image_size as f64;
    let boxes = interior_boxes(seed, 100, img, &det.config.refine);
    let mut items: Vec<RefineItem> = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        match assign_level(b, &det.config.levels) {
            Ok(level) => items.push(RefineItem { batch: 0, bbox: *b, level, category: i % det.config.num_categories }),
            Err(e) => return vec![CheckResult::error(name, e)],
        }
    }
    let run = || -> crate::detector::Result<Vec<Vec<BBox>>> {
        let mut g = Graph::<f32>::new();
        let p = det.store.bind(&mut g);
        let x = det.input(&mut g, &[&scene.image.to_tensor()])?;
        let pyr = det.backbone_forward(&mut g, &p, x)?;
        let mut stages = vec![boxes.clone()];
        let mut cur = items.clone();
        for t in 1..det.config.num_stages() {
            let mut order: Vec<usize> = (0..cur.len()).collect();
            order.sort_by_key(|&i| cur[i].level);
            let sorted: Vec<RefineItem> = order.iter().map(|&i| cur[i]).collect();
            let fwd = det.refine_forward(&mut g, &p, &pyr, &sorted, t)?;
            let next = det.next_boxes(&g, &sorted, &fwd);
            if next.iter().any(|(_, passed)| *passed) {
                return Err(crate::detector::DetectorError::Input(format!("stage {} passed a box through", t + 1)));
            }
            for (k, (item, _)) in next.into_iter().enumerate() {
                cur[order[k]] = item;
            }
            stages.push(cur.iter().map(|it| it.bbox).collect());
        }
        Ok(stages)
    };
    match run() {
        Ok(stages) => {
            let mut out = Vec::new();
            for t in 1..stages.len() {
                let same = stages[t].iter().zip(&stages[t - 1]).filter(|(a, b)| a == b).count();
                out.push(CheckResult::new(
                    format!("B_{} = B_{} exactly", t + 1, t),
                    same == boxes.len(),
                    format!("{same} of {} boxes identical", boxes.len()),
                ));
            }
            out
        }
        Err(e) => vec![CheckResult::error(name, e)],
    }
}

pub fn identity_suite(seed: u64) -> SuiteResult {
    timed("identity-at-init", 5, || identity_check(seed))
}

pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![geometry_suite(seed), oracle_suite(seed), gradient_suite(seed), identity_suite(seed)]
}
