use super::{generate_proposals, infer_batch, Detector, DetectorConfig, DetectorError, Proposal, RefineItem, Result};
use crate::boxgeom::{clamp_sigma, clip_to_image, decode_delta, encode_delta, encode_sigma, BBox, Side};
use crate::evalkit::{stage_iou_stats, GtBox};
use crate::synthdata::Scene;
use crate::tensor::{sgd_step, Bound, Graph, Scalar, SgdConfig, Tensor, Var};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

pub const LOG_HEADER: &str = "epoch,step,loss_total,loss_cls,loss_box,loss_ref2,loss_ref3,miou_s1,miou_s2,miou_s3";

/// One training image with its ground truth `(box, category)` and sampled proposals.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor<f32>,
    pub gts: Vec<(BBox, usize)>,
    pub proposals: Vec<Proposal>,
}

/// Loss values of one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub box_reg: f64,
    /// Weighted refinement loss of stages 2..=T.
    pub refine: Vec<f64>,
    pub positives: usize,
    /// Boxes that received a refinement target, per refinement stage.
    pub refined: Vec<usize>,
}

impl std::fmt::Display for LossParts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "total={} cls={} box={} refine={:?} positives={}", self.total, self.cls, self.box_reg, self.refine, self.positives)
    }
}

struct RefineTarget {
    item: RefineItem,
    gt: BBox,
}

/// Builds the batch loss on `g`.
///
/// Stage 1: cross-entropy over all proposals plus smooth-L1 on the gt-category
/// deltas of positives (mean over positives). Refinement: for the first
/// `refine_positives_per_image` positives of each image, the decoded stage-1 box
/// (detached) enters stage 2; every stage regresses σ toward the original gt,
/// both sides divided by η, summed over sides and averaged over boxes.
pub fn forward_loss<T: Scalar>(det: &Detector, g: &mut Graph<T>, p: &Bound, batch: &[TrainSample]) -> Result<(Var, LossParts)> {
    let cfg = &det.config;
    let ncat = cfg.num_categories;
    let img = cfg.image_size as f64;
    let images: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();
    let x = det.input(g, &images)?;
    let pyr = det.backbone_forward(g, p, x)?;

    // rows grouped by level so each level is pooled once
    let mut rows: Vec<(usize, usize)> =
        batch.iter().enumerate().flat_map(|(b, s)| (0..s.proposals.len()).map(move |i| (b, i))).collect();
    if rows.is_empty() {
        return Err(DetectorError::Input("batch has no proposals".into()));
    }
    rows.sort_by_key(|&(b, i)| batch[b].proposals[i].level);
    let prop = |r: &(usize, usize)| &batch[r.0].proposals[r.1];
    let rois: Vec<(usize, BBox, usize)> = rows.iter().map(|r| (r.0, prop(r).bbox, prop(r).level)).collect();
    let pooled = det.pool(g, &pyr, &rois)?;
    let (logits, deltas) = det.stage1_forward(g, p, pooled)?;

    let labels: Vec<usize> = rows.iter().map(|r| prop(r).gt.map_or(ncat, |gi| batch[r.0].gts[gi].1)).collect();
    let ce = g.cross_entropy(logits, &labels)?;
    let cls = g.scale(ce, T::of(cfg.loss.cls_weight));
    let mut parts = LossParts { cls: g.value(cls).item().as_f64(), ..LossParts::default() };
    let mut total = cls;

    let beta = T::of(cfg.loss.smooth_l1_beta);
    let pos: Vec<usize> = (0..rows.len()).filter(|&j| labels[j] < ncat).collect();
    parts.positives = pos.len();
    let mut refine_in: Vec<RefineTarget> = Vec::new();
    if !pos.is_empty() {
        let mut idx = Vec::with_capacity(pos.len() * 4);
        let mut target = Vec::with_capacity(pos.len() * 4);
        for &j in &pos {
            let pr = prop(&rows[j]);
            let gt = batch[rows[j].0].gts[pr.gt.expect("positive")].0;
            let d = encode_delta(&pr.bbox, &gt, cfg.loss.delta_norm)?;
            for (k, v) in d.iter().enumerate() {
                idx.push(j * 4 * ncat + 4 * labels[j] + k);
                target.push(T::of(*v));
            }
        }
        let sel = g.gather(deltas, idx.clone(), &[pos.len(), 4])?;
        let l = g.smooth_l1(sel, target, beta)?;
        let l = g.sum_all(l);
        let l = g.scale(l, T::of(cfg.loss.box_weight / pos.len() as f64));
        parts.box_reg = g.value(l).item().as_f64();
        total = g.add(total, l)?;

        // B_1 of the first K positives of each image, from detached predictions
        let k_max = cfg.optim.refine_positives_per_image;
        let dv = g.value(deltas).data();
        let mut chosen: Vec<(usize, usize, usize)> = pos.iter().map(|&j| (rows[j].0, rows[j].1, j)).collect();
        chosen.sort_unstable();
        let mut taken = vec![0usize; batch.len()];
        for (b, i, j) in chosen {
            if taken[b] >= k_max {
                continue;
            }
            taken[b] += 1;
            let pr = &batch[b].proposals[i];
            let base = j * 4 * ncat + 4 * labels[j];
            let d = [0, 1, 2, 3].map(|k| dv[base + k].as_f64());
            let Ok(b1) = decode_delta(&pr.bbox, &d, cfg.loss.delta_norm).and_then(|b| clip_to_image(&b, img, img)) else {
                continue;
            };
            let gt = batch[b].gts[pr.gt.expect("positive")].0;
            refine_in.push(RefineTarget { item: RefineItem { batch: b, bbox: b1, level: pr.level, category: labels[j] }, gt });
        }
    }

    let eta = cfg.refine.side_norm;
    for t in 1..cfg.num_stages() {
        refine_in.sort_by_key(|r| r.item.level);
        let items: Vec<RefineItem> = refine_in.iter().map(|r| r.item).collect();
        let fwd = if items.is_empty() { None } else { Some(det.refine_forward(g, p, &pyr, &items, t)?) };
        let Some((fwd, sig)) = fwd.and_then(|f| f.sigma.map(|s| (f, s))) else {
            parts.refine.push(0.0);
            parts.refined.push(0);
            refine_in.clear();
            continue;
        };
        let n = fwd.rows.len();
        let mut targets: [Vec<T>; 4] = Default::default();
        for (&i, areas) in fwd.rows.iter().zip(&fwd.areas) {
            let mut s = encode_sigma(areas, &items[i].bbox, fwd.shrink, &refine_in[i].gt)?;
            if let Some(q) = cfg.refine.clamp_q {
                s = clamp_sigma(&s, q).0;
            }
            for (k, side) in Side::ALL.into_iter().enumerate() {
                targets[k].push(T::of(s.get(side) / eta));
            }
        }
        let mut stage_loss: Option<Var> = None;
        for (k, target) in targets.into_iter().enumerate() {
            let pred = g.scale(sig[k], T::of(1.0 / eta));
            let l = g.smooth_l1(pred, target, beta)?;
            let l = g.sum_all(l);
            stage_loss = Some(match stage_loss {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let l = g.scale(stage_loss.expect("four sides"), T::of(cfg.loss.refine_weight / n as f64));
        parts.refine.push(g.value(l).item().as_f64());
        parts.refined.push(n);
        total = g.add(total, l)?;

        let next = det.next_boxes(g, &items, &fwd);
        let mut kept = Vec::with_capacity(n);
        for (r, (item, _)) in refine_in.iter().zip(next) {
            kept.push(RefineTarget { item, gt: r.gt });
        }
        // boxes without valid areas drop out of later stages
        let valid: std::collections::HashSet<usize> = fwd.rows.iter().copied().collect();
        refine_in = kept.into_iter().enumerate().filter(|(i, _)| valid.contains(i)).map(|(_, r)| r).collect();
    }
    parts.total = g.value(total).item().as_f64();
    Ok((total, parts))
}

/// Per-epoch training log row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_box: f64,
    /// Refinement losses of stages 2..=T.
    pub loss_ref: Vec<f64>,
    /// Validation mean IoU per stage; `None` when nothing matched.
    pub miou: Vec<Option<f64>>,
}

pub fn write_log_csv(rows: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.loss_total,
            r.loss_cls,
            r.loss_box,
            cell(r.loss_ref.first().copied()),
            cell(r.loss_ref.get(1).copied()),
            cell(r.miou.first().copied().flatten()),
            cell(r.miou.get(1).copied().flatten()),
            cell(r.miou.get(2).copied().flatten()),
        );
    }
    out
}

/// Inverse of [`write_log_csv`].
pub fn read_log_csv(text: &str) -> std::result::Result<Vec<EpochLog>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(format!("line 1: expected header '{LOG_HEADER}'"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |what: &str| format!("line {}: {what}", i + 2);
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 10 {
            return Err(err(&format!("{} columns, expected 10", cells.len())));
        }
        let num = |k: usize| cells[k].parse::<f64>().map_err(|_| err(&format!("column {} is not a number", k + 1)));
        let opt = |k: usize| if cells[k].is_empty() { Ok(None) } else { num(k).map(Some) };
        let int = |k: usize| cells[k].parse::<usize>().map_err(|_| err(&format!("column {} is not an integer", k + 1)));
        rows.push(EpochLog {
            epoch: int(0)?,
            step: int(1)?,
            loss_total: num(2)?,
            loss_cls: num(3)?,
            loss_box: num(4)?,
            loss_ref: [opt(5)?, opt(6)?].into_iter().flatten().collect(),
            miou: vec![opt(7)?, opt(8)?, opt(9)?],
        });
    }
    Ok(rows)
}

fn flip_sample(image: &Tensor<f32>, gts: &[(BBox, usize)], size: usize) -> (Tensor<f32>, Vec<(BBox, usize)>) {
    let mut data = image.data().to_vec();
    for row in data.chunks_exact_mut(size) {
        row.reverse();
    }
    let s = size as f64;
    let gts = gts.iter().map(|(b, c)| (BBox { x1: s - b.x2, y1: b.y1, x2: s - b.x1, y2: b.y2 }, *c)).collect();
    (Tensor::new(image.shape().to_vec(), data).expect("same shape"), gts)
}

fn check_scenes(cfg: &DetectorConfig, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        let a = &s.annotation;
        if a.width != cfg.image_size || a.height != cfg.image_size {
            return Err(DetectorError::Input(format!("{}: {}x{} image, config expects {}", a.file, a.width, a.height, cfg.image_size)));
        }
        if let Some(o) = a.objects.iter().find(|o| o.category_id >= cfg.num_categories) {
            return Err(DetectorError::Input(format!("{}: category {} >= {}", a.file, o.category_id, cfg.num_categories)));
        }
    }
    Ok(())
}

pub fn scene_gts(scene: &Scene) -> Vec<GtBox> {
    scene.annotation.objects.iter().map(|o| GtBox { bbox: o.bbox, category: o.category_id }).collect()
}

/// Per-stage validation mean IoU of the current model.
pub fn validation_miou(det: &Detector, val: &[Scene]) -> Result<Vec<Option<f64>>> {
    let t = det.config.num_stages();
    if val.is_empty() {
        return Ok(vec![None; t]);
    }
    let images: Vec<Tensor<f32>> = val.iter().map(|s| s.image.to_tensor()).collect();
    let dets = infer_batch(det, &images)?;
    let pairs: Vec<_> =
        dets.iter().zip(val).map(|(d, s)| (d.iter().map(|x| x.staged()).collect(), scene_gts(s))).collect();
    Ok(match stage_iou_stats(&pairs) {
        Some(s) => s.mean_iou.into_iter().map(Some).collect(),
        None => vec![None; t],
    })
}

fn clip_grads(det: &mut Detector, max_norm: f64) {
    let norm = det.store.grad_norm();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for p in det.store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// Seeded SGD training. Calls `on_epoch` after every epoch's log row is ready.
pub fn train(
    config: &DetectorConfig,
    train_set: &[Scene],
    val_set: &[Scene],
    mut on_epoch: impl FnMut(&Detector, &EpochLog),
) -> Result<(Detector, Vec<EpochLog>)> {
    let mut det = Detector::new(config.clone())?;
    check_scenes(config, train_set)?;
    check_scenes(config, val_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let img = config.image_size as f64;
    let val_log = &val_set[..config.val_log_images.min(val_set.len())];
    let mut logs = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossParts { refine: vec![0.0; config.num_stages() - 1], ..LossParts::default() };
        let mut batches = 0usize;
        for chunk in order.chunks(config.optim.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let scene = &train_set[i];
                let mut image = scene.image.to_tensor();
                let mut gts: Vec<(BBox, usize)> = scene.annotation.objects.iter().map(|o| (o.bbox, o.category_id)).collect();
                if config.hflip && rng.gen_bool(0.5) {
                    (image, gts) = flip_sample(&image, &gts, config.image_size);
                }
                let boxes: Vec<BBox> = gts.iter().map(|g| g.0).collect();
                let proposals = generate_proposals(&boxes, img, &config.jitter, &config.levels, &mut rng)?;
                if !proposals.is_empty() {
                    batch.push(TrainSample { image, gts, proposals });
                }
            }
            if batch.is_empty() {
                continue;
            }
            let mut g = Graph::<f32>::new();
            let bound = det.store.bind(&mut g);
            let (loss, parts) = forward_loss(&det, &mut g, &bound, &batch)?;
            if !parts.total.is_finite() {
                return Err(DetectorError::NonFinite { epoch, step, parts: parts.to_string() });
            }
            let grads = g.backward(loss)?;
            det.store.accumulate_grads(&bound, &grads);
            drop(g);
            if let Some(c) = config.optim.grad_clip {
                clip_grads(&mut det, c);
            }
            let o = &config.optim;
            let lr = o.lr_at(epoch, step);
            sgd_step(&mut det.store, SgdConfig { lr: lr as f32, momentum: o.momentum as f32, weight_decay: o.weight_decay as f32 })?;
            if det.store.iter().any(|p| !p.value.is_finite()) {
                return Err(DetectorError::NonFinite { epoch, step, parts: format!("parameters after update; {parts}") });
            }
            sums.total += parts.total;
            sums.cls += parts.cls;
            sums.box_reg += parts.box_reg;
            for (a, b) in sums.refine.iter_mut().zip(&parts.refine) {
                *a += b;
            }
            batches += 1;
            step += 1;
        }
        let n = batches.max(1) as f64;
        let row = EpochLog {
            epoch,
            step,
            loss_total: sums.total / n,
            loss_cls: sums.cls / n,
            loss_box: sums.box_reg / n,
            loss_ref: sums.refine.iter().map(|v| v / n).collect(),
            miou: validation_miou(&det, val_log)?,
        };
        info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}, box {:.4}, ref {:?}), val mIoU {:?}",
            row.loss_total, row.loss_cls, row.loss_box, row.loss_ref, row.miou
        );
        on_epoch(&det, &row);
        logs.push(row);
    }
    Ok((det, logs))
}
