use super::{InferenceConfig, JitterConfig, Result};
use crate::boxgeom::{clip_to_image, iou, BBox};
use crate::pyramid::{assign_level, LevelAssignment};
use rand::Rng;

const MIN_SIDE: f64 = 2.0;

/// A training proposal: positive when `gt` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub gt: Option<usize>,
    pub level: usize,
    /// Sampling gave up on the jitter distribution for this proposal.
    pub relaxed: bool,
}

fn max_iou(b: &BBox, gts: &[BBox]) -> (usize, f64) {
    gts.iter().enumerate().map(|(i, g)| (i, iou(b, g))).fold((0, f64::MIN), |a, x| if x.1 > a.1 { x } else { a })
}

fn clipped(cx: f64, cy: f64, w: f64, h: f64, img: f64) -> Option<BBox> {
    let b = BBox::from_center(cx, cy, w, h).ok()?;
    let b = clip_to_image(&b, img, img).ok()?;
    (b.width() >= MIN_SIDE && b.height() >= MIN_SIDE).then_some(b)
}

fn symmetric<R: Rng>(rng: &mut R, a: f64) -> f64 {
    if a > 0.0 {
        rng.gen_range(-a..=a)
    } else {
        0.0
    }
}

/// Positives: jittered copies of each gt with IoU ≥ `positive_iou`, assigned
/// to their highest-IoU gt. Negatives: random and near-miss boxes with IoU below
/// `negative_iou` against every gt. Failed positives fall back to the gt itself.
pub fn generate_proposals<R: Rng>(
    gts: &[BBox],
    img: f64,
    cfg: &JitterConfig,
    levels: &LevelAssignment,
    rng: &mut R,
) -> Result<Vec<Proposal>> {
    let mut out = Vec::with_capacity(gts.len() * cfg.positives_per_gt + cfg.negatives);
    for (gi, gt) in gts.iter().enumerate() {
        let (cx, cy) = gt.center();
        for _ in 0..cfg.positives_per_gt {
            let mut found = None;
            for _ in 0..cfg.max_tries {
                let w = gt.width() * symmetric(rng, cfg.log_scale).exp();
                let h = gt.height() * symmetric(rng, cfg.log_scale).exp();
                let x = cx + symmetric(rng, cfg.center) * gt.width();
                let y = cy + symmetric(rng, cfg.center) * gt.height();
                if let Some(b) = clipped(x, y, w, h, img) {
                    let (best, o) = max_iou(&b, gts);
                    if best == gi && o >= cfg.positive_iou {
                        found = Some(b);
                        break;
                    }
                }
            }
            let (bbox, relaxed) = match found {
                Some(b) => (b, false),
                None => (*gt, true),
            };
            out.push(Proposal { bbox, gt: Some(gi), level: assign_level(&bbox, levels)?, relaxed });
        }
    }
    if gts.is_empty() {
        return Ok(out);
    }
    for _ in 0..cfg.negatives {
        for _ in 0..cfg.max_tries {
            let cand = if rng.gen_bool(0.5) {
                let s = rng.gen_range(8.0..=img / 2.0);
                let r: f64 = rng.gen_range(-0.4..=0.4f64);
                clipped(rng.gen_range(0.0..img), rng.gen_range(0.0..img), s * (-r).exp(), s * r.exp(), img)
            } else {
                let g = gts[rng.gen_range(0..gts.len())];
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let dist = rng.gen_range(0.5..1.2);
                let scale = symmetric(rng, 0.5).exp();
                let (cx, cy) = g.center();
                clipped(
                    cx + angle.cos() * dist * g.width(),
                    cy + angle.sin() * dist * g.height(),
                    g.width() * scale,
                    g.height() * scale,
                    img,
                )
            };
            if let Some(b) = cand {
                if max_iou(&b, gts).1 < cfg.negative_iou {
                    out.push(Proposal { bbox: b, gt: None, level: assign_level(&b, levels)?, relaxed: false });
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Sliding grid of boxes at every scale × aspect ratio, clipped to the image.
pub fn inference_grid(img: f64, cfg: &InferenceConfig) -> Vec<BBox> {
    let mut out = Vec::new();
    for &s in &cfg.grid_scales {
        let stride = (s * cfg.grid_stride).max(1.0);
        let steps = ((img - stride) / stride).floor().max(0.0) as usize + 1;
        let margin = (img - (steps - 1) as f64 * stride) / 2.0;
        for &r in &cfg.grid_ratios {
            let (w, h) = (s / r.sqrt(), s * r.sqrt());
            for iy in 0..steps {
                for ix in 0..steps {
                    let (cx, cy) = (margin + ix as f64 * stride, margin + iy as f64 * stride);
                    if let Some(b) = clipped(cx, cy, w, h, img) {
                        out.push(b);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gts() -> Vec<BBox> {
        vec![BBox::new(10., 10., 40., 50.).unwrap(), BBox::new(60., 70., 120., 110.).unwrap()]
    }

    #[test]
    fn zero_jitter_reproduces_gts() {
        let cfg = JitterConfig { center: 0.0, log_scale: 0.0, negatives: 0, ..JitterConfig::default() };
        let ps = generate_proposals(&gts(), 128.0, &cfg, &LevelAssignment::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ps.len(), 16);
        for p in ps {
            let g = gts()[p.gt.unwrap()];
            assert_eq!(p.bbox, g);
            assert_eq!(iou(&p.bbox, &g), 1.0);
        }
    }

    #[test]
    fn labels_follow_iou_rules() {
        let cfg = JitterConfig::default();
        let ps = generate_proposals(&gts(), 128.0, &cfg, &LevelAssignment::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(ps.iter().filter(|p| p.gt.is_none()).count(), cfg.negatives);
        for p in ps {
            let (best, o) = max_iou(&p.bbox, &gts());
            match p.gt {
                Some(g) => {
                    assert_eq!(g, best);
                    assert!(o >= 0.5);
                }
                None => assert!(o < 0.3),
            }
            assert!(p.bbox.inside(128.0, 128.0));
        }
    }

    #[test]
    fn no_negatives_when_m_is_zero() {
        let cfg = JitterConfig { negatives: 0, ..JitterConfig::default() };
        let ps = generate_proposals(&gts(), 128.0, &cfg, &LevelAssignment::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(ps.iter().all(|p| p.gt.is_some()));
    }

    #[test]
    fn impossible_jitter_relaxes_to_gt() {
        let cfg = JitterConfig { center: 5.0, log_scale: 0.0, positive_iou: 0.99, negatives: 0, max_tries: 3, ..JitterConfig::default() };
        let ps = generate_proposals(&gts()[..1], 128.0, &cfg, &LevelAssignment::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(ps.iter().any(|p| p.relaxed && p.bbox == gts()[0]));
    }

    #[test]
    fn grid_covers_image() {
        let grid = inference_grid(128.0, &InferenceConfig::default());
        assert!(grid.len() > 500);
        assert!(grid.iter().all(|b| b.inside(128.0, 128.0)));
        // every plausible object has a grid box with IoU ≥ 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = rng.gen_range(16.0..72.0);
            let x = rng.gen_range(0.0..128.0 - s);
            let y = rng.gen_range(0.0..128.0 - s);
            let g = BBox::new(x, y, x + s, y + s).unwrap();
            let best = grid.iter().map(|b| iou(b, &g)).fold(0.0, f64::max);
            assert!(best >= 0.5, "{g:?} best {best}");
        }
    }
}
