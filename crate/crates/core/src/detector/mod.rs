//! Desk-scale two-stage detector with pyramidal boundary refinement.
//!
//! Pipeline: toy conv backbone + top-down pyramid, proposals (jittered ground
//! truth for training, a fixed grid at inference), a stage-1 head that scores
//! and regresses every proposal, then `T-1` refinement stages that move each
//! box side using features pooled from boundary areas one pyramid level finer.

mod config;
mod infer;
mod proposals;
mod train;

pub use config::{DetectorConfig, InferenceConfig, JitterConfig, LossConfig, OptimConfig, RefinementMode};
pub use infer::{infer, infer_batch, Detection};
pub use proposals::{generate_proposals, inference_grid, Proposal};
pub use train::{forward_loss, read_log_csv, train, write_log_csv, EpochLog, LossParts, TrainSample, LOG_HEADER};

use crate::boxgeom::{boundary_areas, BBox, BoundaryAreas, GeomError, Side};
use crate::bpn::{bpn_forward, BpnConfig, BpnParams};
use crate::nn::{flatten, Conv2d, Init, Linear};
use crate::pyramid::{push_roi, FeaturePyramid, PyramidError, MIN_LEVEL, NUM_LEVELS};
use crate::synthdata::DataError;
use crate::tensor::{
    load_checkpoint, save_checkpoint, Bound, ConvSpec, Graph, ParamStore, RoiTaps, Scalar, Tensor, TensorError, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Detector config stored next to the checkpoint tensors.
pub const CONFIG_FILE: &str = "detector.json";

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("config field '{path}': {msg}")]
    Config { path: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss at epoch {epoch}, step {step}: {parts}")]
    NonFinite { epoch: usize, step: usize, parts: String },
    #[error("input: {0}")]
    Input(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
struct Backbone {
    stem: Conv2d,
    down: Vec<Conv2d>,
    extra: Vec<Vec<Conv2d>>,
    lateral: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
}

#[derive(Debug, Clone, Copy)]
struct BoxHead {
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FcHead {
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

impl FcHead {
    fn new(store: &mut ParamStore, name: &str, din: usize, hidden: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        FcHead {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, hidden, Init::FanIn, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, Init::FanIn, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, dout, Init::Zero, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let x = flatten(g, x)?;
        let x = self.fc1.forward(g, p, x)?;
        let x = g.relu(x);
        let x = self.fc2.forward(g, p, x)?;
        let x = g.relu(x);
        Ok(self.out.forward(g, p, x)?)
    }
}

#[derive(Debug, Clone)]
enum Refiner {
    Bpn(BpnParams),
    AreasFc(Vec<FcHead>),
    WholeFc(FcHead),
}

/// A box entering a refinement stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineItem {
    pub batch: usize,
    pub bbox: BBox,
    /// Pyramid level the box was last pooled from.
    pub level: usize,
    pub category: usize,
}

/// Output of one refinement stage's forward pass.
pub struct RefineForward {
    /// Indices of the items whose boundary areas were valid; rows of `sigma`.
    pub rows: Vec<usize>,
    pub areas: Vec<BoundaryAreas>,
    /// Predicted σ per side (left, right, up, bottom), each `[rows.len()]`.
    pub sigma: Option<[Var; 4]>,
    pub shrink: f64,
    pub level: Vec<usize>,
}

/// Model parameters plus the architecture that reads them.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    backbone: Backbone,
    head: BoxHead,
    refiners: Vec<Refiner>,
}

impl Detector {
    /// Seeded initialization. Output layers of the stage-1 head and all refiners start at zero.
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let w = config.backbone_widths;
        let d = config.channels;
        let s = &mut store;
        let r = &mut rng;
        let stem = Conv2d::new(s, "backbone.stem", 3, w[0], (3, 3), ConvSpec::DOWN3, Init::FanIn, r);
        let mut down = Vec::new();
        let mut extra = Vec::new();
        for k in 0..NUM_LEVELS {
            let name = format!("backbone.c{}", k + MIN_LEVEL);
            down.push(Conv2d::new(s, &format!("{name}.down"), w[k], w[k + 1], (3, 3), ConvSpec::DOWN3, Init::FanIn, r));
            extra.push(
                (0..config.backbone_blocks)
                    .map(|b| Conv2d::new(s, &format!("{name}.conv{b}"), w[k + 1], w[k + 1], (3, 3), ConvSpec::SAME3, Init::FanIn, r))
                    .collect(),
            );
        }
        let lateral = (0..NUM_LEVELS)
            .map(|k| Conv2d::new(s, &format!("fpn.lateral{}", k + MIN_LEVEL), w[k + 1], d, (1, 1), ConvSpec::POINT, Init::FanIn, r))
            .collect();
        let smooth = (0..NUM_LEVELS)
            .map(|k| Conv2d::new(s, &format!("fpn.smooth{}", k + MIN_LEVEL), d, d, (3, 3), ConvSpec::SAME3, Init::FanIn, r))
            .collect();
        let backbone = Backbone { stem, down, extra, lateral, smooth };

        let pooled = d * config.pool.out * config.pool.out;
        let hid = config.head_hidden;
        let n = config.num_categories;
        let head = BoxHead {
            fc1: Linear::new(s, "head.fc1", pooled, hid, Init::FanIn, r),
            fc2: Linear::new(s, "head.fc2", hid, hid, Init::FanIn, r),
            cls: Linear::new(s, "head.cls", hid, n + 1, Init::Zero, r),
            reg: Linear::new(s, "head.reg", hid, 4 * n, Init::Zero, r),
        };

        let bcfg = Self::bpn_config_of(&config);
        let refiners = (2..=config.num_stages())
            .map(|t| {
                let name = format!("refine.s{t}");
                match config.refinement_mode {
                    RefinementMode::BoundaryAreasBpn => Refiner::Bpn(BpnParams::new(s, &name, &bcfg, r)),
                    RefinementMode::BoundaryAreasFc => Refiner::AreasFc(
                        Side::ALL.iter().map(|side| FcHead::new(s, &format!("{name}.{}", side.name()), pooled, hid, n, r)).collect(),
                    ),
                    RefinementMode::WholeProposalFc => Refiner::WholeFc(FcHead::new(s, &name, pooled, hid, 4 * n, r)),
                }
            })
            .collect();
        Ok(Detector { config, store, backbone, head, refiners })
    }

    fn bpn_config_of(c: &DetectorConfig) -> BpnConfig {
        BpnConfig { channels: c.channels, pool: c.pool.out, num_categories: c.num_categories, attention_groups: c.attention_groups }
    }

    /// Stage-1 head layers: two hidden fc layers, classifier, box regressor.
    pub fn stage1_layers(&self) -> [Linear; 4] {
        let h = &self.head;
        [h.fc1, h.fc2, h.cls, h.reg]
    }

    pub fn bpn_config(&self) -> BpnConfig {
        Self::bpn_config_of(&self.config)
    }

    /// BPN parameters of refinement stage `stage` (2..=T), if the mode uses them.
    pub fn bpn_params(&self, stage: usize) -> Option<&BpnParams> {
        match self.refiners.get(stage.checked_sub(2)?)? {
            Refiner::Bpn(p) => Some(p),
            _ => None,
        }
    }

    /// Writes the tensors plus `detector.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(&self.store, dir)?;
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, json + "\n").map_err(|e| DetectorError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })
    }

    /// Rebuilds the architecture from `detector.json` and loads the tensors.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let err = |msg: String| DetectorError::Checkpoint { path: path.display().to_string(), msg };
        let text = fs::read_to_string(&path).map_err(|e| err(e.to_string()))?;
        let config: DetectorConfig = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Self::load_with_config(dir, config)
    }

    /// Loads tensors into a model built from `config`; the manifest must match exactly.
    pub fn load_with_config(dir: &Path, config: DetectorConfig) -> Result<Self> {
        let mut det = Detector::new(config)?;
        det.store.load_values(dir)?;
        Ok(det)
    }

    /// Sanity check that a checkpoint manifest lists this model's tensors.
    pub fn check_manifest(&self, dir: &Path) -> Result<()> {
        let entries = load_checkpoint(dir)?;
        let ours: Vec<(&str, &[usize])> = self.store.iter().map(|p| (p.name.as_str(), p.value.shape())).collect();
        let theirs: Vec<(&str, &[usize])> = entries.iter().map(|(e, _)| (e.name.as_str(), e.shape.as_slice())).collect();
        if ours != theirs {
            return Err(DetectorError::Checkpoint { path: dir.display().to_string(), msg: "manifest does not match model".into() });
        }
        Ok(())
    }

    /// Stacks `[3,H,W]` images into a `[B,3,H,W]` constant.
    pub fn input<T: Scalar>(&self, g: &mut Graph<T>, images: &[&Tensor<f32>]) -> Result<Var> {
        let n = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * n * n);
        for im in images {
            if im.shape() != [3, n, n] {
                return Err(DetectorError::Input(format!("image shape {:?}, expected [3, {n}, {n}]", im.shape())));
            }
            data.extend(im.data().iter().map(|v| T::of(*v as f64)));
        }
        Ok(g.constant(Tensor::new(vec![images.len(), 3, n, n], data)?))
    }

    /// Backbone and top-down pyramid; returns `L2..L5` as `[B,d,H/2^k,W/2^k]`.
    pub fn backbone_forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(DetectorError::Input(format!("backbone input {s:?} must be [B,3,H,W] with H, W divisible by 32")));
        }
        let b = &self.backbone;
        let mut x = b.stem.forward(g, p, x)?;
        x = g.relu(x);
        let mut feats = Vec::with_capacity(NUM_LEVELS);
        for k in 0..NUM_LEVELS {
            x = b.down[k].forward(g, p, x)?;
            x = g.relu(x);
            for conv in &b.extra[k] {
                x = conv.forward(g, p, x)?;
                x = g.relu(x);
            }
            feats.push(x);
        }
        let mut tops: Vec<Var> = Vec::with_capacity(NUM_LEVELS);
        let mut prev: Option<Var> = None;
        for k in (0..NUM_LEVELS).rev() {
            let lat = b.lateral[k].forward(g, p, feats[k])?;
            let merged = match prev {
                Some(up) => {
                    let up = g.upsample2x(up)?;
                    g.add(lat, up)?
                }
                None => lat,
            };
            prev = Some(merged);
            tops.push(merged);
        }
        tops.reverse();
        tops.iter().enumerate().map(|(k, t)| Ok(b.smooth[k].forward(g, p, *t)?)).collect()
    }

    /// Pyramid of a single `[3,H,W]` image.
    pub fn pyramid(&self, image: &Tensor<f32>) -> Result<FeaturePyramid<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.store.bind(&mut g);
        let x = self.input(&mut g, &[image])?;
        let levels = self.backbone_forward(&mut g, &p, x)?;
        let n = self.config.image_size;
        let tensors = levels
            .iter()
            .map(|v| {
                let t = g.value(*v).clone();
                let s = t.shape()[1..].to_vec();
                t.reshape(&s)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FeaturePyramid::new(tensors, n, n)?)
    }

    /// RoI Align of `(batch, box, level)` triples; output rows follow input order.
    pub fn pool<T: Scalar>(&self, g: &mut Graph<T>, pyr: &[Var], rois: &[(usize, BBox, usize)]) -> Result<Var> {
        if rois.is_empty() {
            return Err(DetectorError::Input("no boxes to pool".into()));
        }
        let mut parts = Vec::new();
        let mut i = 0;
        while i < rois.len() {
            let level = rois[i].2;
            let feat = *pyr.get(level.wrapping_sub(MIN_LEVEL)).ok_or(PyramidError::LevelOutOfRange(level))?;
            let s = g.shape(feat).to_vec();
            let mut taps = RoiTaps::new(self.config.pool.out);
            while i < rois.len() && rois[i].2 == level {
                push_roi(&mut taps, rois[i].0, &rois[i].1, level, (s[2], s[3]), self.config.pool)?;
                i += 1;
            }
            parts.push(g.roi_align(feat, taps)?);
        }
        Ok(if parts.len() == 1 { parts[0] } else { g.concat(&parts)? })
    }

    /// Stage-1 head on pooled features: `(logits [R, n+1], deltas [R, 4n])`. Background is the last class.
    pub fn stage1_forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, pooled: Var) -> Result<(Var, Var)> {
        let h = &self.head;
        let x = flatten(g, pooled)?;
        let x = h.fc1.forward(g, p, x)?;
        let x = g.relu(x);
        let x = h.fc2.forward(g, p, x)?;
        let x = g.relu(x);
        Ok((h.cls.forward(g, p, x)?, h.reg.forward(g, p, x)?))
    }

    /// Forward pass of refinement stage `t` (1-based over refinement stages,
    /// producing `B_{t+1}`). Items whose boundary areas are degenerate are skipped.
    pub fn refine_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyr: &[Var],
        items: &[RefineItem],
        t: usize,
    ) -> Result<RefineForward> {
        let c = self.config.refine.shrink(t)?;
        let refiner = self.refiners.get(t - 1).ok_or_else(|| DetectorError::Input(format!("no refinement stage {t}")))?;
        let n = self.config.image_size as f64;
        let ncat = self.config.num_categories;
        let level: Vec<usize> = items.iter().map(|it| crate::pyramid::refine_level(it.level)).collect::<Result<_, _>>()?;
        let mut rows = Vec::new();
        let mut areas = Vec::new();
        for (i, it) in items.iter().enumerate() {
            if let Ok(a) = boundary_areas(&it.bbox, c, n, n) {
                rows.push(i);
                areas.push(a);
            }
        }
        if rows.is_empty() {
            return Ok(RefineForward { rows, areas, sigma: None, shrink: c, level });
        }
        let cats: Vec<usize> = rows.iter().map(|&i| items[i].category).collect();
        let select = |g: &mut Graph<T>, out: Var, stride: usize, offset: usize| -> Result<Var> {
            let idx = cats.iter().enumerate().map(|(r, &cat)| r * stride + cat * (stride / ncat) + offset).collect();
            Ok(g.gather(out, idx, &[cats.len()])?)
        };
        let side_rois = |side: Side| -> Vec<(usize, BBox, usize)> {
            rows.iter().zip(&areas).map(|(&i, a)| (items[i].batch, a.area(side), level[i])).collect()
        };
        let sigma = match refiner {
            Refiner::Bpn(params) => {
                let cfg = self.bpn_config();
                let mut out = Vec::with_capacity(4);
                for side in Side::ALL {
                    let f = self.pool(g, pyr, &side_rois(side))?;
                    let o = bpn_forward(g, p, f, side, params, &cfg)?;
                    out.push(select(g, o, ncat, 0)?);
                }
                out
            }
            Refiner::AreasFc(heads) => {
                let mut out = Vec::with_capacity(4);
                for (k, side) in Side::ALL.into_iter().enumerate() {
                    let f = self.pool(g, pyr, &side_rois(side))?;
                    let o = heads[k].forward(g, p, f)?;
                    out.push(select(g, o, ncat, 0)?);
                }
                out
            }
            Refiner::WholeFc(head) => {
                let rois: Vec<_> = rows.iter().map(|&i| (items[i].batch, items[i].bbox, level[i])).collect();
                let f = self.pool(g, pyr, &rois)?;
                let o = head.forward(g, p, f)?;
                (0..4).map(|k| select(g, o, 4 * ncat, k)).collect::<Result<Vec<_>>>()?
            }
        };
        Ok(RefineForward { rows, areas, sigma: Some([sigma[0], sigma[1], sigma[2], sigma[3]]), shrink: c, level })
    }

    /// Applies predicted σ (clamped when configured) to get the next boxes.
    /// Items without a prediction or whose decode fails keep their box; the flag marks them.
    pub fn next_boxes<T: Scalar>(&self, g: &Graph<T>, items: &[RefineItem], fwd: &RefineForward) -> Vec<(RefineItem, bool)> {
        let mut out: Vec<(RefineItem, bool)> =
            items.iter().zip(&fwd.level).map(|(it, &level)| (RefineItem { level, ..*it }, true)).collect();
        let Some(sig) = fwd.sigma else { return out };
        let vals: Vec<&[T]> = sig.iter().map(|v| g.value(*v).data()).collect();
        for (r, (&i, areas)) in fwd.rows.iter().zip(&fwd.areas).enumerate() {
            let mut s = crate::boxgeom::Sigma::new(vals[0][r].as_f64(), vals[1][r].as_f64(), vals[2][r].as_f64(), vals[3][r].as_f64());
            if let Some(q) = self.config.refine.clamp_q {
                s = crate::boxgeom::clamp_sigma(&s, q).0;
            }
            if let Ok(d) = crate::boxgeom::decode_box(areas, &items[i].bbox, fwd.shrink, &s) {
                out[i].0.bbox = d.bbox;
                out[i].1 = false;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DetectorConfig {
        DetectorConfig { channels: 8, backbone_widths: [4, 8, 8, 8, 8], head_hidden: 16, ..DetectorConfig::default() }
    }

    #[test]
    fn pyramid_shapes() {
        let det = Detector::new(small()).unwrap();
        let pyr = det.pyramid(&Tensor::zeros(&[3, 128, 128])).unwrap();
        for (k, s) in [(2, 32), (3, 16), (4, 8), (5, 4)] {
            assert_eq!(pyr.level(k).unwrap().shape(), &[8, s, s]);
        }
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let det = Detector::new(small()).unwrap();
        let pyr = det.pyramid(&Tensor::zeros(&[3, 128, 128])).unwrap();
        for k in 2..=5 {
            assert!(pyr.level(k).unwrap().data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn bad_input_size() {
        let det = Detector::new(small()).unwrap();
        assert!(det.pyramid(&Tensor::zeros(&[3, 100, 100])).is_err());
        let mut g = Graph::<f32>::new();
        let p = det.store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 100, 96]));
        assert!(det.backbone_forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn zero_init_head_is_uniform() {
        let det = Detector::new(small()).unwrap();
        let mut g = Graph::<f32>::new();
        let p = det.store.bind(&mut g);
        let x = g.constant(Tensor::full(&[1, 3, 128, 128], 0.3));
        let pyr = det.backbone_forward(&mut g, &p, x).unwrap();
        let b = BBox::new(10., 10., 50., 60.).unwrap();
        let f = det.pool(&mut g, &pyr, &[(0, b, 2), (0, b, 3)]).unwrap();
        let (cls, reg) = det.stage1_forward(&mut g, &p, f).unwrap();
        assert_eq!(g.shape(cls), &[2, 6]);
        assert!(g.value(cls).data().iter().all(|v| *v == 0.0));
        assert!(g.value(reg).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn parameter_layout_is_mode_specific() {
        let n = |m| Detector::new(DetectorConfig { refinement_mode: m, ..small() }).unwrap().store.len();
        let (bpn, fc, whole) =
            (n(RefinementMode::BoundaryAreasBpn), n(RefinementMode::BoundaryAreasFc), n(RefinementMode::WholeProposalFc));
        assert!(bpn > fc && fc > whole);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let det = Detector::new(small()).unwrap();
        det.save(dir.path()).unwrap();
        let back = Detector::load(dir.path()).unwrap();
        for (a, b) in det.store.iter().zip(back.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        let other = Detector::new(DetectorConfig { channels: 16, ..small() }).unwrap();
        assert!(other.check_manifest(dir.path()).is_err());
        assert!(Detector::load_with_config(dir.path(), DetectorConfig { channels: 16, ..small() }).is_err());
    }
}
