use super::DetectorError;
use crate::boxgeom::{DeltaNorm, RefineConfig};
use crate::pyramid::{LevelAssignment, PoolSpec};
use serde::{Deserialize, Serialize};

/// What the refinement stages look at and how they predict σ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementMode {
    /// Per-side boundary-area features into the boundary predict network.
    BoundaryAreasBpn,
    /// Per-side boundary-area features into a two-layer fc head.
    BoundaryAreasFc,
    /// Whole-box features into a two-layer fc head predicting all four sides.
    WholeProposalFc,
}

/// Training-time proposal sampling around ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    pub positives_per_gt: usize,
    pub negatives: usize,
    /// Center shift amplitude as a fraction of the side length.
    pub center: f64,
    /// Log-scale amplitude.
    pub log_scale: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub max_tries: usize,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            positives_per_gt: 8,
            negatives: 16,
            center: 0.2,
            log_scale: 0.25,
            positive_iou: 0.5,
            negative_iou: 0.3,
            max_tries: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub box_weight: f64,
    pub refine_weight: f64,
    pub smooth_l1_beta: f64,
    pub delta_norm: DeltaNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { cls_weight: 1.0, box_weight: 1.0, refine_weight: 0.67, smooth_l1_beta: 1.0, delta_norm: DeltaNorm::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub warmup_ratio: f64,
    /// 1-based epochs from which the learning rate is multiplied by `lr_gamma` (cumulative).
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
    pub batch_size: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Positives per image that enter the refinement stages.
    pub refine_positives_per_image: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_iters: 50,
            warmup_ratio: 1.0 / 3.0,
            lr_steps: vec![9, 12],
            lr_gamma: 0.1,
            batch_size: 4,
            grad_clip: Some(10.0),
            refine_positives_per_image: 8,
        }
    }
}

impl OptimConfig {
    /// Learning rate at 1-based `epoch` and 0-based global `iter`.
    pub fn lr_at(&self, epoch: usize, iter: usize) -> f64 {
        let steps = self.lr_steps.iter().filter(|s| epoch >= **s).count();
        let mut lr = self.lr * self.lr_gamma.powi(steps as i32);
        if iter < self.warmup_iters {
            let k = iter as f64 / self.warmup_iters as f64;
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * k;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Grid box scales (square-root of area, pixels).
    pub grid_scales: Vec<f64>,
    /// Grid aspect ratios (height / width).
    pub grid_ratios: Vec<f64>,
    /// Grid stride as a fraction of the scale.
    pub grid_stride: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            grid_scales: vec![20.0, 34.0, 58.0],
            grid_ratios: vec![0.75, 1.0, 4.0 / 3.0],
            grid_stride: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub num_categories: usize,
    /// Pyramid channel count `d`.
    pub channels: usize,
    /// Stem and C2..C5 widths.
    pub backbone_widths: [usize; 5],
    /// Extra stride-1 3×3 convs after each downsampling stage.
    pub backbone_blocks: usize,
    pub head_hidden: usize,
    pub attention_groups: usize,
    pub pool: PoolSpec,
    pub refine: RefineConfig,
    pub levels: LevelAssignment,
    pub refinement_mode: RefinementMode,
    pub jitter: JitterConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub seed: u64,
    pub hflip: bool,
    /// Validation images scored after each epoch for the training log.
    pub val_log_images: usize,
    pub inference: InferenceConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 128,
            num_categories: 5,
            channels: 32,
            backbone_widths: [16, 32, 48, 64, 96],
            backbone_blocks: 1,
            head_hidden: 128,
            attention_groups: 4,
            pool: PoolSpec::default(),
            refine: RefineConfig::default(),
            levels: LevelAssignment::default(),
            refinement_mode: RefinementMode::BoundaryAreasBpn,
            jitter: JitterConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            epochs: 12,
            seed: 1,
            hflip: false,
            val_log_images: 50,
            inference: InferenceConfig::default(),
        }
    }
}

fn check(ok: bool, path: &str, msg: impl Into<String>) -> Result<(), DetectorError> {
    if ok {
        Ok(())
    } else {
        Err(DetectorError::Config { path: path.to_string(), msg: msg.into() })
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl DetectorConfig {
    /// Checks every field; errors name the JSON path below `prefix`.
    pub fn validate_at(&self, prefix: &str) -> Result<(), DetectorError> {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        check(self.image_size > 0 && self.image_size % 32 == 0, &p("image_size"), "must be a positive multiple of 32")?;
        check(self.num_categories > 0, &p("num_categories"), "must be > 0")?;
        check(self.channels > 0, &p("channels"), "must be > 0")?;
        check(self.backbone_widths.iter().all(|w| *w > 0), &p("backbone_widths"), "widths must be > 0")?;
        check(self.head_hidden > 0, &p("head_hidden"), "must be > 0")?;
        check(
            self.attention_groups > 0 && self.channels % self.attention_groups == 0,
            &p("attention_groups"),
            "must divide channels",
        )?;
        check(self.pool.out >= 3 && self.pool.sampling >= 1, &p("pool"), "need out >= 3 and sampling >= 1")?;
        self.refine.validate().map_err(|e| DetectorError::Config { path: p("refine"), msg: e.to_string() })?;
        self.levels.validate().map_err(|e| DetectorError::Config { path: p("levels"), msg: e.to_string() })?;

        let j = &self.jitter;
        check(j.positives_per_gt > 0, &p("jitter.positives_per_gt"), "must be > 0")?;
        check(j.center >= 0.0 && j.center.is_finite(), &p("jitter.center"), "must be >= 0")?;
        check(j.log_scale >= 0.0 && j.log_scale.is_finite(), &p("jitter.log_scale"), "must be >= 0")?;
        check(j.positive_iou > 0.0 && j.positive_iou <= 1.0, &p("jitter.positive_iou"), "must be in (0, 1]")?;
        check(
            j.negative_iou > 0.0 && j.negative_iou <= j.positive_iou,
            &p("jitter.negative_iou"),
            "must be in (0, positive_iou]",
        )?;
        check(j.max_tries > 0, &p("jitter.max_tries"), "must be > 0")?;

        let l = &self.loss;
        check(positive(l.cls_weight), &p("loss.cls_weight"), "must be > 0")?;
        check(positive(l.box_weight), &p("loss.box_weight"), "must be > 0")?;
        check(positive(l.refine_weight), &p("loss.refine_weight"), "must be > 0")?;
        check(positive(l.smooth_l1_beta), &p("loss.smooth_l1_beta"), "must be > 0")?;
        check(positive(l.delta_norm.xy) && positive(l.delta_norm.wh), &p("loss.delta_norm"), "norms must be > 0")?;

        let o = &self.optim;
        check(o.lr >= 0.0 && o.lr.is_finite(), &p("optim.lr"), "must be >= 0")?;
        check((0.0..1.0).contains(&o.momentum), &p("optim.momentum"), "must be in [0, 1)")?;
        check(o.weight_decay >= 0.0, &p("optim.weight_decay"), "must be >= 0")?;
        check(o.warmup_ratio > 0.0 && o.warmup_ratio <= 1.0, &p("optim.warmup_ratio"), "must be in (0, 1]")?;
        check(positive(o.lr_gamma), &p("optim.lr_gamma"), "must be > 0")?;
        check(o.batch_size > 0, &p("optim.batch_size"), "must be > 0")?;
        check(o.grad_clip.is_none_or(positive), &p("optim.grad_clip"), "must be > 0 or null")?;

        let i = &self.inference;
        check((0.0..=1.0).contains(&i.score_threshold), &p("inference.score_threshold"), "must be in [0, 1]")?;
        check((0.0..=1.0).contains(&i.nms_iou), &p("inference.nms_iou"), "must be in [0, 1]")?;
        check(!i.grid_scales.is_empty() && i.grid_scales.iter().all(|s| positive(*s)), &p("inference.grid_scales"), "need positive scales")?;
        check(!i.grid_ratios.is_empty() && i.grid_ratios.iter().all(|s| positive(*s)), &p("inference.grid_ratios"), "need positive ratios")?;
        check(positive(i.grid_stride), &p("inference.grid_stride"), "must be > 0")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        self.validate_at("")
    }

    pub fn num_stages(&self) -> usize {
        self.refine.num_stages
    }
}
