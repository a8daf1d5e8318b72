//! Donor pretraining, the three-stage schedule, and checkpointing.
//!
//! Stage I (alignment) alternates text-to-image and captioning sequences
//! with everything supervised. Stage II (quality) trains next-token
//! prediction on resolution-tagged variable-aspect records, supervising only
//! the image span. Stage III (super-resolution) trains the next-K-token
//! cascade on (low, caption, high) triplets. Optimizer state resets at each
//! stage boundary.

mod checkpoint;
mod dataset;
mod optimizer;

pub use checkpoint::{load_semvie, load_text_lm, save_semvie, save_text_lm};
pub use dataset::{
    caption_of, image_path, load_dataset, make_synthetic_dataset, make_text_corpus, parse_caption,
    position_center, render_scene, shape_mask, Attributes, DatasetRecord, LoadedRecord, COLORS,
    POSITIONS, SHAPES,
};
pub use optimizer::{AdamW, LrSchedule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SemVieModel, TextLm};
use crate::objectives::{
    build_caption_sequence, build_sr_sequence, build_t2i_sequence, nktp_loss, ntp_loss,
    SupervisionMode,
};
use crate::rng;
use crate::tensor::{cross_entropy_rows, gather_rows};
use crate::tokenize::quantize_image;

/// Training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum StageId {
    I,
    II,
    III,
}

impl TryFrom<u8> for StageId {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<StageId, String> {
        match v {
            1 => Ok(StageId::I),
            2 => Ok(StageId::II),
            3 => Ok(StageId::III),
            _ => Err(format!("stage must be 1, 2, or 3, got {v}")),
        }
    }
}

impl From<StageId> for u8 {
    fn from(s: StageId) -> u8 {
        match s {
            StageId::I => 1,
            StageId::II => 2,
            StageId::III => 3,
        }
    }
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::I => "stage1",
            StageId::II => "stage2",
            StageId::III => "stage3",
        }
    }
}

/// Per-stage schedule and optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageId,
    pub epochs: usize,
    pub peak_lr: f32,
    pub warmup_ratio: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub seed: u64,
    /// Optional hard cap on optimizer steps (for short calibration runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl StageConfig {
    /// Published hyperparameters: epochs 1/2/1 across the stages, peak
    /// learning rate 1e-4, warmup ratio 0.01, betas 0.9/0.95, weight decay
    /// 0.1; K = 4 for the super-resolution stage.
    pub fn defaults(stage: StageId) -> StageConfig {
        StageConfig {
            stage,
            epochs: match stage {
                StageId::I => 1,
                StageId::II => 2,
                StageId::III => 1,
            },
            peak_lr: 1e-4,
            warmup_ratio: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            batch_size: 8,
            k: match stage {
                StageId::III => Some(4),
                _ => None,
            },
            seed: 0,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::Config(format!(
                "warmup ratio {} outside (0, 1)",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        match (self.stage, self.k) {
            (StageId::III, None) => {
                return Err(Error::Config("stage III requires k".into()));
            }
            (StageId::III, Some(0)) => {
                return Err(Error::Config("k must be ≥ 1".into()));
            }
            (s, Some(_)) if s != StageId::III => {
                return Err(Error::Config("k is only valid for stage III".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// One JSON document drives a training run: model geometry plus a stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub stage: StageConfig,
}

/// Donor pretraining settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f32,
    pub warmup_ratio: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    /// Stop once the per-byte loss falls below this.
    pub target_loss: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::desk(),
            steps: 400,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_ratio: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            target_loss: 2.0,
            seed: 0,
        }
    }
}

/// One optimizer step's record; serialized as a JSON line by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetric {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f32,
    pub loss_per_token: f32,
    pub supervised_tokens: usize,
}

/// Train a plain causal byte-level LM on a text corpus with next-token
/// prediction until the per-byte loss drops below the target or the step
/// budget ends. Deterministic in the seed.
pub fn pretrain_text_lm(corpus: &str, cfg: &PretrainConfig) -> Result<(TextLm, Vec<StepMetric>)> {
    cfg.model.validate()?;
    let bytes = corpus.as_bytes();
    let context = cfg.model.context;
    if bytes.len() < context + 1 {
        return Err(Error::Data(format!(
            "corpus of {} bytes is shorter than one {context}-byte context window",
            bytes.len()
        )));
    }
    let lm = TextLm::new(cfg.model, 262, cfg.seed)?;
    let trainables = lm.trainable();
    let mut opt = AdamW::new(trainables.len(), cfg.beta1, cfg.beta2, cfg.weight_decay);
    let schedule = LrSchedule::from_ratio(cfg.peak_lr, cfg.warmup_ratio, cfg.steps);
    let mut r = rng::seeded(cfg.seed.wrapping_add(1));
    let mut metrics = Vec::new();
    for step in 0..cfg.steps {
        let mut sum_loss = 0.0f64;
        let mut sum_count = 0usize;
        for _ in 0..cfg.batch_size {
            let start = rng::index(&mut r, bytes.len() - context);
            let ids: Vec<u32> = bytes[start..start + context]
                .iter()
                .map(|&b| u32::from(b))
                .collect();
            let logits = lm.forward_ids(&ids)?;
            let rows: Vec<usize> = (0..ids.len() - 1).collect();
            let shifted = gather_rows(&logits, &rows)?;
            let targets: Vec<u32> = ids[1..].to_vec();
            let mask = vec![true; targets.len()];
            let loss = cross_entropy_rows(&shifted, &targets, &mask)?;
            sum_loss += loss.item() as f64;
            sum_count += targets.len();
            loss.scale(1.0 / targets.len() as f32)
                .backward_scaled(1.0 / cfg.batch_size as f32)?;
        }
        let lr = schedule.lr(step);
        opt.step(&trainables, step, lr)?;
        let loss_per_token = (sum_loss / sum_count as f64) as f32;
        metrics.push(StepMetric {
            stage: "pretrain".to_string(),
            epoch: 0,
            step,
            lr,
            loss_per_token,
            supervised_tokens: sum_count,
        });
        if loss_per_token < cfg.target_loss && step >= schedule.warmup_steps {
            break;
        }
    }
    Ok((lm, metrics))
}

/// Run one training stage over a loaded dataset. Stage I alternates
/// text-to-image and captioning sequences; Stage II supervises only the
/// resolution-tagged image span; Stage III runs the next-K-token cascade.
pub fn run_stage(
    model: &mut SemVieModel,
    cfg: &StageConfig,
    data: &[LoadedRecord],
) -> Result<Vec<StepMetric>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }

    // Tokenize every record once up front.
    let mut grids = Vec::with_capacity(data.len());
    for rec in data {
        let grid = quantize_image(&rec.image, &model.codebook)?;
        let hi = match (cfg.stage, &rec.hi_image) {
            (StageId::III, Some(img)) => Some(quantize_image(img, &model.codebook)?),
            (StageId::III, None) => {
                return Err(Error::Config(format!(
                    "stage III needs high-resolution pairs, record {} has none",
                    rec.record.image
                )));
            }
            _ => None,
        };
        grids.push((grid, hi));
    }

    let k = cfg.k.unwrap_or(1);
    if cfg.stage == StageId::III && k > 1 && model.block_heads.len() != k {
        model.attach_block_heads(k)?;
    }

    let trainables = model.trainable();
    for (_, t) in &trainables {
        t.zero_grad();
    }
    let mut opt = AdamW::new(trainables.len(), cfg.beta1, cfg.beta2, cfg.weight_decay);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut total_steps = cfg.epochs * steps_per_epoch;
    if let Some(cap) = cfg.max_steps {
        total_steps = total_steps.min(cap);
    }
    let schedule = LrSchedule::from_ratio(cfg.peak_lr, cfg.warmup_ratio, total_steps);

    let mut r = rng::seeded(cfg.seed);
    let mut metrics = Vec::new();
    let mut step = 0usize;
    let mut seq_counter = 0usize;
    'stage: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng::shuffle(&mut r, &mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut sum_loss = 0.0f64;
            let mut sum_count = 0usize;
            for &idx in chunk {
                let rec = &data[idx];
                let (grid, hi) = &grids[idx];
                let loss = match cfg.stage {
                    StageId::I => {
                        let seq = if seq_counter % 2 == 0 {
                            build_t2i_sequence(
                                &rec.record.caption,
                                grid,
                                None,
                                SupervisionMode::All,
                                &model.layout,
                            )?
                        } else {
                            build_caption_sequence(&rec.record.caption, grid, &model.layout)?
                        };
                        ntp_loss(model, &seq)?
                    }
                    StageId::II => {
                        let seq = build_t2i_sequence(
                            &rec.record.caption,
                            grid,
                            Some((rec.record.height, rec.record.width)),
                            SupervisionMode::ImageSpanOnly,
                            &model.layout,
                        )?;
                        ntp_loss(model, &seq)?
                    }
                    StageId::III => {
                        let high = hi.as_ref().expect("checked above");
                        let seq = build_sr_sequence(
                            &rec.record.caption,
                            grid,
                            high,
                            (rec.record.height * 2, rec.record.width * 2),
                            &model.layout,
                        )?;
                        nktp_loss(model, &seq, k)?
                    }
                };
                seq_counter += 1;
                sum_loss += loss.total() as f64;
                sum_count += loss.count;
                loss.mean_tensor()
                    .backward_scaled(1.0 / chunk.len() as f32)?;
            }
            let lr = schedule.lr(step);
            opt.step(&trainables, step, lr)?;
            metrics.push(StepMetric {
                stage: cfg.stage.name().to_string(),
                epoch,
                step,
                lr,
                loss_per_token: (sum_loss / sum_count as f64) as f32,
                supervised_tokens: sum_count,
            });
            step += 1;
            if step >= total_steps {
                break 'stage;
            }
        }
    }
    model.provenance.push(cfg.stage.name().to_string());
    Ok(metrics)
}
