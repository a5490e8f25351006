//! Training loops for the base, controlled, and direct-concatenation models.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::ModelCheckpoint;
use super::model::{
    controlled_backward, controlled_forward_train, BaseDenoiser, ControlBranch, DenoiserConfig,
    ModelKind,
};
use super::schedule::{build_cosine_schedule, forward_diffuse, ScheduleConfig};
use super::{control_text_from_texts, DiffusionError};
use crate::augment::Level;
use crate::encoder::{EncoderCheckpoint, Vocabulary};
use crate::grammar::{self, BodyPart};
use crate::nn::{AdamW, AdamWConfig, LrSchedule};
use crate::world::AnnotatedSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffTrainConfig {
    pub epochs: usize,
    /// Samples accumulated per optimizer step.
    pub batch_size: usize,
    /// Samples drawn per epoch; 0 uses the whole dataset.
    pub samples_per_epoch: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Probability of replacing the text condition with the null condition.
    pub null_cond_prob: f64,
    /// Probability of masking each control-signal interval during control
    /// and direct training.
    pub interval_mask_prob: f64,
    /// Freeze the base branch during control training instead of fine-tuning
    /// both branches jointly.
    pub freeze_base: bool,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        DiffTrainConfig {
            epochs: 8,
            batch_size: 32,
            samples_per_epoch: 0,
            lr: 1e-3,
            warmup_steps: 50,
            seed: 0,
            null_cond_prob: 0.10,
            interval_mask_prob: 0.50,
            freeze_base: false,
        }
    }
}

/// Per-epoch diagnostics of one diffusion training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffTrainLog {
    pub epoch_losses: Vec<f64>,
    /// Observed fraction of null-conditioned samples per epoch.
    pub null_rates: Vec<f64>,
    /// Observed fraction of masked control intervals per epoch (control and
    /// direct training only).
    pub mask_rates: Vec<f64>,
}

/// Vocabulary for the denoiser text path: coarse texts, serialized control
/// signals, and the part-prefix wording used when concatenating signals.
pub fn model_vocabulary(samples: &[AnnotatedSample]) -> Vocabulary {
    let mut texts: Vec<String> = Vec::new();
    for s in samples {
        texts.push(s.coarse_text.clone());
        let map: std::collections::BTreeMap<BodyPart, String> = s
            .control_signals
            .iter()
            .map(|(p, sig)| (*p, grammar::serialize(sig)))
            .collect();
        texts.push(control_text_from_texts(&map));
    }
    Vocabulary::build(texts.iter().map(|t| t.as_str()))
}

fn shuffled_indices<R: Rng>(n: usize, take: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n.saturating_sub(1) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(take.min(n).max(1));
    idx
}

/// Uniformly samples one of the 63 non-empty body-part subsets.
fn sample_part_subset<R: Rng>(rng: &mut R) -> Vec<BodyPart> {
    let bits: u32 = rng.random_range(1..64);
    BodyPart::ALL
        .into_iter()
        .enumerate()
        .filter(|(i, _)| bits & (1 << i) != 0)
        .map(|(_, p)| p)
        .collect()
}

/// Builds the training-time control text for a sample: a uniformly chosen
/// part subset, each part's signal masked interval-wise, concatenated with
/// part-name prefixes. Returns the text plus (masked, total) interval counts.
fn masked_control_text<R: Rng>(
    sample: &AnnotatedSample,
    mask_prob: f64,
    rng: &mut R,
) -> (String, usize, usize) {
    let parts = sample_part_subset(rng);
    let mut texts = std::collections::BTreeMap::new();
    let mut masked = 0usize;
    let mut total = 0usize;
    for part in parts {
        let sig = &sample.control_signals[&part];
        let m = grammar::mask_intervals(sig, mask_prob, rng);
        masked += m.intervals.iter().filter(|iv| iv.is_masked()).count()
            - sig.intervals.iter().filter(|iv| iv.is_masked()).count();
        total += sig.intervals.iter().filter(|iv| !iv.is_masked()).count();
        texts.insert(part, grammar::serialize(&m));
    }
    (control_text_from_texts(&texts), masked, total)
}

fn mse_and_grad(out: &ndarray::Array2<f64>, x0: &ndarray::Array2<f64>) -> (f64, ndarray::Array2<f64>) {
    let diff = out - x0;
    let n = out.len() as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Trains the base (uncontrolled) denoiser with the x0-prediction objective,
/// dropping the coarse text to the null condition at the configured rate.
pub fn train_base(
    samples: &[AnnotatedSample],
    arch: &DenoiserConfig,
    sched_cfg: &ScheduleConfig,
    config: &DiffTrainConfig,
) -> Result<(ModelCheckpoint, DiffTrainLog), DiffusionError> {
    train_single_branch(samples, arch, sched_cfg, config, ModelKind::Base)
}

/// Trains the direct-concatenation baseline: a single branch conditioned on
/// the coarse text concatenated with the (masked) control-signal texts.
pub fn train_direct(
    samples: &[AnnotatedSample],
    arch: &DenoiserConfig,
    sched_cfg: &ScheduleConfig,
    config: &DiffTrainConfig,
) -> Result<(ModelCheckpoint, DiffTrainLog), DiffusionError> {
    train_single_branch(samples, arch, sched_cfg, config, ModelKind::Direct)
}

fn train_single_branch(
    samples: &[AnnotatedSample],
    arch: &DenoiserConfig,
    sched_cfg: &ScheduleConfig,
    config: &DiffTrainConfig,
    kind: ModelKind,
) -> Result<(ModelCheckpoint, DiffTrainLog), DiffusionError> {
    assert!(!samples.is_empty(), "dataset is empty");
    let vocab = model_vocabulary(samples);
    let schedule = build_cosine_schedule(sched_cfg.t_steps, sched_cfg.offset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = BaseDenoiser::new(vocab.len(), arch, &mut rng);

    let per_epoch = if config.samples_per_epoch == 0 {
        samples.len()
    } else {
        config.samples_per_epoch.min(samples.len())
    };
    let steps_per_epoch = per_epoch.div_ceil(config.batch_size);
    let lr_schedule = LrSchedule::new(config.lr, config.warmup_steps, config.epochs * steps_per_epoch);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut step = 0usize;

    let mut log = DiffTrainLog {
        epoch_losses: Vec::new(),
        null_rates: Vec::new(),
        mask_rates: Vec::new(),
    };

    for epoch in 0..config.epochs {
        let order = shuffled_indices(samples.len(), per_epoch, &mut rng);
        let mut epoch_loss = 0.0;
        let mut nulls = 0usize;
        let mut masked_total = (0usize, 0usize);

        for chunk in order.chunks(config.batch_size) {
            for &i in chunk {
                let sample = &samples[i];
                let text = match kind {
                    ModelKind::Base => sample.coarse_text.clone(),
                    ModelKind::Direct => {
                        let (ctrl, m, tot) =
                            masked_control_text(sample, config.interval_mask_prob, &mut rng);
                        masked_total.0 += m;
                        masked_total.1 += tot;
                        format!("{} {}", sample.coarse_text, ctrl)
                    }
                    ModelKind::Control => unreachable!("handled by train_control"),
                };
                let is_null = rng.random::<f64>() < config.null_cond_prob;
                if is_null {
                    nulls += 1;
                }
                let ids = vocab.encode_ids(&text);
                let text_ids = if is_null { None } else { Some(ids.as_slice()) };

                let t = rng.random_range(1..=schedule.t_steps());
                let (x_t, _) = forward_diffuse(&sample.motion, t, &schedule, &mut rng)?;
                let (out, cache) = model.forward_train(&x_t, t, text_ids)?;
                let (loss, mut g) = mse_and_grad(&out, &sample.motion.frames);
                if !loss.is_finite() {
                    return Err(DiffusionError::NonFiniteLoss { epoch });
                }
                epoch_loss += loss;
                g /= chunk.len() as f64;
                model.backward(&cache, &g);
            }
            let lr = lr_schedule.at(step);
            let mut params = Vec::new();
            model.visit(&mut |_, p| params.push(p));
            opt.step(&mut params, lr);
            step += 1;
        }

        let mean = epoch_loss / order.len() as f64;
        log.epoch_losses.push(mean);
        log.null_rates.push(nulls as f64 / order.len() as f64);
        if kind == ModelKind::Direct {
            log.mask_rates
                .push(masked_total.0 as f64 / masked_total.1.max(1) as f64);
        }
        info!("{kind} epoch {epoch}: loss {mean:.6}");
    }

    Ok((
        ModelCheckpoint {
            kind,
            schedule: sched_cfg.clone(),
            config: arch.clone(),
            vocab,
            base: model,
            control: None,
            encoder_hash: String::new(),
            train_config: config.clone(),
        },
        log,
    ))
}

/// Trains the control branch on top of a trained base checkpoint. The branch
/// starts as a copy of the base trunk with zero-initialized connectors; the
/// frozen sequence-level encoder provides control embeddings for the masked,
/// part-prefixed signal texts. Both branches are fine-tuned jointly unless
/// `freeze_base` is set.
pub fn train_control(
    samples: &[AnnotatedSample],
    base_ckpt: &ModelCheckpoint,
    encoder: &EncoderCheckpoint,
    config: &DiffTrainConfig,
) -> Result<(ModelCheckpoint, DiffTrainLog), DiffusionError> {
    assert!(!samples.is_empty(), "dataset is empty");
    if base_ckpt.kind != ModelKind::Base {
        return Err(DiffusionError::LineageMismatch(format!(
            "control training resumes a base checkpoint, got {}",
            base_ckpt.kind
        )));
    }
    if encoder.level != Some(Level::Sequence) {
        return Err(DiffusionError::LineageMismatch(format!(
            "control training needs a sequence-level encoder, got {}",
            encoder
                .level
                .map(|l| l.name().to_string())
                .unwrap_or_else(|| "untrained".into())
        )));
    }
    if encoder.config.d_proj != base_ckpt.config.control_embed_dim {
        return Err(DiffusionError::ShapeMismatch(format!(
            "encoder projects to {}, model expects control width {}",
            encoder.config.d_proj, base_ckpt.config.control_embed_dim
        )));
    }
    let encoder_hash = encoder.content_hash()?;

    let schedule = build_cosine_schedule(base_ckpt.schedule.t_steps, base_ckpt.schedule.offset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut base = base_ckpt.base.clone();
    let mut ctrl = ControlBranch::from_base(&base, &mut rng);
    let vocab = base_ckpt.vocab.clone();

    let per_epoch = if config.samples_per_epoch == 0 {
        samples.len()
    } else {
        config.samples_per_epoch.min(samples.len())
    };
    let steps_per_epoch = per_epoch.div_ceil(config.batch_size);
    let lr_schedule = LrSchedule::new(config.lr, config.warmup_steps, config.epochs * steps_per_epoch);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut step = 0usize;

    let mut log = DiffTrainLog {
        epoch_losses: Vec::new(),
        null_rates: Vec::new(),
        mask_rates: Vec::new(),
    };

    for epoch in 0..config.epochs {
        let order = shuffled_indices(samples.len(), per_epoch, &mut rng);
        let mut epoch_loss = 0.0;
        let mut nulls = 0usize;
        let mut masked = 0usize;
        let mut maskable = 0usize;

        for chunk in order.chunks(config.batch_size) {
            for &i in chunk {
                let sample = &samples[i];
                let (ctrl_text, m, tot) =
                    masked_control_text(sample, config.interval_mask_prob, &mut rng);
                masked += m;
                maskable += tot;
                let e_c = encoder.embed_projected(&ctrl_text)?;

                let is_null = rng.random::<f64>() < config.null_cond_prob;
                if is_null {
                    nulls += 1;
                }
                let ids = vocab.encode_ids(&sample.coarse_text);
                let text_ids = if is_null { None } else { Some(ids.as_slice()) };

                let t = rng.random_range(1..=schedule.t_steps());
                let (x_t, _) = forward_diffuse(&sample.motion, t, &schedule, &mut rng)?;
                let (out, cache) =
                    controlled_forward_train(&base, &ctrl, &x_t, t, text_ids, &e_c)?;
                let (loss, mut g) = mse_and_grad(&out, &sample.motion.frames);
                if !loss.is_finite() {
                    return Err(DiffusionError::NonFiniteLoss { epoch });
                }
                epoch_loss += loss;
                g /= chunk.len() as f64;
                controlled_backward(&mut base, &mut ctrl, &cache, &g);
            }
            let lr = lr_schedule.at(step);
            let mut params = Vec::new();
            if !config.freeze_base {
                base.visit(&mut |_, p| params.push(p));
            }
            ctrl.visit(&mut |_, p| params.push(p));
            opt.step(&mut params, lr);
            if config.freeze_base {
                base.visit(&mut |_, p| p.zero_grad());
            }
            step += 1;
        }

        let mean = epoch_loss / order.len() as f64;
        log.epoch_losses.push(mean);
        log.null_rates.push(nulls as f64 / order.len() as f64);
        log.mask_rates.push(masked as f64 / maskable.max(1) as f64);
        info!("control epoch {epoch}: loss {mean:.6}");
    }

    Ok((
        ModelCheckpoint {
            kind: ModelKind::Control,
            schedule: base_ckpt.schedule.clone(),
            config: base_ckpt.config.clone(),
            vocab,
            base,
            control: Some(ctrl),
            encoder_hash,
            train_config: config.clone(),
        },
        log,
    ))
}
