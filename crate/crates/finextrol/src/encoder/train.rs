//! Progressive contrastive training: sentence, then snippet, then sequence,
//! each level resuming the encoder weights of the previous one with a fresh
//! projection head.

use log::info;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    info_nce_with_grad, ContrastiveBatch, EncodeCache, EncoderCheckpoint, EncoderError,
};
use crate::augment::{build_pairs, Level, PairSource};
use crate::nn::{AdamW, AdamWConfig, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    /// Positive pairs per optimizer step (so 2x this many embeddings).
    pub batch_pairs: usize,
    /// Micro-batches accumulated per step; long sequence-level inputs use 4.
    pub accum_steps: usize,
    /// Sources drawn without replacement each epoch (clamped to the corpus).
    pub pairs_per_epoch: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Allows training a level from a checkpoint that is not its usual
    /// predecessor.
    pub override_level_order: bool,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            epochs: 60,
            batch_pairs: 32,
            accum_steps: 1,
            pairs_per_epoch: 256,
            lr: 1e-3,
            warmup_steps: 20,
            temperature: 0.07,
            seed: 0,
            override_level_order: false,
        }
    }
}

impl EncoderTrainConfig {
    /// Per-level defaults: identical hyperparameters everywhere except that
    /// the long sequence-level inputs train with gradient accumulation.
    pub fn for_level(level: Level) -> EncoderTrainConfig {
        match level {
            Level::Sentence => EncoderTrainConfig {
                epochs: 150,
                pairs_per_epoch: 64,
                ..EncoderTrainConfig::default()
            },
            Level::Snippet => EncoderTrainConfig {
                epochs: 150,
                pairs_per_epoch: 64,
                ..EncoderTrainConfig::default()
            },
            Level::Sequence => EncoderTrainConfig {
                epochs: 30,
                pairs_per_epoch: 192,
                accum_steps: 4,
                ..EncoderTrainConfig::default()
            },
        }
    }
}

/// Per-epoch mean losses of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub level: Level,
    pub epoch_losses: Vec<f64>,
}

fn expected_parent(level: Level) -> (Option<Level>, &'static str) {
    match level {
        Level::Sentence => (None, "fresh (untrained)"),
        Level::Snippet => (Some(Level::Sentence), "sentence-level"),
        Level::Sequence => (Some(Level::Snippet), "snippet-level"),
    }
}

/// Trains one contrastive level on pairs drawn from `source`, starting from
/// `init`'s encoder weights and a freshly sampled projection head. Returns
/// the new checkpoint tagged with the level and its parent's content hash.
pub fn train_level(
    level: Level,
    source: &PairSource<'_>,
    init: &EncoderCheckpoint,
    config: &EncoderTrainConfig,
) -> Result<(EncoderCheckpoint, TrainLog), EncoderError> {
    let (want_parent, expected) = expected_parent(level);
    if init.level != want_parent && !config.override_level_order {
        return Err(EncoderError::LevelOrderViolation {
            level,
            expected: expected.to_string(),
            found: init
                .level
                .map(|l| l.name().to_string())
                .unwrap_or_else(|| "fresh (untrained)".to_string()),
        });
    }

    let parent_hash = init.content_hash()?;
    let mut ckpt = init.clone();
    ckpt.level = Some(level);
    ckpt.parent_hash = parent_hash;
    ckpt.train_config = config.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    ckpt.head = super::ProjectionHead::new(ckpt.config.d_model, ckpt.config.d_proj, &mut rng);

    let mut log = TrainLog {
        level,
        epoch_losses: Vec::new(),
    };
    if config.epochs == 0 {
        return Ok((ckpt, log));
    }

    let pairs_per_epoch = config.pairs_per_epoch.min(source.len()).max(1);
    let micro_pairs = (config.batch_pairs / config.accum_steps).max(1);
    let steps_per_epoch = pairs_per_epoch.div_ceil(micro_pairs * config.accum_steps);
    let schedule = LrSchedule::new(
        config.lr,
        config.warmup_steps,
        config.epochs * steps_per_epoch,
    );
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let pairs = build_pairs(source, pairs_per_epoch, &mut rng)?;
        let mut epoch_loss = 0.0f64;
        let mut batches = 0.0f64;

        for macro_chunk in pairs.chunks(micro_pairs * config.accum_steps) {
            for micro in macro_chunk.chunks(micro_pairs) {
                // encode 2N texts, keeping per-text caches for the backward
                let mut hs: Array2<f64> =
                    Array2::zeros((micro.len() * 2, ckpt.config.d_model));
                let mut caches: Vec<EncodeCache> = Vec::with_capacity(micro.len() * 2);
                let mut id_lists: Vec<Vec<usize>> = Vec::with_capacity(micro.len() * 2);
                for pair in micro {
                    id_lists.push(ckpt.vocab.encode_ids(&pair.text_a));
                    id_lists.push(ckpt.vocab.encode_ids(&pair.text_b));
                }
                for (row, ids) in id_lists.iter().enumerate() {
                    let (h, cache) = ckpt.encoder.forward_ids_train(ids)?;
                    hs.row_mut(row).assign(&h);
                    caches.push(cache);
                }
                let (z, head_cache) = ckpt.head.forward_train(&hs);
                let batch = ContrastiveBatch::new(z, config.temperature)?;
                let (loss, gz) = info_nce_with_grad(&batch)?;
                if !loss.is_finite() {
                    return Err(EncoderError::NonFiniteLoss { epoch });
                }
                epoch_loss += loss;
                batches += 1.0;

                let gz = gz / config.accum_steps as f64;
                let gh = ckpt.head.backward(&head_cache, &gz);
                for (row, cache) in caches.iter().enumerate() {
                    ckpt.encoder.backward(cache, &gh.row(row).to_owned());
                }
            }
            let lr = schedule.at(step);
            let mut params = Vec::new();
            ckpt.encoder.visit(&mut |_, p| params.push(p));
            ckpt.head.visit(&mut |_, p| params.push(p));
            opt.step(&mut params, lr);
            step += 1;
        }

        let mean = epoch_loss / batches.max(1.0);
        log.epoch_losses.push(mean);
        info!("{level} contrastive epoch {epoch}: loss {mean:.6}");
    }
    Ok((ckpt, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{RewriteTable, SentenceCorpus};
    use crate::encoder::{EncoderConfig, Vocabulary};
    use crate::grammar::BodyPart;
    use crate::lexicon::{instruction_sentence, MoveDirection};

    fn tiny_setup() -> (SentenceCorpus, EncoderCheckpoint) {
        let table = RewriteTable;
        let sentences = BodyPart::ALL.iter().flat_map(|&p| {
            MoveDirection::ALL
                .iter()
                .map(move |&d| instruction_sentence(p, d))
        });
        let corpus = SentenceCorpus::build(sentences, &table).unwrap();
        let mut texts: Vec<String> = Vec::new();
        for i in 0..corpus.len() {
            texts.push(corpus.original(i).to_string());
            texts.push(corpus.paraphrase(i).to_string());
        }
        let vocab = Vocabulary::build(texts.iter().map(|s| s.as_str()));
        let config = EncoderConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_len: 64,
            d_proj: 16,
        };
        (corpus, EncoderCheckpoint::fresh(vocab, config, 11))
    }

    #[test]
    fn zero_epochs_keeps_encoder_parameters() {
        let (corpus, init) = tiny_setup();
        let config = EncoderTrainConfig {
            epochs: 0,
            ..EncoderTrainConfig::default()
        };
        let (out, log) = train_level(
            Level::Sentence,
            &PairSource::Sentences(&corpus),
            &init,
            &config,
        )
        .unwrap();
        assert!(log.epoch_losses.is_empty());
        let h_init = init.embed("Move your head up.").unwrap();
        let h_out = out.embed("Move your head up.").unwrap();
        for c in 0..h_init.len() {
            assert_eq!(h_init[c], h_out[c]);
        }
        assert_eq!(out.level, Some(Level::Sentence));
        assert_eq!(out.parent_hash, init.content_hash().unwrap());
    }

    #[test]
    fn level_order_is_enforced() {
        let (corpus, init) = tiny_setup();
        let config = EncoderTrainConfig {
            epochs: 0,
            ..EncoderTrainConfig::default()
        };
        let err = train_level(
            Level::Sequence,
            &PairSource::Sentences(&corpus),
            &init,
            &config,
        );
        assert!(matches!(err, Err(EncoderError::LevelOrderViolation { .. })));

        let override_cfg = EncoderTrainConfig {
            epochs: 0,
            override_level_order: true,
            ..EncoderTrainConfig::default()
        };
        assert!(train_level(
            Level::Sequence,
            &PairSource::Sentences(&corpus),
            &init,
            &override_cfg,
        )
        .is_ok());
    }

    #[test]
    fn short_training_reduces_loss() {
        let (corpus, init) = tiny_setup();
        let config = EncoderTrainConfig {
            epochs: 6,
            batch_pairs: 16,
            pairs_per_epoch: 32,
            warmup_steps: 2,
            seed: 5,
            ..EncoderTrainConfig::default()
        };
        let (_, log) = train_level(
            Level::Sentence,
            &PairSource::Sentences(&corpus),
            &init,
            &config,
        )
        .unwrap();
        let first = log.epoch_losses[0];
        let last = *log.epoch_losses.last().unwrap();
        assert!(last < first, "loss {first} -> {last} did not improve");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (corpus, init) = tiny_setup();
        let config = EncoderTrainConfig {
            epochs: 2,
            batch_pairs: 8,
            pairs_per_epoch: 16,
            seed: 9,
            ..EncoderTrainConfig::default()
        };
        let run = || {
            train_level(
                Level::Sentence,
                &PairSource::Sentences(&corpus),
                &init,
                &config,
            )
            .unwrap()
            .0
            .to_bytes()
            .unwrap()
        };
        assert_eq!(run(), run());
    }
}
