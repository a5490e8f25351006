//! Word-level text encoder with hierarchical contrastive training.
//!
//! The encoder is a small pre-norm transformer over a closed vocabulary;
//! a text embedding is the average of the final hidden states over non-pad
//! positions. A two-layer projection head maps embeddings into the
//! contrastive space and is re-initialized for every training level.

mod infonce;
mod metrics;
mod train;

pub use infonce::{info_nce, info_nce_with_grad, ContrastiveBatch};
pub use metrics::{
    alignment_of, cosine, embedding_metrics, uniformity_of, EmbeddingMetrics,
};
pub use train::{train_level, EncoderTrainConfig, TrainLog};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::augment::{AugmentError, Level};
use crate::ckpt::{self, CkptError};
use crate::grammar;
use crate::nn::{
    sinusoidal_positions, Activation, BlockCache, Embedding, LayerNorm, Linear, LnCache, Param,
    TransformerBlock,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("tokenized length {len} exceeds max sequence length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("text tokenizes to nothing")]
    EmptyText,
    #[error("shape mismatch: expected width {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("zero-vector embedding has no cosine direction")]
    ZeroVectorEmbedding,
    #[error("bad contrastive batch: {0}")]
    BatchShape(String),
    #[error("level {level} must start from a {expected} checkpoint, found {found}")]
    LevelOrderViolation {
        level: Level,
        expected: String,
        found: String,
    },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("need at least {need} pairs, got {have}")]
    InsufficientPairs { have: usize, need: usize },
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

/// Reserved token ids.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MOTIONLESS_ID: usize = 3;
pub const MASK_ID: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<unk>", grammar::SEP, grammar::MOTIONLESS, grammar::MASK];

/// Word-level vocabulary with reserved contiguous special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus of texts. Words get ids after the
    /// specials, in sorted order, so the result is independent of corpus
    /// ordering.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Vocabulary {
        let mut words = std::collections::BTreeSet::new();
        for text in texts {
            for tok in tokenize(text) {
                if !SPECIALS.contains(&tok.as_str()) {
                    words.insert(tok);
                }
            }
        }
        Self::from_words(words.into_iter().collect())
    }

    pub fn from_words(words: Vec<String>) -> Vocabulary {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-special words in id order.
    pub fn words(&self) -> &[String] {
        &self.id_to_token[SPECIALS.len()..]
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id_of(t)).collect()
    }
}

/// Splits text into word tokens. The grammar's special tokens survive as
/// single tokens; everything else is lowercased with punctuation broken out.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if SPECIALS.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Encoder architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub d_proj: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: 512,
            d_proj: 32,
        }
    }
}

/// The transformer text encoder.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub config: EncoderConfig,
}

/// Cached activations of one encoded text, for the backward pass.
pub struct EncodeCache {
    ids: Vec<usize>,
    pad: Vec<bool>,
    n_real: usize,
    blocks: Vec<Option<BlockCache>>,
    final_ln: Option<LnCache>,
}

impl TextEncoder {
    pub fn new(vocab_size: usize, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> TextEncoder {
        let blocks = (0..config.n_layers)
            .map(|_| TransformerBlock::new(rng, config.d_model, config.n_heads, config.d_ff))
            .collect();
        TextEncoder {
            embed: Embedding::new(rng, vocab_size, config.d_model),
            blocks,
            final_ln: LayerNorm::new(config.d_model),
            config: config.clone(),
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<usize, EncoderError> {
        let n_real = ids.iter().take_while(|&&id| id != PAD_ID).count();
        if n_real == 0 {
            return Err(EncoderError::EmptyText);
        }
        if ids.len() > self.config.max_len {
            return Err(EncoderError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        Ok(n_real)
    }

    /// Mean of the final hidden states over non-pad positions. Trailing
    /// `<pad>` ids are masked out of attention and excluded from the mean,
    /// so the result is independent of padded length.
    pub fn forward_ids(&self, ids: &[usize]) -> Result<Array1<f64>, EncoderError> {
        let n_real = self.check_ids(ids)?;
        let pad: Vec<bool> = ids.iter().map(|&id| id == PAD_ID).collect();
        let mut x = self.embed.forward(ids);
        x += &sinusoidal_positions(ids.len(), self.config.d_model);
        for block in &self.blocks {
            x = block.forward(&x, Some(&pad), None);
        }
        let x = self.final_ln.forward(&x, None);
        Ok(mean_rows(&x, n_real))
    }

    /// Forward pass that retains activations for [`TextEncoder::backward`].
    pub fn forward_ids_train(
        &self,
        ids: &[usize],
    ) -> Result<(Array1<f64>, EncodeCache), EncoderError> {
        let n_real = self.check_ids(ids)?;
        let pad: Vec<bool> = ids.iter().map(|&id| id == PAD_ID).collect();
        let mut cache = EncodeCache {
            ids: ids.to_vec(),
            pad,
            n_real,
            blocks: vec![None; self.blocks.len()],
            final_ln: None,
        };
        let mut x = self.embed.forward(ids);
        x += &sinusoidal_positions(ids.len(), self.config.d_model);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, Some(&cache.pad), Some(&mut cache.blocks[i]));
        }
        let x = self.final_ln.forward(&x, Some(&mut cache.final_ln));
        Ok((mean_rows(&x, n_real), cache))
    }

    /// Backpropagates the gradient of one pooled embedding.
    pub fn backward(&mut self, cache: &EncodeCache, gh: &Array1<f64>) {
        let len = cache.ids.len();
        let d = self.config.d_model;
        let mut gx = Array2::zeros((len, d));
        let scale = 1.0 / cache.n_real as f64;
        for i in 0..cache.n_real {
            for c in 0..d {
                gx[[i, c]] = gh[c] * scale;
            }
        }
        let mut gx = self.final_ln.backward(cache.final_ln.as_ref().unwrap(), &gx);
        for (i, block) in self.blocks.iter_mut().enumerate().rev() {
            gx = block.backward(cache.blocks[i].as_ref().unwrap(), &gx);
        }
        self.embed.backward(&cache.ids, &gx);
    }

    pub fn visit<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.embed.visit("embed", f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&format!("block{i}"), f);
        }
        self.final_ln.visit("final_ln", f);
    }
}

fn mean_rows(x: &Array2<f64>, n: usize) -> Array1<f64> {
    let mut h = Array1::zeros(x.ncols());
    for i in 0..n {
        h += &x.row(i);
    }
    h / n as f64
}

/// Two-layer projection head mapping pooled embeddings into the contrastive
/// space.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub lin1: Linear,
    pub lin2: Linear,
    pub act: Activation,
}

pub struct HeadCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl ProjectionHead {
    pub fn new(d_model: usize, d_proj: usize, rng: &mut ChaCha8Rng) -> ProjectionHead {
        ProjectionHead {
            lin1: Linear::new(rng, d_model, d_model),
            lin2: Linear::new(rng, d_model, d_proj),
            act: Activation::Gelu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lin1.w.v.nrows()
    }

    pub fn forward(&self, h: &Array2<f64>) -> Array2<f64> {
        let pre = self.lin1.forward(h);
        let hidden = pre.mapv(|v| self.act.apply(v));
        self.lin2.forward(&hidden)
    }

    pub fn forward_train(&self, h: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        let pre = self.lin1.forward(h);
        let hidden = pre.mapv(|v| self.act.apply(v));
        let z = self.lin2.forward(&hidden);
        (
            z,
            HeadCache {
                x: h.clone(),
                pre,
                hidden,
            },
        )
    }

    pub fn backward(&mut self, cache: &HeadCache, gz: &Array2<f64>) -> Array2<f64> {
        let ghidden = self.lin2.backward(&cache.hidden, gz);
        let gpre = &ghidden * &cache.pre.mapv(|v| self.act.derivative(v));
        self.lin1.backward(&cache.x, &gpre)
    }

    pub fn visit<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.lin1.visit("head.lin1", f);
        self.lin2.visit("head.lin2", f);
    }
}

/// Encodes a text to its pooled embedding `h`.
pub fn encode(
    text: &str,
    encoder: &TextEncoder,
    vocab: &Vocabulary,
) -> Result<Array1<f64>, EncoderError> {
    encoder.forward_ids(&vocab.encode_ids(text))
}

/// Projects a pooled embedding into the contrastive space.
pub fn project(h: &Array1<f64>, head: &ProjectionHead) -> Result<Array1<f64>, EncoderError> {
    if h.len() != head.input_dim() {
        return Err(EncoderError::ShapeMismatch {
            expected: head.input_dim(),
            got: h.len(),
        });
    }
    let row = h.view().insert_axis(Axis(0)).to_owned();
    Ok(head.forward(&row).row(0).to_owned())
}

/// Encoder weights bundled with their vocabulary, projection head, training
/// level, and lineage.
#[derive(Debug, Clone)]
pub struct EncoderCheckpoint {
    pub vocab: Vocabulary,
    pub config: EncoderConfig,
    pub encoder: TextEncoder,
    pub head: ProjectionHead,
    pub level: Option<Level>,
    pub parent_hash: String,
    pub train_config: EncoderTrainConfig,
}

impl EncoderCheckpoint {
    /// A freshly initialized, untrained checkpoint.
    pub fn fresh(vocab: Vocabulary, config: EncoderConfig, seed: u64) -> EncoderCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = TextEncoder::new(vocab.len(), &config, &mut rng);
        let head = ProjectionHead::new(config.d_model, config.d_proj, &mut rng);
        EncoderCheckpoint {
            vocab,
            config,
            encoder,
            head,
            level: None,
            parent_hash: String::new(),
            train_config: EncoderTrainConfig::default(),
        }
    }

    /// Pooled embedding of a text.
    pub fn embed(&self, text: &str) -> Result<Array1<f64>, EncoderError> {
        encode(text, &self.encoder, &self.vocab)
    }

    /// Projected contrastive embedding of a text.
    pub fn embed_projected(&self, text: &str) -> Result<Array1<f64>, EncoderError> {
        project(&self.embed(text)?, &self.head)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CkptError> {
        let meta = json!({
            "format_version": ckpt::FORMAT_VERSION,
            "kind": "encoder",
            "level": self.level.map(|l| l.name()),
            "parent_hash": self.parent_hash,
            "config": serde_json::to_value(&self.config).expect("config serializes"),
            "train_config": serde_json::to_value(&self.train_config).expect("config serializes"),
            "vocab": self.vocab.words(),
        });
        let mut copy = self.clone();
        let mut named: Vec<(String, Array2<f64>)> = Vec::new();
        copy.encoder.visit(&mut |name, p| named.push((name, p.v.clone())));
        copy.head.visit(&mut |name, p| named.push((name, p.v.clone())));
        let refs: Vec<(String, &Array2<f64>)> =
            named.iter().map(|(n, v)| (n.clone(), v)).collect();
        ckpt::to_bytes(&meta, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EncoderCheckpoint, EncoderError> {
        let (meta, tensors) = ckpt::from_bytes(bytes)?;
        if meta["kind"] != "encoder" {
            return Err(
                CkptError::Malformed(format!("kind {} is not encoder", meta["kind"])).into(),
            );
        }
        let config: EncoderConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| CkptError::Malformed(e.to_string()))?;
        let train_config: EncoderTrainConfig =
            serde_json::from_value(meta["train_config"].clone())
                .map_err(|e| CkptError::Malformed(e.to_string()))?;
        let words: Vec<String> = serde_json::from_value(meta["vocab"].clone())
            .map_err(|e| CkptError::Malformed(e.to_string()))?;
        let level = match &meta["level"] {
            serde_json::Value::Null => None,
            serde_json::Value::String(s) => Some(
                Level::from_name(s)
                    .ok_or_else(|| CkptError::Malformed(format!("unknown level {s}")))?,
            ),
            other => return Err(CkptError::Malformed(format!("bad level {other}")).into()),
        };
        let parent_hash = meta["parent_hash"].as_str().unwrap_or_default().to_string();

        let vocab = Vocabulary::from_words(words);
        let mut out = EncoderCheckpoint::fresh(vocab, config, 0);
        out.level = level;
        out.parent_hash = parent_hash;
        out.train_config = train_config;

        let mut map: BTreeMap<String, Array2<f64>> = tensors.into_iter().collect();
        let mut problems = Vec::new();
        out.encoder.visit(&mut |name, p| {
            load_tensor(&mut map, &name, p, &mut problems);
        });
        out.head.visit(&mut |name, p| {
            load_tensor(&mut map, &name, p, &mut problems);
        });
        if !problems.is_empty() {
            return Err(CkptError::Malformed(format!("missing tensors: {problems:?}")).into());
        }
        if !map.is_empty() {
            let extra: Vec<&String> = map.keys().collect();
            return Err(CkptError::Malformed(format!("unexpected tensors: {extra:?}")).into());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(CkptError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EncoderCheckpoint, EncoderError> {
        let bytes = std::fs::read(path).map_err(CkptError::Io)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint; identifies these exact weights.
    pub fn content_hash(&self) -> Result<String, CkptError> {
        Ok(ckpt::sha256_hex(&self.to_bytes()?))
    }
}

pub(crate) fn load_tensor(
    map: &mut BTreeMap<String, Array2<f64>>,
    name: &str,
    p: &mut Param,
    problems: &mut Vec<String>,
) {
    match map.remove(name) {
        Some(v) if v.raw_dim() == p.v.raw_dim() => p.v = v,
        Some(v) => problems.push(format!(
            "{name} has shape {:?}, expected {:?}",
            v.dim(),
            p.v.dim()
        )),
        None => problems.push(name.to_string()),
    }
}
