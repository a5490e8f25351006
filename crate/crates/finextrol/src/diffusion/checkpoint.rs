//! Persistence for denoiser checkpoints, in the same container format as
//! encoder checkpoints with a `model_kind` field.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::model::{BaseDenoiser, ControlBranch, DenoiserConfig, ModelKind};
use super::schedule::ScheduleConfig;
use super::train::DiffTrainConfig;
use super::DiffusionError;
use crate::ckpt::{self, CkptError};
use crate::encoder::{load_tensor, Vocabulary};

/// A trained denoiser: base branch, optional control branch, the schedule
/// and vocabulary it was trained with, and the lineage hash of the frozen
/// text encoder used for control embeddings.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub kind: ModelKind,
    pub schedule: ScheduleConfig,
    pub config: DenoiserConfig,
    pub vocab: Vocabulary,
    pub base: BaseDenoiser,
    pub control: Option<ControlBranch>,
    pub encoder_hash: String,
    pub train_config: DiffTrainConfig,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CkptError> {
        let meta = json!({
            "format_version": ckpt::FORMAT_VERSION,
            "kind": "model",
            "model_kind": serde_json::to_value(self.kind).expect("kind serializes"),
            "schedule": serde_json::to_value(&self.schedule).expect("schedule serializes"),
            "config": serde_json::to_value(&self.config).expect("config serializes"),
            "train_config": serde_json::to_value(&self.train_config).expect("config serializes"),
            "encoder_hash": self.encoder_hash,
            "vocab": self.vocab.words(),
        });
        let mut copy = self.clone();
        let mut named: Vec<(String, Array2<f64>)> = Vec::new();
        copy.base.visit(&mut |name, p| named.push((name, p.v.clone())));
        if let Some(ctrl) = copy.control.as_mut() {
            ctrl.visit(&mut |name, p| named.push((name, p.v.clone())));
        }
        let refs: Vec<(String, &Array2<f64>)> =
            named.iter().map(|(n, v)| (n.clone(), v)).collect();
        ckpt::to_bytes(&meta, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint, DiffusionError> {
        let (meta, tensors) = ckpt::from_bytes(bytes)?;
        if meta["kind"] != "model" {
            return Err(
                CkptError::Malformed(format!("kind {} is not model", meta["kind"])).into(),
            );
        }
        let kind: ModelKind = serde_json::from_value(meta["model_kind"].clone())
            .map_err(|e| CkptError::Malformed(e.to_string()))?;
        let schedule: ScheduleConfig = serde_json::from_value(meta["schedule"].clone())
            .map_err(|e| CkptError::Malformed(e.to_string()))?;
        let config: DenoiserConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| CkptError::Malformed(e.to_string()))?;
        let train_config: DiffTrainConfig = serde_json::from_value(meta["train_config"].clone())
            .map_err(|e| CkptError::Malformed(e.to_string()))?;
        let words: Vec<String> = serde_json::from_value(meta["vocab"].clone())
            .map_err(|e| CkptError::Malformed(e.to_string()))?;
        let encoder_hash = meta["encoder_hash"].as_str().unwrap_or_default().to_string();

        let vocab = Vocabulary::from_words(words);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut base = BaseDenoiser::new(vocab.len(), &config, &mut rng);
        let mut control = if kind == ModelKind::Control {
            Some(ControlBranch::from_base(&base, &mut rng))
        } else {
            None
        };

        let mut map: BTreeMap<String, Array2<f64>> = tensors.into_iter().collect();
        let mut problems = Vec::new();
        base.visit(&mut |name, p| load_tensor(&mut map, &name, p, &mut problems));
        if let Some(ctrl) = control.as_mut() {
            ctrl.visit(&mut |name, p| load_tensor(&mut map, &name, p, &mut problems));
        }
        if !problems.is_empty() {
            return Err(CkptError::Malformed(format!("missing tensors: {problems:?}")).into());
        }
        if !map.is_empty() {
            let extra: Vec<&String> = map.keys().collect();
            return Err(CkptError::Malformed(format!("unexpected tensors: {extra:?}")).into());
        }
        Ok(ModelCheckpoint {
            kind,
            schedule,
            config,
            vocab,
            base,
            control,
            encoder_hash,
            train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(CkptError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelCheckpoint, DiffusionError> {
        let bytes = std::fs::read(path).map_err(CkptError::Io)?;
        Self::from_bytes(&bytes)
    }

    pub fn content_hash(&self) -> Result<String, CkptError> {
        Ok(ckpt::sha256_hex(&self.to_bytes()?))
    }
}
