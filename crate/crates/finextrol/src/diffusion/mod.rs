//! Motion diffusion: noise schedule, x0-predicting denoiser, dual-branch
//! control with zero-initialized connectors, training, and sampling.

mod checkpoint;
mod model;
mod sample;
mod schedule;
mod train;

pub use checkpoint::ModelCheckpoint;
pub use model::{
    controlled_backward, controlled_forward, controlled_forward_train, BaseDenoiser,
    ControlBranch, DenoiserConfig, ModelKind,
};
pub use sample::{sample, SampleOptions};
pub use schedule::{build_cosine_schedule, forward_diffuse, NoiseSchedule, ScheduleConfig};
pub use train::{
    model_vocabulary, train_base, train_control, train_direct, DiffTrainConfig, DiffTrainLog,
};

use std::collections::BTreeMap;

use ndarray::Array2;
use thiserror::Error;

use crate::ckpt::CkptError;
use crate::encoder::{EncoderCheckpoint, EncoderError};
use crate::grammar::BodyPart;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSteps(String),
    #[error("diffusion step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("{steps} sampling steps exceed the schedule's {max}")]
    StepOverflow { steps: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model has no control branch")]
    MissingControlBranch,
    #[error("encoder hash {found} does not match the checkpoint's {expected}")]
    EncoderMismatch { expected: String, found: String },
    #[error("lineage mismatch: {0}")]
    LineageMismatch(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("text of {len} tokens exceeds the text path's {max}")]
    TextTooLong { len: usize, max: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

/// Concatenates per-part control-signal texts into the single control string
/// fed to the frozen encoder, prefixing each with its part name.
pub fn control_text_from_texts(texts: &BTreeMap<BodyPart, String>) -> String {
    texts
        .iter()
        .map(|(part, text)| format!("{} : {}", part.phrase(), text))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One denoising step of the base branch.
pub fn base_denoise(
    x_t: &Array2<f64>,
    t: usize,
    p: Option<&str>,
    model: &ModelCheckpoint,
) -> Result<Array2<f64>, DiffusionError> {
    let ids = p.map(|text| model.vocab.encode_ids(text));
    model.base.forward(x_t, t, ids.as_deref())
}

/// One denoising step of the dual-branch model conditioned on per-part
/// control-signal texts. The encoder must be the exact checkpoint recorded
/// at control-training time.
pub fn controlled_denoise(
    x_t: &Array2<f64>,
    t: usize,
    p: Option<&str>,
    c_texts: &BTreeMap<BodyPart, String>,
    model: &ModelCheckpoint,
    encoder: &EncoderCheckpoint,
) -> Result<Array2<f64>, DiffusionError> {
    let Some(ctrl) = &model.control else {
        return Err(DiffusionError::MissingControlBranch);
    };
    let hash = encoder.content_hash()?;
    if hash != model.encoder_hash {
        return Err(DiffusionError::EncoderMismatch {
            expected: model.encoder_hash.clone(),
            found: hash,
        });
    }
    let e_c = encoder.embed_projected(&control_text_from_texts(c_texts))?;
    let ids = p.map(|text| model.vocab.encode_ids(text));
    controlled_forward(&model.base, ctrl, x_t, t, ids.as_deref(), &e_c)
}
