//! Fine-grained textually controlled motion generation on a synthetic 2D
//! skeleton world.
//!
//! The crate is organized around six subsystems:
//!
//! - [`grammar`]: the per-body-part, per-interval control-signal text format
//!   (`<SEP>` / `<Motionless>` / `<Mask>` tokens) with parsing, serialization,
//!   interval masking, and density filtering.
//! - [`augment`]: deterministic sentence paraphrasing plus snippet- and
//!   sequence-level augmentations used to build contrastive positive pairs.
//! - [`encoder`]: a small transformer text encoder trained from scratch with
//!   hierarchical contrastive learning (sentence -> snippet -> sequence).
//! - [`world`]: a procedural six-part 2D skeleton world generating
//!   (motion, coarse text, control signal) triples with exact ground truth.
//! - [`diffusion`]: an x0-predicting motion diffusion model and its
//!   dual-branch controlled variant with zero-initialized connectors.
//! - [`eval`]: exact control-adherence scoring, a Fréchet-style realism
//!   proxy over hand-crafted motion features, and experiment orchestration.
//!
//! Everything runs single-threaded on CPU and is deterministic given seeds.

pub mod augment;
pub mod ckpt;
pub mod diffusion;
pub mod encoder;
pub mod eval;
pub mod grammar;
pub mod lexicon;
pub mod nn;
pub mod world;
