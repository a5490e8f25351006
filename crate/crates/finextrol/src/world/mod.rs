//! Procedural six-part 2D skeleton world.
//!
//! Scripts place per-part movement commands on a grid of equal-length
//! temporal intervals. Rendering turns a script into a pose-feature motion
//! (per-frame 2D displacement from rest for each part, 12 channels total),
//! and annotation produces the matching coarse text and per-part control
//! signals. The construction keeps ground truth exact: a described interval
//! always carries the commanded displacement as its net motion, and parts
//! never cross the scoring threshold inside motionless intervals.

mod dataset;

pub use dataset::{dataset_generate, load_dataset, sample_to_record, SampleRecord};

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{ControlSignal, IntervalContent};
use crate::grammar::BodyPart;
use crate::lexicon::{coarse_text, instruction_sentence, MoveDirection};

/// Rest-pose anchors and movement limits for the six parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Rest-pose 2D anchor per part, in canonical part order.
    pub anchors: [(f64, f64); 6],
    /// Maximum displacement from rest per part.
    pub max_displacement: [f64; 6],
    /// Fraction of a part's maximum displacement it may recover toward rest
    /// per interval after a command. Kept below the adherence threshold
    /// fraction so the return never registers as motion.
    pub return_rate: f64,
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton {
            anchors: [
                (0.0, 1.6),  // head
                (0.0, 1.0),  // body
                (-0.5, 1.2), // left arm
                (0.5, 1.2),  // right arm
                (-0.2, 0.4), // left leg
                (0.2, 0.4),  // right leg
            ],
            max_displacement: [1.0; 6],
            return_rate: 0.25,
        }
    }
}

/// Pose-feature motion: `frames` is T x 12 (six parts x 2D displacement from
/// rest) at `frame_rate` frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Array2<f64>,
    pub frame_rate: f64,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// (x, y) displacement of `part` at frame `t`.
    pub fn part_at(&self, part: BodyPart, t: usize) -> (f64, f64) {
        let c = part.index() * 2;
        (self.frames[[t, c]], self.frames[[t, c + 1]])
    }
}

/// Number of pose-feature channels (six parts x 2D).
pub const MOTION_DIM: usize = 12;

/// One movement command: displace `part` toward `direction` during interval
/// `interval_index`, reaching `magnitude` (as a fraction of the part's
/// maximum displacement) by the end of the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub part: BodyPart,
    pub direction: MoveDirection,
    pub interval_index: usize,
    pub magnitude: f64,
}

/// Ground-truth recipe for one motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub commands: Vec<Command>,
    pub total_intervals: usize,
    pub frames_per_interval: usize,
    pub frame_rate: u32,
}

impl MotionScript {
    pub fn interval_seconds(&self) -> f64 {
        self.frames_per_interval as f64 / self.frame_rate as f64
    }

    pub fn total_frames(&self) -> usize {
        self.total_intervals * self.frames_per_interval
    }

    fn command_at(&self, part: BodyPart, interval: usize) -> Option<&Command> {
        self.commands
            .iter()
            .find(|c| c.part == part && c.interval_index == interval)
    }
}

/// A motion paired with its coarse text and per-part control signals.
#[derive(Debug, Clone)]
pub struct AnnotatedSample {
    pub motion: MotionSequence,
    pub coarse_text: String,
    pub control_signals: BTreeMap<BodyPart, ControlSignal>,
}

/// Script-sampling configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub total_intervals: usize,
    pub frames_per_interval: usize,
    pub frame_rate: u32,
    /// Inclusive range for the number of parts that receive commands.
    pub active_part_count_range: (usize, usize),
    /// Inclusive range for command magnitude, as a fraction of the part's
    /// maximum displacement.
    pub magnitude_range: (f64, f64),
    /// Minimum spacing between two commands on the same part, in intervals.
    /// Must leave room for a full return to rest at the skeleton's return
    /// rate, so every command starts from the rest pose.
    pub min_command_gap: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            total_intervals: 8,
            frames_per_interval: 10,
            frame_rate: 20,
            active_part_count_range: (1, 3),
            magnitude_range: (0.45, 1.0),
            min_command_gap: 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    ConfigInvalid(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
}

fn validate(config: &WorldConfig) -> Result<(), WorldError> {
    let c = config;
    if c.total_intervals == 0 {
        return Err(WorldError::ConfigInvalid("total_intervals must be >= 1".into()));
    }
    if c.frames_per_interval < 2 {
        return Err(WorldError::ConfigInvalid(
            "frames_per_interval must be >= 2".into(),
        ));
    }
    if c.frame_rate == 0 {
        return Err(WorldError::ConfigInvalid("frame_rate must be >= 1".into()));
    }
    let (lo, hi) = c.active_part_count_range;
    if lo > hi || hi > 6 {
        return Err(WorldError::ConfigInvalid(format!(
            "active_part_count_range ({lo}, {hi}) must satisfy lo <= hi <= 6"
        )));
    }
    let (mlo, mhi) = c.magnitude_range;
    if !(mlo > 0.0 && mlo <= mhi && mhi <= 1.0) {
        return Err(WorldError::ConfigInvalid(format!(
            "magnitude_range ({mlo}, {mhi}) must satisfy 0 < lo <= hi <= 1"
        )));
    }
    if c.min_command_gap == 0 {
        return Err(WorldError::ConfigInvalid("min_command_gap must be >= 1".into()));
    }
    Ok(())
}

/// Samples a random motion script: a uniform set of active parts, each given
/// one or more commands at spaced-out intervals with uniform directions and
/// magnitudes.
pub fn sample_script<R: Rng>(rng: &mut R, config: &WorldConfig) -> Result<MotionScript, WorldError> {
    validate(config)?;
    let total = config.total_intervals;
    let gap = config.min_command_gap;
    // largest command count that still fits the spacing constraint
    let max_per_part = 1 + (total.saturating_sub(1)) / gap;

    let (lo, hi) = config.active_part_count_range;
    let n_active = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let mut parts: Vec<BodyPart> = BodyPart::ALL.to_vec();
    for i in 0..n_active {
        let j = rng.random_range(i..parts.len());
        parts.swap(i, j);
    }
    let mut active: Vec<BodyPart> = parts[..n_active].to_vec();
    active.sort();

    let mut commands = Vec::new();
    for part in active {
        let want = rng.random_range(1..=max_per_part);
        let intervals = sample_spaced_intervals(rng, total, gap, want);
        for idx in intervals {
            let direction = MoveDirection::ALL[rng.random_range(0..6)];
            let (mlo, mhi) = config.magnitude_range;
            let magnitude = if mlo == mhi {
                mlo
            } else {
                rng.random_range(mlo..=mhi)
            };
            commands.push(Command {
                part,
                direction,
                interval_index: idx,
                magnitude,
            });
        }
    }
    commands.sort_by_key(|c| (c.interval_index, c.part));
    Ok(MotionScript {
        commands,
        total_intervals: total,
        frames_per_interval: config.frames_per_interval,
        frame_rate: config.frame_rate,
    })
}

/// Up to `want` interval indices with pairwise spacing >= `gap`, sampled by
/// rejection; falls back to fewer commands when a draw cannot be placed.
fn sample_spaced_intervals<R: Rng>(
    rng: &mut R,
    total: usize,
    gap: usize,
    want: usize,
) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..want {
        let mut placed = false;
        for _attempt in 0..64 {
            let cand = rng.random_range(0..total);
            if chosen.iter().all(|&c| cand.abs_diff(c) >= gap) {
                chosen.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            break;
        }
    }
    chosen.sort_unstable();
    chosen
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Renders a script to a motion. Each command smoothsteps its part from the
/// current position to `magnitude x direction` over the interval's frames;
/// afterwards the part eases back toward rest at the skeleton's return rate.
/// Uncommanded parts stay at rest exactly.
pub fn render_motion(script: &MotionScript, skeleton: &Skeleton) -> MotionSequence {
    let total = script.total_intervals;
    let fpi = script.frames_per_interval;
    let n_frames = script.total_frames();
    let mut frames = Array2::<f64>::zeros((n_frames, MOTION_DIM));

    for part in BodyPart::ALL {
        let pi = part.index();
        let max_disp = skeleton.max_displacement[pi];
        let rate = skeleton.return_rate * max_disp;

        // boundary positions: keyframes[k] is the displacement at the start
        // of interval k (and keyframes[total] at the end of the motion)
        let mut keyframes = vec![(0.0f64, 0.0f64); total + 1];
        for k in 1..=total {
            keyframes[k] = match script.command_at(part, k - 1) {
                Some(cmd) => {
                    let (dx, dy) = cmd.direction.vector();
                    let m = cmd.magnitude * max_disp;
                    (m * dx, m * dy)
                }
                None => shrink_toward_rest(keyframes[k - 1], rate),
            };
        }

        for k in 0..total {
            let (x0, y0) = keyframes[k];
            let (x1, y1) = keyframes[k + 1];
            for f in 0..fpi {
                let u = f as f64 / (fpi - 1) as f64;
                let s = smoothstep(u);
                let t = k * fpi + f;
                frames[[t, 2 * pi]] = x0 + (x1 - x0) * s;
                frames[[t, 2 * pi + 1]] = y0 + (y1 - y0) * s;
            }
        }
    }

    MotionSequence {
        frames,
        frame_rate: script.frame_rate as f64,
    }
}

fn shrink_toward_rest(v: (f64, f64), rate: f64) -> (f64, f64) {
    let norm = (v.0 * v.0 + v.1 * v.1).sqrt();
    if norm <= rate {
        (0.0, 0.0)
    } else {
        let s = (norm - rate) / norm;
        (v.0 * s, v.1 * s)
    }
}

/// Renders the motion and derives the coarse text and the six per-part
/// control signals from the script.
pub fn annotate(script: &MotionScript, skeleton: &Skeleton) -> AnnotatedSample {
    let motion = render_motion(script, skeleton);
    let actions: Vec<(BodyPart, MoveDirection)> = script
        .commands
        .iter()
        .map(|c| (c.part, c.direction))
        .collect();
    let p = coarse_text(&actions);

    let mut control_signals = BTreeMap::new();
    for part in BodyPart::ALL {
        let intervals = (0..script.total_intervals)
            .map(|k| match script.command_at(part, k) {
                Some(cmd) => {
                    IntervalContent::Described(vec![instruction_sentence(part, cmd.direction)])
                }
                None => IntervalContent::Motionless,
            })
            .collect();
        control_signals.insert(
            part,
            ControlSignal {
                body_part: part,
                intervals,
                interval_seconds: script.interval_seconds(),
            },
        );
    }

    AnnotatedSample {
        motion,
        coarse_text: p,
        control_signals,
    }
}

/// Per-sample seed derivation so the seed space can be sharded.
pub fn sample_seed(dataset_seed: u64, index: u64) -> u64 {
    // splitmix64 over the combined value
    let mut z = dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn idle_range_gives_empty_script() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = WorldConfig {
            active_part_count_range: (0, 0),
            ..WorldConfig::default()
        };
        let script = sample_script(&mut rng, &cfg).unwrap();
        assert!(script.commands.is_empty());
    }

    #[test]
    fn same_seed_same_script() {
        let cfg = WorldConfig::default();
        let a = sample_script(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        let b = sample_script(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scripts_respect_spacing_invariant() {
        let cfg = WorldConfig::default();
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let script = sample_script(&mut rng, &cfg).unwrap();
            for part in BodyPart::ALL {
                let mut idx: Vec<usize> = script
                    .commands
                    .iter()
                    .filter(|c| c.part == part)
                    .map(|c| c.interval_index)
                    .collect();
                idx.sort_unstable();
                for w in idx.windows(2) {
                    assert!(w[1] - w[0] >= cfg.min_command_gap, "seed {seed}: {idx:?}");
                }
                // spacing implies the at-most-one-command-per-interval invariant
                idx.dedup();
                assert_eq!(
                    idx.len(),
                    script.commands.iter().filter(|c| c.part == part).count()
                );
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = WorldConfig {
            frames_per_interval: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(
            sample_script(&mut rng, &cfg),
            Err(WorldError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn empty_script_renders_zeros() {
        let script = MotionScript {
            commands: vec![],
            total_intervals: 8,
            frames_per_interval: 10,
            frame_rate: 20,
        };
        let motion = render_motion(&script, &Skeleton::default());
        assert_eq!(motion.frames.dim(), (80, MOTION_DIM));
        assert!(motion.frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_command_moves_only_its_channel() {
        let script = MotionScript {
            commands: vec![Command {
                part: BodyPart::LeftArm,
                direction: MoveDirection::Up,
                interval_index: 0,
                magnitude: 1.0,
            }],
            total_intervals: 8,
            frames_per_interval: 10,
            frame_rate: 20,
        };
        let motion = render_motion(&script, &Skeleton::default());
        let y_col = BodyPart::LeftArm.index() * 2 + 1;
        let max_in_interval0 = (0..10)
            .map(|t| motion.frames[[t, y_col]])
            .fold(f64::MIN, f64::max);
        assert!((max_in_interval0 - 1.0).abs() < 1e-12);
        // all channels other than the commanded vertical one stay zero,
        // except the commanded channel's own return tail
        for t in 0..motion.len() {
            for c in 0..MOTION_DIM {
                if c != y_col {
                    assert_eq!(motion.frames[[t, c]], 0.0);
                }
            }
        }
    }

    #[test]
    fn net_displacement_aligns_with_command() {
        let skeleton = Skeleton::default();
        let cfg = WorldConfig::default();
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let script = sample_script(&mut rng, &cfg).unwrap();
            let motion = render_motion(&script, &skeleton);
            let fpi = script.frames_per_interval;
            for cmd in &script.commands {
                let k = cmd.interval_index;
                let start = motion.part_at(cmd.part, k * fpi);
                let end = motion.part_at(cmd.part, (k + 1) * fpi - 1);
                let net = (end.0 - start.0, end.1 - start.1);
                let dir = cmd.direction.vector();
                let dot = net.0 * dir.0 + net.1 * dir.1;
                assert!(dot > 0.0, "seed {seed} cmd {cmd:?} net {net:?}");
            }
        }
    }

    #[test]
    fn motions_stay_bounded_and_start_at_rest() {
        let skeleton = Skeleton::default();
        let cfg = WorldConfig::default();
        for seed in 0..500u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let script = sample_script(&mut rng, &cfg).unwrap();
            let motion = render_motion(&script, &skeleton);
            assert!(motion.frames.iter().all(|v| v.is_finite()));
            for c in 0..MOTION_DIM {
                assert_eq!(motion.frames[[0, c]], 0.0);
            }
            for part in BodyPart::ALL {
                let cap = skeleton.max_displacement[part.index()] + 1e-12;
                for t in 0..motion.len() {
                    let (x, y) = motion.part_at(part, t);
                    assert!((x * x + y * y).sqrt() <= cap);
                }
            }
        }
    }

    #[test]
    fn annotate_empty_script() {
        let script = MotionScript {
            commands: vec![],
            total_intervals: 8,
            frames_per_interval: 10,
            frame_rate: 20,
        };
        let sample = annotate(&script, &Skeleton::default());
        assert_eq!(sample.coarse_text, "A person stands still.");
        for sig in sample.control_signals.values() {
            assert!(sig.intervals.iter().all(|iv| iv.is_motionless()));
        }
    }

    #[test]
    fn annotate_counts_described_intervals() {
        let script = MotionScript {
            commands: vec![Command {
                part: BodyPart::RightLeg,
                direction: MoveDirection::Forward,
                interval_index: 3,
                magnitude: 0.8,
            }],
            total_intervals: 8,
            frames_per_interval: 10,
            frame_rate: 20,
        };
        let sample = annotate(&script, &Skeleton::default());
        let described: usize = sample
            .control_signals
            .values()
            .map(|s| s.intervals.iter().filter(|iv| iv.is_described()).count())
            .sum();
        assert_eq!(described, 1);
        assert_eq!(
            sample.control_signals[&BodyPart::RightLeg].intervals[3],
            IntervalContent::Described(vec!["Move your right leg forward.".to_string()])
        );
    }

    #[test]
    fn annotated_signal_text_reparses() {
        let cfg = WorldConfig::default();
        let skeleton = Skeleton::default();
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let script = sample_script(&mut rng, &cfg).unwrap();
            let sample = annotate(&script, &skeleton);
            for (part, sig) in &sample.control_signals {
                let text = crate::grammar::serialize(sig);
                let back = crate::grammar::parse(&text, *part, sig.interval_seconds).unwrap();
                assert_eq!(&back, sig);
            }
        }
    }
}
