//! The fine-grained textual control-signal grammar.
//!
//! A control signal describes one body part over a sequence of equal-length
//! temporal intervals. In text form the intervals are joined by the literal
//! token `<SEP>`; an interval is either prose (one or more sentences), the
//! token `<Motionless>` (the part does not move), or the token `<Mask>`
//! (the interval is unspecified).

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Interval separator token.
pub const SEP: &str = "<SEP>";
/// Token marking an interval in which the body part does not move.
pub const MOTIONLESS: &str = "<Motionless>";
/// Token marking an interval whose content is unspecified.
pub const MASK: &str = "<Mask>";

/// The six controllable body parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Head,
    Body,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl BodyPart {
    pub const ALL: [BodyPart; 6] = [
        BodyPart::Head,
        BodyPart::Body,
        BodyPart::LeftArm,
        BodyPart::RightArm,
        BodyPart::LeftLeg,
        BodyPart::RightLeg,
    ];

    /// Zero-based index into the canonical part ordering.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|p| *p == self).unwrap()
    }

    /// Canonical lowercase phrase used in instruction sentences.
    pub fn phrase(self) -> &'static str {
        match self {
            BodyPart::Head => "head",
            BodyPart::Body => "body",
            BodyPart::LeftArm => "left arm",
            BodyPart::RightArm => "right arm",
            BodyPart::LeftLeg => "left leg",
            BodyPart::RightLeg => "right leg",
        }
    }

    /// Snake-case identifier used in JSON files and CLI flags.
    pub fn snake(self) -> &'static str {
        match self {
            BodyPart::Head => "head",
            BodyPart::Body => "body",
            BodyPart::LeftArm => "left_arm",
            BodyPart::RightArm => "right_arm",
            BodyPart::LeftLeg => "left_leg",
            BodyPart::RightLeg => "right_leg",
        }
    }

    pub fn from_snake(s: &str) -> Option<BodyPart> {
        Self::ALL.into_iter().find(|p| p.snake() == s)
    }

    /// Description phrases that refer to this part. Plural phrases are shared
    /// between the left/right variants of arms and legs.
    pub fn aliases(self) -> &'static [&'static str] {
        match self {
            BodyPart::Head => &["head"],
            BodyPart::Body => &["body", "torso", "waist", "upper back", "lower back"],
            BodyPart::LeftArm => &[
                "left hand",
                "left arm",
                "left elbow",
                "left shoulder",
                "left forearm",
                "hands",
                "arms",
                "elbows",
                "shoulders",
                "forearms",
            ],
            BodyPart::RightArm => &[
                "right hand",
                "right arm",
                "right elbow",
                "right shoulder",
                "right forearm",
                "hands",
                "arms",
                "elbows",
                "shoulders",
                "forearms",
            ],
            BodyPart::LeftLeg => &[
                "left leg",
                "left foot",
                "left knee",
                "left heel",
                "legs",
                "feet",
                "knees",
                "heels",
            ],
            BodyPart::RightLeg => &[
                "right leg",
                "right foot",
                "right knee",
                "right heel",
                "legs",
                "feet",
                "knees",
                "heels",
            ],
        }
    }
}

impl fmt::Display for BodyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.snake())
    }
}

/// All body parts whose alias table contains `phrase` (lowercase-normalized).
/// Plural phrases such as "hands" resolve to both sides; unknown phrases
/// resolve to the empty set.
pub fn resolve_body_parts(phrase: &str) -> BTreeSet<BodyPart> {
    let phrase = phrase.trim();
    BodyPart::ALL
        .into_iter()
        .filter(|p| p.aliases().contains(&phrase))
        .collect()
}

/// Content of one temporal interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntervalContent {
    Motionless,
    Masked,
    /// One or more instruction sentences, in order.
    Described(Vec<String>),
}

impl IntervalContent {
    pub fn is_described(&self) -> bool {
        matches!(self, IntervalContent::Described(_))
    }

    pub fn is_motionless(&self) -> bool {
        matches!(self, IntervalContent::Motionless)
    }

    pub fn is_masked(&self) -> bool {
        matches!(self, IntervalContent::Masked)
    }
}

/// One body part's instruction sequence over equal-length intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub body_part: BodyPart,
    pub intervals: Vec<IntervalContent>,
    /// Duration of each interval in seconds.
    pub interval_seconds: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("segment {0} is empty")]
    EmptySegment(usize),
    #[error("segment {0} mixes a special token with prose")]
    MixedTokens(usize),
    #[error("interval_seconds must be positive, got {0}")]
    InvalidIntervalSeconds(String),
    #[error("signal has no intervals")]
    NoIntervals,
}

/// Splits `text` into sentences on terminal periods. A '.' is terminal only
/// when followed by whitespace or end of string. The period stays attached
/// to its sentence.
fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..chars.len() {
        if chars[i] == '.' {
            let terminal = i + 1 == chars.len() || chars[i + 1].is_whitespace();
            if terminal {
                let s: String = chars[start..=i].iter().collect();
                let s = s.trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                start = i + 1;
            }
        }
    }
    if start < chars.len() {
        let s: String = chars[start..].iter().collect();
        let s = s.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    }
    out
}

/// Parses canonical control-signal text into a [`ControlSignal`].
///
/// The text is split on the literal `<SEP>` token with surrounding whitespace
/// trimmed. A segment equal to `<Motionless>` or `<Mask>` becomes the
/// corresponding special interval; anything else is split into sentences.
pub fn parse(
    text: &str,
    body_part: BodyPart,
    interval_seconds: f64,
) -> Result<ControlSignal, GrammarError> {
    if !(interval_seconds > 0.0) {
        return Err(GrammarError::InvalidIntervalSeconds(format!(
            "{interval_seconds}"
        )));
    }
    let mut intervals = Vec::new();
    for (idx, raw) in text.split(SEP).enumerate() {
        let seg = raw.trim();
        if seg.is_empty() {
            return Err(GrammarError::EmptySegment(idx));
        }
        let content = match seg {
            MOTIONLESS => IntervalContent::Motionless,
            MASK => IntervalContent::Masked,
            _ => {
                if seg.contains(MOTIONLESS) || seg.contains(MASK) {
                    return Err(GrammarError::MixedTokens(idx));
                }
                let sentences = split_sentences(seg);
                if sentences.is_empty() {
                    return Err(GrammarError::EmptySegment(idx));
                }
                IntervalContent::Described(sentences)
            }
        };
        intervals.push(content);
    }
    Ok(ControlSignal {
        body_part,
        intervals,
        interval_seconds,
    })
}

/// Serializes a signal to canonical text: intervals joined by `" <SEP> "`,
/// sentences within an interval joined by single spaces.
pub fn serialize(signal: &ControlSignal) -> String {
    signal
        .intervals
        .iter()
        .map(|iv| match iv {
            IntervalContent::Motionless => MOTIONLESS.to_string(),
            IntervalContent::Masked => MASK.to_string(),
            IntervalContent::Described(sentences) => sentences.join(" "),
        })
        .collect::<Vec<_>>()
        .join(&format!(" {SEP} "))
}

/// Independently replaces each interval with `<Mask>` at probability
/// `mask_prob`. Count, order, and body part are unchanged.
pub fn mask_intervals<R: Rng>(
    signal: &ControlSignal,
    mask_prob: f64,
    rng: &mut R,
) -> ControlSignal {
    let intervals = signal
        .intervals
        .iter()
        .map(|iv| {
            if rng.random::<f64>() < mask_prob {
                IntervalContent::Masked
            } else {
                iv.clone()
            }
        })
        .collect();
    ControlSignal {
        body_part: signal.body_part,
        intervals,
        interval_seconds: signal.interval_seconds,
    }
}

/// Result of [`apply_density`]. `no_described` flags the degenerate case of a
/// signal without any described interval, which is returned unchanged.
#[derive(Debug, Clone)]
pub struct DensityResult {
    pub signal: ControlSignal,
    pub no_described: bool,
}

/// Keeps exactly `round(keep_fraction * n_described)` uniformly chosen
/// described intervals (round half up, minimum one when any exist) and masks
/// the rest. Motionless intervals are untouched.
pub fn apply_density<R: Rng>(
    signal: &ControlSignal,
    keep_fraction: f64,
    rng: &mut R,
) -> DensityResult {
    let described_idx: Vec<usize> = signal
        .intervals
        .iter()
        .enumerate()
        .filter(|(_, iv)| iv.is_described())
        .map(|(i, _)| i)
        .collect();
    if described_idx.is_empty() {
        return DensityResult {
            signal: signal.clone(),
            no_described: true,
        };
    }
    let n = described_idx.len();
    // round half up, keep at least one
    let keep = ((keep_fraction * n as f64 + 0.5).floor() as usize).clamp(1, n);
    // partial Fisher-Yates for a uniform subset
    let mut pool = described_idx;
    for i in 0..keep {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let kept: BTreeSet<usize> = pool[..keep].iter().copied().collect();
    let intervals = signal
        .intervals
        .iter()
        .enumerate()
        .map(|(i, iv)| {
            if iv.is_described() && !kept.contains(&i) {
                IntervalContent::Masked
            } else {
                iv.clone()
            }
        })
        .collect();
    DensityResult {
        signal: ControlSignal {
            body_part: signal.body_part,
            intervals,
            interval_seconds: signal.interval_seconds,
        },
        no_described: false,
    }
}

// --- JSON representation -----------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum IntervalJson {
    Described { sentences: Vec<String> },
    Motionless,
    Masked,
}

#[derive(Serialize, Deserialize)]
struct SignalJson {
    body_part: BodyPart,
    interval_seconds: f64,
    intervals: Vec<IntervalJson>,
}

impl Serialize for ControlSignal {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let intervals = self
            .intervals
            .iter()
            .map(|iv| match iv {
                IntervalContent::Described(s) => IntervalJson::Described {
                    sentences: s.clone(),
                },
                IntervalContent::Motionless => IntervalJson::Motionless,
                IntervalContent::Masked => IntervalJson::Masked,
            })
            .collect();
        SignalJson {
            body_part: self.body_part,
            interval_seconds: self.interval_seconds,
            intervals,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ControlSignal {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = SignalJson::deserialize(deserializer)?;
        let intervals = raw
            .intervals
            .into_iter()
            .map(|iv| match iv {
                IntervalJson::Described { sentences } => IntervalContent::Described(sentences),
                IntervalJson::Motionless => IntervalContent::Motionless,
                IntervalJson::Masked => IntervalContent::Masked,
            })
            .collect();
        Ok(ControlSignal {
            body_part: raw.body_part,
            intervals,
            interval_seconds: raw.interval_seconds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq2_text() -> String {
        format!(
            "Move your left hand to your left thigh. {SEP} {MOTIONLESS} {SEP} {MOTIONLESS} \
             {SEP} {MOTIONLESS} {SEP} {MOTIONLESS} {SEP} {MOTIONLESS} {SEP} \
             Move your left hand to your left thigh. {SEP} {MOTIONLESS}"
        )
    }

    #[test]
    fn parse_eight_interval_example() {
        let sig = parse(&seq2_text(), BodyPart::LeftArm, 0.5).unwrap();
        assert_eq!(sig.intervals.len(), 8);
        for (i, iv) in sig.intervals.iter().enumerate() {
            if i == 0 || i == 6 {
                assert_eq!(
                    iv,
                    &IntervalContent::Described(vec![
                        "Move your left hand to your left thigh.".to_string()
                    ])
                );
            } else {
                assert_eq!(iv, &IntervalContent::Motionless);
            }
        }
        assert_eq!(serialize(&sig), seq2_text());
    }

    #[test]
    fn parse_single_motionless() {
        let sig = parse(MOTIONLESS, BodyPart::Head, 0.5).unwrap();
        assert_eq!(sig.intervals, vec![IntervalContent::Motionless]);
        assert_eq!(serialize(&sig), MOTIONLESS);
    }

    #[test]
    fn parse_splits_multi_sentence_segments() {
        let sig = parse(
            "Straighten your left leg. Put your left foot on the floor.",
            BodyPart::LeftLeg,
            0.5,
        )
        .unwrap();
        assert_eq!(
            sig.intervals,
            vec![IntervalContent::Described(vec![
                "Straighten your left leg.".to_string(),
                "Put your left foot on the floor.".to_string(),
            ])]
        );
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse("", BodyPart::Head, 0.5),
            Err(GrammarError::EmptySegment(0))
        );
        assert_eq!(
            parse(&format!("a. {SEP}  "), BodyPart::Head, 0.5),
            Err(GrammarError::EmptySegment(1))
        );
        assert_eq!(
            parse(
                &format!("{MOTIONLESS} and move your head up."),
                BodyPart::Head,
                0.5
            ),
            Err(GrammarError::MixedTokens(0))
        );
        assert!(matches!(
            parse("x.", BodyPart::Head, 0.0),
            Err(GrammarError::InvalidIntervalSeconds(_))
        ));
    }

    /// Random signal with sentences drawn from a small canonical pool.
    pub(crate) fn random_signal(rng: &mut ChaCha8Rng) -> ControlSignal {
        let pool = [
            "Move your left arm up.",
            "Move your right leg forward.",
            "Lower your head.",
            "Shift your body to the left.",
            "Pull your right arm back.",
        ];
        let n = rng.random_range(1..=12);
        let intervals = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => IntervalContent::Motionless,
                1 => IntervalContent::Masked,
                _ => {
                    let k = rng.random_range(1..=3);
                    IntervalContent::Described(
                        (0..k)
                            .map(|_| pool[rng.random_range(0..pool.len())].to_string())
                            .collect(),
                    )
                }
            })
            .collect();
        ControlSignal {
            body_part: BodyPart::ALL[rng.random_range(0..6)],
            intervals,
            interval_seconds: 0.5,
        }
    }

    #[test]
    fn round_trip_on_generated_signals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let sig = random_signal(&mut rng);
            let text = serialize(&sig);
            let back = parse(&text, sig.body_part, sig.interval_seconds).unwrap();
            assert_eq!(back, sig);
            assert_eq!(serialize(&back), text);
        }
    }

    #[test]
    fn mask_zero_and_one() {
        let sig = parse(&seq2_text(), BodyPart::LeftArm, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let untouched = mask_intervals(&sig, 0.0, &mut rng);
        assert_eq!(untouched, sig);
        let all = mask_intervals(&sig, 1.0, &mut rng);
        assert!(all.intervals.iter().all(|iv| iv.is_masked()));
        assert_eq!(all.intervals.len(), sig.intervals.len());
    }

    #[test]
    fn mask_rate_matches_probability() {
        let sig = ControlSignal {
            body_part: BodyPart::Head,
            intervals: vec![IntervalContent::Described(vec!["Lower your head.".into()]); 10],
            interval_seconds: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut masked = 0usize;
        let trials = 10_000;
        for _ in 0..trials {
            let m = mask_intervals(&sig, 0.5, &mut rng);
            masked += m.intervals.iter().filter(|iv| iv.is_masked()).count();
        }
        let frac = masked as f64 / (trials * 10) as f64;
        assert!((0.48..=0.52).contains(&frac), "observed rate {frac}");
    }

    #[test]
    fn density_counts() {
        let make = |n_desc: usize| ControlSignal {
            body_part: BodyPart::Body,
            intervals: (0..n_desc)
                .map(|_| IntervalContent::Described(vec!["Move your body forward.".into()]))
                .chain(std::iter::once(IntervalContent::Motionless))
                .collect(),
            interval_seconds: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        let full = apply_density(&make(8), 1.0, &mut rng);
        assert!(!full.no_described);
        assert_eq!(full.signal, make(8));

        let quarter = apply_density(&make(8), 0.25, &mut rng);
        let kept = quarter
            .signal
            .intervals
            .iter()
            .filter(|iv| iv.is_described())
            .count();
        assert_eq!(kept, 2);

        // round(0.5) = 1 under round-half-up
        let two = apply_density(&make(2), 0.25, &mut rng);
        let kept = two
            .signal
            .intervals
            .iter()
            .filter(|iv| iv.is_described())
            .count();
        assert_eq!(kept, 1);

        let none = ControlSignal {
            body_part: BodyPart::Body,
            intervals: vec![IntervalContent::Motionless; 4],
            interval_seconds: 0.5,
        };
        let res = apply_density(&none, 0.25, &mut rng);
        assert!(res.no_described);
        assert_eq!(res.signal, none);
    }

    #[test]
    fn density_never_touches_motionless() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let sig = random_signal(&mut rng);
            let out = apply_density(&sig, 0.5, &mut rng).signal;
            assert_eq!(out.intervals.len(), sig.intervals.len());
            for (a, b) in sig.intervals.iter().zip(&out.intervals) {
                match a {
                    IntervalContent::Motionless => assert!(b.is_motionless()),
                    IntervalContent::Masked => assert!(b.is_masked()),
                    IntervalContent::Described(_) => {
                        assert!(b == a || b.is_masked());
                    }
                }
            }
        }
    }

    #[test]
    fn alias_resolution() {
        assert_eq!(
            resolve_body_parts("left elbow").into_iter().collect::<Vec<_>>(),
            vec![BodyPart::LeftArm]
        );
        assert_eq!(
            resolve_body_parts("hands").into_iter().collect::<Vec<_>>(),
            vec![BodyPart::LeftArm, BodyPart::RightArm]
        );
        assert_eq!(
            resolve_body_parts("heels").into_iter().collect::<Vec<_>>(),
            vec![BodyPart::LeftLeg, BodyPart::RightLeg]
        );
        assert!(resolve_body_parts("antenna").is_empty());
        assert_eq!(
            resolve_body_parts("torso").into_iter().collect::<Vec<_>>(),
            vec![BodyPart::Body]
        );
    }

    #[test]
    fn single_sided_aliases_are_disjoint() {
        for part in BodyPart::ALL {
            for alias in part.aliases() {
                let owners = resolve_body_parts(alias);
                assert!(!owners.is_empty());
                if owners.len() > 1 {
                    // only the shared plural phrases map to two parts
                    assert!(
                        ["hands", "arms", "elbows", "shoulders", "forearms", "legs", "feet",
                         "knees", "heels"]
                        .contains(alias),
                        "{alias} resolved to {owners:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let sig = parse(&seq2_text(), BodyPart::LeftArm, 0.5).unwrap();
        let js = serde_json::to_string(&sig).unwrap();
        assert!(js.contains("\"body_part\":\"left_arm\""));
        assert!(js.contains("\"kind\":\"described\""));
        let back: ControlSignal = serde_json::from_str(&js).unwrap();
        assert_eq!(back, sig);
    }
}
