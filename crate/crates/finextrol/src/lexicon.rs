//! Direction and instruction-sentence lexicon shared by the synthetic world,
//! the paraphraser, and the adherence scorer.
//!
//! Instruction sentences follow a closed template set: "Move your {part}
//! {direction}." plus one fixed paraphrase per direction. Re-annotating any
//! sentence from the vocabulary (original or paraphrased) recovers its
//! (part, direction) pair exactly.

use serde::{Deserialize, Serialize};

use crate::grammar::BodyPart;

/// Movement direction of an instruction. Forward/back and left/right both
/// live on the horizontal axis but use distinct template wording, giving the
/// text encoder six direction words to learn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveDirection {
    Up,
    Down,
    Left,
    Right,
    Forward,
    Back,
}

impl MoveDirection {
    pub const ALL: [MoveDirection; 6] = [
        MoveDirection::Up,
        MoveDirection::Down,
        MoveDirection::Left,
        MoveDirection::Right,
        MoveDirection::Forward,
        MoveDirection::Back,
    ];

    /// Unit 2D displacement (x, y) for this direction.
    pub fn vector(self) -> (f64, f64) {
        match self {
            MoveDirection::Up => (0.0, 1.0),
            MoveDirection::Down => (0.0, -1.0),
            MoveDirection::Left => (-1.0, 0.0),
            MoveDirection::Right => (1.0, 0.0),
            MoveDirection::Forward => (1.0, 0.0),
            MoveDirection::Back => (-1.0, 0.0),
        }
    }

    /// Adverbial phrase completing "Move your {part} ...".
    pub fn phrase(self) -> &'static str {
        match self {
            MoveDirection::Up => "up",
            MoveDirection::Down => "down",
            MoveDirection::Left => "to the left",
            MoveDirection::Right => "to the right",
            MoveDirection::Forward => "forward",
            MoveDirection::Back => "back",
        }
    }
}

/// The canonical instruction sentence for a (part, direction) pair.
pub fn instruction_sentence(part: BodyPart, direction: MoveDirection) -> String {
    format!("Move your {} {}.", part.phrase(), direction.phrase())
}

/// The fixed paraphrase of the canonical instruction sentence. Each direction
/// keeps its own verb so the rewrite stays injective over the vocabulary.
pub fn paraphrased_sentence(part: BodyPart, direction: MoveDirection) -> String {
    match direction {
        MoveDirection::Up => format!("Raise your {}.", part.phrase()),
        MoveDirection::Down => format!("Lower your {}.", part.phrase()),
        MoveDirection::Left => format!("Shift your {} to the left.", part.phrase()),
        MoveDirection::Right => format!("Shift your {} to the right.", part.phrase()),
        MoveDirection::Forward => format!("Bring your {} forward.", part.phrase()),
        MoveDirection::Back => format!("Pull your {} back.", part.phrase()),
    }
}

fn words_of(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

/// Direction of an instruction sentence, from either the direction adverb or
/// the paraphrase verb. "left"/"right" alone are not direction cues because
/// they also occur in part names; the lateral directions require the full
/// "to the left"/"to the right" phrase.
pub fn direction_of_sentence(sentence: &str) -> Option<MoveDirection> {
    let lower = sentence.to_lowercase();
    if lower.contains("to the left") {
        return Some(MoveDirection::Left);
    }
    if lower.contains("to the right") {
        return Some(MoveDirection::Right);
    }
    let words = words_of(&lower);
    for w in &words {
        match w.as_str() {
            "up" | "raise" => return Some(MoveDirection::Up),
            "down" | "lower" => return Some(MoveDirection::Down),
            "forward" | "bring" => return Some(MoveDirection::Forward),
            "back" | "pull" => return Some(MoveDirection::Back),
            _ => {}
        }
    }
    None
}

/// Body part named in an instruction sentence, via the alias table. Longer
/// aliases are matched first so "left arm" wins over any would-be substring.
pub fn part_of_sentence(sentence: &str) -> Option<BodyPart> {
    let lower = format!(" {} ", words_of(sentence).join(" "));
    let mut best: Option<(usize, BodyPart)> = None;
    for part in BodyPart::ALL {
        for alias in part.aliases() {
            let needle = format!(" {alias} ");
            if lower.contains(&needle) {
                let len = alias.len();
                if best.map(|(l, _)| len > l).unwrap_or(true) {
                    best = Some((len, part));
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

/// (part, direction) annotation of an instruction sentence, when both are
/// recognizable.
pub fn annotate_sentence(sentence: &str) -> Option<(BodyPart, MoveDirection)> {
    Some((part_of_sentence(sentence)?, direction_of_sentence(sentence)?))
}

/// Coarse whole-motion description from an ordered list of actions.
pub fn coarse_text(actions: &[(BodyPart, MoveDirection)]) -> String {
    if actions.is_empty() {
        return "A person stands still.".to_string();
    }
    let items: Vec<String> = actions
        .iter()
        .map(|(p, d)| format!("the {} {}", p.phrase(), d.phrase()))
        .collect();
    let joined = match items.len() {
        1 => items[0].clone(),
        2 => format!("{} and {}", items[0], items[1]),
        _ => {
            let head = items[..items.len() - 1].join(", ");
            format!("{} and {}", head, items[items.len() - 1])
        }
    };
    format!("A person moves {joined}.")
}
