//! Level-specific data augmentation and contrastive pair construction.
//!
//! Three granularities of text are augmented: single instruction sentences
//! (deterministic paraphrase), snippets (per-sentence paraphrase at 0.5
//! probability followed by a uniform shuffle), and whole control-signal
//! sequences (snippet augmentation applied per interval with temporal order
//! preserved).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{self, ControlSignal, IntervalContent};
use crate::lexicon::MoveDirection;
use crate::world::AnnotatedSample;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("no rewrite rule applies to {0:?}")]
    NoRuleApplies(String),
    #[error("sentence not present in corpus: {0:?}")]
    UnknownSentence(String),
    #[error("interval is not described")]
    NotDescribed,
    #[error("need {want} sources but only {have} available")]
    InsufficientData { have: usize, want: usize },
    #[error("paraphrase equals original for {0:?}")]
    DegenerateParaphrase(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed corpus line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
}

/// Deterministic sentence rewriter over the closed instruction vocabulary.
/// Every rule maps "Move your {part} {direction}." to a synonymous phrasing
/// with a direction-specific verb.
#[derive(Debug, Clone, Default)]
pub struct RewriteTable;

impl RewriteTable {
    /// Paraphrases one instruction sentence, preserving its (part, direction)
    /// reading.
    pub fn rewrite(&self, sentence: &str) -> Result<String, AugmentError> {
        let s = sentence.trim();
        let Some(rest) = s.strip_prefix("Move your ") else {
            return Err(AugmentError::NoRuleApplies(sentence.to_string()));
        };
        for dir in MoveDirection::ALL {
            let suffix = format!(" {}.", dir.phrase());
            if let Some(part_phrase) = rest.strip_suffix(&suffix) {
                if part_phrase.is_empty() {
                    break;
                }
                let out = match dir {
                    MoveDirection::Up => format!("Raise your {part_phrase}."),
                    MoveDirection::Down => format!("Lower your {part_phrase}."),
                    MoveDirection::Left => format!("Shift your {part_phrase} to the left."),
                    MoveDirection::Right => format!("Shift your {part_phrase} to the right."),
                    MoveDirection::Forward => format!("Bring your {part_phrase} forward."),
                    MoveDirection::Back => format!("Pull your {part_phrase} back."),
                };
                return Ok(out);
            }
        }
        Err(AugmentError::NoRuleApplies(sentence.to_string()))
    }
}

/// Paraphrases a sentence with the rewrite table.
pub fn paraphrase_sentence(sentence: &str, rules: &RewriteTable) -> Result<String, AugmentError> {
    rules.rewrite(sentence)
}

/// Aligned lists of unique original sentences and their paraphrases.
#[derive(Debug, Clone)]
pub struct SentenceCorpus {
    originals: Vec<String>,
    paraphrases: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl SentenceCorpus {
    /// Builds a corpus by paraphrasing each unique sentence with the rewrite
    /// table. Duplicates are dropped, keeping first-appearance order.
    pub fn build<I: IntoIterator<Item = String>>(
        sentences: I,
        rules: &RewriteTable,
    ) -> Result<SentenceCorpus, AugmentError> {
        let mut corpus = SentenceCorpus {
            originals: Vec::new(),
            paraphrases: Vec::new(),
            index: BTreeMap::new(),
        };
        for s in sentences {
            if corpus.index.contains_key(&s) {
                continue;
            }
            let p = rules.rewrite(&s)?;
            corpus.push_pair(s, p)?;
        }
        Ok(corpus)
    }

    /// Builds a corpus from explicit (original, paraphrase) pairs.
    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(
        pairs: I,
    ) -> Result<SentenceCorpus, AugmentError> {
        let mut corpus = SentenceCorpus {
            originals: Vec::new(),
            paraphrases: Vec::new(),
            index: BTreeMap::new(),
        };
        for (o, p) in pairs {
            if corpus.index.contains_key(&o) {
                continue;
            }
            corpus.push_pair(o, p)?;
        }
        Ok(corpus)
    }

    fn push_pair(&mut self, original: String, paraphrase: String) -> Result<(), AugmentError> {
        if original == paraphrase {
            return Err(AugmentError::DegenerateParaphrase(original));
        }
        self.index.insert(original.clone(), self.originals.len());
        self.originals.push(original);
        self.paraphrases.push(paraphrase);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn original(&self, i: usize) -> &str {
        &self.originals[i]
    }

    pub fn paraphrase(&self, i: usize) -> &str {
        &self.paraphrases[i]
    }

    pub fn paraphrase_of(&self, sentence: &str) -> Option<&str> {
        self.index.get(sentence).map(|&i| self.paraphrases[i].as_str())
    }

    /// Writes the corpus as JSONL with one (original, paraphrase) pair per
    /// line.
    pub fn save(&self, path: &Path) -> Result<(), AugmentError> {
        #[derive(Serialize)]
        struct Line<'a> {
            original: &'a str,
            paraphrase: &'a str,
        }
        let mut out = BufWriter::new(File::create(path)?);
        for i in 0..self.len() {
            let line = Line {
                original: &self.originals[i],
                paraphrase: &self.paraphrases[i],
            };
            serde_json::to_writer(&mut out, &line)
                .map_err(|e| AugmentError::Io(std::io::Error::other(e)))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SentenceCorpus, AugmentError> {
        #[derive(Deserialize)]
        struct Line {
            original: String,
            paraphrase: String,
        }
        let reader = BufReader::new(File::open(path)?);
        let mut pairs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| AugmentError::MalformedRecord {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            pairs.push((parsed.original, parsed.paraphrase));
        }
        SentenceCorpus::from_pairs(pairs)
    }
}

fn shuffle<R: Rng, T>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Core of the snippet augmentation: each sentence is independently replaced
/// by its paraphrase at probability 0.5, then the list is uniformly shuffled.
pub fn augment_sentences<R: Rng>(
    sentences: &[String],
    corpus: &SentenceCorpus,
    rng: &mut R,
) -> Result<Vec<String>, AugmentError> {
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        let Some(paraphrase) = corpus.paraphrase_of(s) else {
            return Err(AugmentError::UnknownSentence(s.clone()));
        };
        if rng.random::<f64>() < 0.5 {
            out.push(paraphrase.to_string());
        } else {
            out.push(s.clone());
        }
    }
    shuffle(&mut out, rng);
    Ok(out)
}

/// Augments one described interval. Sentence count is preserved.
pub fn snippet_augment<R: Rng>(
    snippet: &IntervalContent,
    corpus: &SentenceCorpus,
    rng: &mut R,
) -> Result<IntervalContent, AugmentError> {
    let IntervalContent::Described(sentences) = snippet else {
        return Err(AugmentError::NotDescribed);
    };
    Ok(IntervalContent::Described(augment_sentences(
        sentences, corpus, rng,
    )?))
}

/// Augments a whole control signal: every described interval goes through
/// the snippet augmentation while motionless and masked intervals are copied
/// verbatim, preserving temporal order.
pub fn sequence_augment<R: Rng>(
    signal: &ControlSignal,
    corpus: &SentenceCorpus,
    rng: &mut R,
) -> Result<ControlSignal, AugmentError> {
    let mut intervals = Vec::with_capacity(signal.intervals.len());
    for iv in &signal.intervals {
        match iv {
            IntervalContent::Described(_) => intervals.push(snippet_augment(iv, corpus, rng)?),
            other => intervals.push(other.clone()),
        }
    }
    Ok(ControlSignal {
        body_part: signal.body_part,
        intervals,
        interval_seconds: signal.interval_seconds,
    })
}

/// Contrastive granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Sentence,
    Snippet,
    Sequence,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Sentence => "sentence",
            Level::Snippet => "snippet",
            Level::Sequence => "sequence",
        }
    }

    pub fn from_name(s: &str) -> Option<Level> {
        match s {
            "sentence" => Some(Level::Sentence),
            "snippet" => Some(Level::Snippet),
            "sequence" => Some(Level::Sequence),
            _ => None,
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A positive pair of texts derived from the same source item. Pairs sharing
/// `source_id` are positives; everything else in a batch is a negative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub level: Level,
    #[serde(rename = "a")]
    pub text_a: String,
    #[serde(rename = "b")]
    pub text_b: String,
    pub source_id: u64,
}

/// Source data for pair construction at one level.
pub enum PairSource<'a> {
    Sentences(&'a SentenceCorpus),
    Snippets {
        snippets: &'a [Vec<String>],
        corpus: &'a SentenceCorpus,
    },
    Sequences {
        signals: &'a [ControlSignal],
        corpus: &'a SentenceCorpus,
    },
}

impl PairSource<'_> {
    pub fn len(&self) -> usize {
        match self {
            PairSource::Sentences(c) => c.len(),
            PairSource::Snippets { snippets, .. } => snippets.len(),
            PairSource::Sequences { signals, .. } => signals.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn level(&self) -> Level {
        match self {
            PairSource::Sentences(_) => Level::Sentence,
            PairSource::Snippets { .. } => Level::Snippet,
            PairSource::Sequences { .. } => Level::Sequence,
        }
    }
}

/// Builds `n_pairs` positive pairs from sources sampled without replacement.
/// Sentence-level pairs are (original, paraphrase); snippet- and
/// sequence-level pairs are two independent augmentations of the same source.
pub fn build_pairs<R: Rng>(
    source: &PairSource<'_>,
    n_pairs: usize,
    rng: &mut R,
) -> Result<Vec<ContrastivePair>, AugmentError> {
    let available = source.len();
    if n_pairs > available {
        return Err(AugmentError::InsufficientData {
            have: available,
            want: n_pairs,
        });
    }
    let mut order: Vec<usize> = (0..available).collect();
    for i in 0..n_pairs {
        let j = rng.random_range(i..available);
        order.swap(i, j);
    }
    let level = source.level();
    let mut pairs = Vec::with_capacity(n_pairs);
    for &i in order.iter().take(n_pairs) {
        let (a, b) = match source {
            PairSource::Sentences(c) => (c.original(i).to_string(), c.paraphrase(i).to_string()),
            PairSource::Snippets { snippets, corpus } => {
                let a = augment_sentences(&snippets[i], corpus, rng)?.join(" ");
                let b = augment_sentences(&snippets[i], corpus, rng)?.join(" ");
                (a, b)
            }
            PairSource::Sequences { signals, corpus } => {
                let a = grammar::serialize(&sequence_augment(&signals[i], corpus, rng)?);
                let b = grammar::serialize(&sequence_augment(&signals[i], corpus, rng)?);
                (a, b)
            }
        };
        pairs.push(ContrastivePair {
            level,
            text_a: a,
            text_b: b,
            source_id: i as u64,
        });
    }
    Ok(pairs)
}

/// Writes pairs as JSONL.
pub fn save_pairs(pairs: &[ContrastivePair], path: &Path) -> Result<(), AugmentError> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut out, p)
            .map_err(|e| AugmentError::Io(std::io::Error::other(e)))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

// --- corpus extraction from annotated samples ---------------------------

/// Unique instruction sentences from a dataset, in first-appearance order.
pub fn sentences_of(samples: &[AnnotatedSample]) -> Vec<String> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for s in samples {
        for sig in s.control_signals.values() {
            for iv in &sig.intervals {
                if let IntervalContent::Described(sentences) = iv {
                    for sentence in sentences {
                        if seen.insert(sentence.clone(), ()).is_none() {
                            out.push(sentence.clone());
                        }
                    }
                }
            }
        }
    }
    out
}

/// Unique described snippets (sentence lists) from a dataset.
pub fn snippets_of(samples: &[AnnotatedSample]) -> Vec<Vec<String>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for s in samples {
        for sig in s.control_signals.values() {
            for iv in &sig.intervals {
                if let IntervalContent::Described(sentences) = iv {
                    let key = sentences.join("\u{1}");
                    if seen.insert(key, ()).is_none() {
                        out.push(sentences.clone());
                    }
                }
            }
        }
    }
    out
}

/// Unique control signals that contain at least one described interval.
/// All-motionless signals carry nothing to augment and are skipped.
pub fn sequences_of(samples: &[AnnotatedSample]) -> Vec<ControlSignal> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for s in samples {
        for sig in s.control_signals.values() {
            if !sig.intervals.iter().any(|iv| iv.is_described()) {
                continue;
            }
            let key = grammar::serialize(sig);
            if seen.insert(key, ()).is_none() {
                out.push(sig.clone());
            }
        }
    }
    out
}
