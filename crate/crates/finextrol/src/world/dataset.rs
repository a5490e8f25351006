//! JSONL dataset files for annotated samples.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    annotate, sample_script, sample_seed, AnnotatedSample, MotionSequence, Skeleton, WorldConfig,
    WorldError, MOTION_DIM,
};
use crate::grammar::{self, BodyPart};

/// One dataset line: coarse text, canonical signal text per part, and the
/// motion as nested frame arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub p: String,
    pub signals: BTreeMap<String, String>,
    pub motion: Vec<Vec<f64>>,
    pub frame_rate: u32,
    pub interval_seconds: f64,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Converts a sample to its file record. Motion values are rounded to six
/// decimals to keep files compact.
pub fn sample_to_record(sample: &AnnotatedSample) -> SampleRecord {
    let motion = sample
        .motion
        .frames
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|&v| round6(v)).collect())
        .collect();
    let signals = sample
        .control_signals
        .iter()
        .map(|(part, sig)| (part.snake().to_string(), grammar::serialize(sig)))
        .collect();
    let interval_seconds = sample
        .control_signals
        .values()
        .next()
        .map(|s| s.interval_seconds)
        .unwrap_or(0.5);
    SampleRecord {
        p: sample.coarse_text.clone(),
        signals,
        motion,
        frame_rate: sample.motion.frame_rate as u32,
        interval_seconds,
    }
}

fn record_to_sample(record: SampleRecord, line: usize) -> Result<AnnotatedSample, WorldError> {
    let n_frames = record.motion.len();
    if n_frames < 2 {
        return Err(WorldError::MalformedRecord {
            line,
            msg: format!("motion has {n_frames} frames, need >= 2"),
        });
    }
    let mut frames = Array2::<f64>::zeros((n_frames, MOTION_DIM));
    for (t, row) in record.motion.iter().enumerate() {
        if row.len() != MOTION_DIM {
            return Err(WorldError::MalformedRecord {
                line,
                msg: format!("frame {t} has {} channels, need {MOTION_DIM}", row.len()),
            });
        }
        for (c, &v) in row.iter().enumerate() {
            frames[[t, c]] = v;
        }
    }
    let mut control_signals = BTreeMap::new();
    for (key, text) in &record.signals {
        let part = BodyPart::from_snake(key).ok_or_else(|| WorldError::MalformedRecord {
            line,
            msg: format!("unknown body part key {key}"),
        })?;
        let sig = grammar::parse(text, part, record.interval_seconds).map_err(|e| {
            WorldError::MalformedRecord {
                line,
                msg: format!("bad signal for {key}: {e}"),
            }
        })?;
        control_signals.insert(part, sig);
    }
    Ok(AnnotatedSample {
        motion: MotionSequence {
            frames,
            frame_rate: record.frame_rate as f64,
        },
        coarse_text: record.p,
        control_signals,
    })
}

/// Generates `n` annotated samples and writes them as JSONL, one record per
/// line. Output is a pure function of `(n, seed, config)`.
pub fn dataset_generate(
    n: usize,
    seed: u64,
    config: &WorldConfig,
    skeleton: &Skeleton,
    path: &Path,
) -> Result<(), WorldError> {
    let mut out = BufWriter::new(File::create(path)?);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i as u64));
        let script = sample_script(&mut rng, config)?;
        let sample = annotate(&script, skeleton);
        let record = sample_to_record(&sample);
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| WorldError::Io(std::io::Error::other(e)))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a JSONL dataset back into annotated samples.
pub fn load_dataset(path: &Path) -> Result<Vec<AnnotatedSample>, WorldError> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| WorldError::MalformedRecord {
                line: i + 1,
                msg: e.to_string(),
            })?;
        samples.push(record_to_sample(record, i + 1)?);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_file_is_schema_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        dataset_generate(1, 7, &WorldConfig::default(), &Skeleton::default(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let record: SampleRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(record.motion.len(), 80);
        assert_eq!(record.signals.len(), 6);
        assert_eq!(record.frame_rate, 20);
        assert!((record.interval_seconds - 0.5).abs() < 1e-12);
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let cfg = WorldConfig::default();
        let sk = Skeleton::default();
        dataset_generate(50, 123, &cfg, &sk, &a).unwrap();
        dataset_generate(50, 123, &cfg, &sk, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn load_round_trips_signals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        dataset_generate(20, 5, &WorldConfig::default(), &Skeleton::default(), &path).unwrap();
        let samples = load_dataset(&path).unwrap();
        assert_eq!(samples.len(), 20);
        for s in &samples {
            assert_eq!(s.control_signals.len(), 6);
            assert_eq!(s.motion.len(), 80);
        }
    }
}
