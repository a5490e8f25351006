//! Embedding-quality metrics: positive/negative cosine separation plus the
//! alignment and uniformity measures over unit-normalized embeddings.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{EncoderCheckpoint, EncoderError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingMetrics {
    pub mean_cos_pos: f64,
    pub mean_cos_neg: f64,
    pub alignment: f64,
    pub uniformity: f64,
}

impl EmbeddingMetrics {
    /// Positive-minus-negative cosine gap; higher means better separation.
    pub fn gap(&self) -> f64 {
        self.mean_cos_pos - self.mean_cos_neg
    }
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

fn unit(v: &Array1<f64>) -> Array1<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v / n
}

/// Mean squared distance between unit-normalized positive pairs; lower is
/// better.
pub fn alignment_of(pairs: &[(Array1<f64>, Array1<f64>)]) -> f64 {
    let mut total = 0.0;
    for (a, b) in pairs {
        let ua = unit(a);
        let ub = unit(b);
        total += ua
            .iter()
            .zip(ub.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    total / pairs.len() as f64
}

/// Log of the mean Gaussian potential exp(-2 d^2) over all distinct
/// unit-normalized items; lower is better.
pub fn uniformity_of(points: &[Array1<f64>]) -> f64 {
    let units: Vec<Array1<f64>> = points.iter().map(unit).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..units.len() {
        for j in (i + 1)..units.len() {
            let d2: f64 = units[i]
                .iter()
                .zip(units[j].iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += (-2.0 * d2).exp();
            count += 1;
        }
    }
    (total / count as f64).ln()
}

/// Embeds both pair lists with the checkpoint's encoder (pooled embeddings,
/// no projection) and reports cosine separation, alignment over positives,
/// and uniformity over all distinct texts involved.
pub fn embedding_metrics(
    ckpt: &EncoderCheckpoint,
    pos_pairs: &[(String, String)],
    neg_pairs: &[(String, String)],
) -> Result<EmbeddingMetrics, EncoderError> {
    if pos_pairs.len() < 2 || neg_pairs.len() < 2 {
        return Err(EncoderError::InsufficientPairs {
            have: pos_pairs.len().min(neg_pairs.len()),
            need: 2,
        });
    }
    let mut cache: std::collections::BTreeMap<&str, Array1<f64>> = std::collections::BTreeMap::new();
    let mut uniq: Vec<&str> = Vec::new();
    for (a, b) in pos_pairs.iter().chain(neg_pairs.iter()) {
        for t in [a.as_str(), b.as_str()] {
            if !cache.contains_key(t) {
                cache.insert(t, ckpt.embed(t)?);
                uniq.push(t);
            }
        }
    }

    let mean_cos = |pairs: &[(String, String)]| -> f64 {
        pairs
            .iter()
            .map(|(a, b)| cosine(&cache[a.as_str()], &cache[b.as_str()]))
            .sum::<f64>()
            / pairs.len() as f64
    };
    let mean_cos_pos = mean_cos(pos_pairs);
    let mean_cos_neg = mean_cos(neg_pairs);

    let pos_embedded: Vec<(Array1<f64>, Array1<f64>)> = pos_pairs
        .iter()
        .map(|(a, b)| (cache[a.as_str()].clone(), cache[b.as_str()].clone()))
        .collect();
    let alignment = alignment_of(&pos_embedded);

    let points: Vec<Array1<f64>> = uniq.iter().map(|t| cache[*t].clone()).collect();
    let uniformity = if points.len() >= 2 {
        uniformity_of(&points)
    } else {
        0.0
    };

    Ok(EmbeddingMetrics {
        mean_cos_pos,
        mean_cos_neg,
        alignment,
        uniformity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_embeddings_collapse_all_metrics() {
        let p = array![0.4, -0.6, 1.0];
        let pairs = vec![(p.clone(), p.clone()), (p.clone(), p.clone())];
        assert_eq!(alignment_of(&pairs), 0.0);
        let points = vec![p.clone(), p.clone(), p.clone()];
        assert_eq!(uniformity_of(&points), 0.0);
        assert!((cosine(&p, &p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniformity_matches_brute_force_on_hand_placed_points() {
        let points = vec![
            array![1.0, 0.0],
            array![0.0, 1.0],
            array![-1.0, 0.5],
            array![0.3, -0.8],
            array![2.0, 2.0],
        ];
        // independent double loop over ordered pairs
        let unit = |v: &Array1<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v / n
        };
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..points.len() {
            for j in 0..points.len() {
                if i == j {
                    continue;
                }
                let a = unit(&points[i]);
                let b = unit(&points[j]);
                let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                total += (-2.0 * d2).exp();
                count += 1;
            }
        }
        let brute = (total / count as f64).ln();
        assert!((uniformity_of(&points) - brute).abs() < 1e-9);
    }

    #[test]
    fn insufficient_pairs_is_an_error() {
        let ckpt = EncoderCheckpoint::fresh(
            super::super::Vocabulary::build(["Move your arm up."]),
            super::super::EncoderConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                d_ff: 32,
                max_len: 32,
                d_proj: 8,
            },
            1,
        );
        let one = vec![("Move your arm up.".to_string(), "Move your arm up.".to_string())];
        assert!(matches!(
            embedding_metrics(&ckpt, &one, &one),
            Err(EncoderError::InsufficientPairs { .. })
        ));
    }
}
