//! Temperature-scaled contrastive loss over cosine similarity.

use ndarray::{Array1, Array2};

use super::EncoderError;

/// A batch of 2N contrastive embeddings where rows (2k, 2k+1) hold the k-th
/// positive pair. Every other row in the batch is a negative.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub z: Array2<f64>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(z: Array2<f64>, temperature: f64) -> Result<ContrastiveBatch, EncoderError> {
        let n = z.nrows();
        if n < 2 || n % 2 != 0 {
            return Err(EncoderError::BatchShape(format!(
                "need an even row count >= 2, got {n}"
            )));
        }
        if !(temperature > 0.0) {
            return Err(EncoderError::BatchShape(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(ContrastiveBatch { z, temperature })
    }

    fn partner(i: usize) -> usize {
        i ^ 1
    }
}

/// Per-anchor contrastive loss averaged over all 2N anchors. Each anchor's
/// positive is its pair partner; the denominator runs over every other row.
pub fn info_nce(batch: &ContrastiveBatch) -> Result<f64, EncoderError> {
    Ok(info_nce_with_grad(batch)?.0)
}

/// Loss plus its gradient with respect to the raw (unnormalized) embeddings.
pub fn info_nce_with_grad(
    batch: &ContrastiveBatch,
) -> Result<(f64, Array2<f64>), EncoderError> {
    let n = batch.z.nrows();
    let d = batch.z.ncols();
    let tau = batch.temperature;

    let mut norms = Array1::zeros(n);
    for i in 0..n {
        let norm = batch.z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(EncoderError::ZeroVectorEmbedding);
        }
        norms[i] = norm;
    }
    let mut unit = batch.z.clone();
    for i in 0..n {
        let inv = 1.0 / norms[i];
        unit.row_mut(i).mapv_inplace(|v| v * inv);
    }
    // cosine similarity matrix
    let sim = unit.dot(&unit.t());

    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, d));
    for i in 0..n {
        let j = ContrastiveBatch::partner(i);
        // log-sum-exp over k != i
        let mut max = f64::NEG_INFINITY;
        for k in 0..n {
            if k != i {
                max = max.max(sim[[i, k]] / tau);
            }
        }
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += ((sim[[i, k]] / tau) - max).exp();
            }
        }
        let lse = max + denom.ln();
        loss += lse - sim[[i, j]] / tau;

        // dL/dsim[i][k] = (softmax_ik - [k == j]) / (tau * n)
        for k in 0..n {
            if k == i {
                continue;
            }
            let softmax = ((sim[[i, k]] / tau) - max).exp() / denom;
            let mut w = softmax / (tau * n as f64);
            if k == j {
                w -= 1.0 / (tau * n as f64);
            }
            if w == 0.0 {
                continue;
            }
            // dsim/dz_i and dsim/dz_k through the cosine normalization
            let s = sim[[i, k]];
            for c in 0..d {
                grad[[i, c]] += w * (unit[[k, c]] - s * unit[[i, c]]) / norms[i];
                grad[[k, c]] += w * (unit[[i, c]] - s * unit[[k, c]]) / norms[k];
            }
        }
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_pair_has_exactly_zero_loss() {
        let z = array![[0.3, -0.2, 1.0], [1.0, 0.5, -0.1]];
        let batch = ContrastiveBatch::new(z, 0.07).unwrap();
        let (loss, grad) = info_nce_with_grad(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn orthogonal_two_pair_case_matches_direct_evaluation() {
        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let batch = ContrastiveBatch::new(z, 0.07).unwrap();
        let loss = info_nce(&batch).unwrap();
        // each anchor: -log(e^{1/tau} / (e^{1/tau} + 2 e^{0}))
        let direct = -((1.0f64 / 0.07).exp() / ((1.0f64 / 0.07).exp() + 2.0)).ln();
        assert!((loss - direct).abs() < 1e-9, "loss {loss} direct {direct}");
        assert!((loss - 1.25e-6).abs() < 2e-7);
    }

    #[test]
    fn loss_is_scale_invariant_per_embedding() {
        let z = array![
            [0.5, -0.3, 0.8],
            [0.4, -0.1, 0.9],
            [-0.7, 0.2, 0.1],
            [-0.6, 0.4, 0.0]
        ];
        let base = info_nce(&ContrastiveBatch::new(z.clone(), 0.07).unwrap()).unwrap();
        let mut scaled = z;
        scaled.row_mut(2).mapv_inplace(|v| v * 37.5);
        let after = info_nce(&ContrastiveBatch::new(scaled, 0.07).unwrap()).unwrap();
        assert!((base - after).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_is_rejected() {
        let z = array![[0.0, 0.0], [1.0, 0.0]];
        let batch = ContrastiveBatch::new(z, 0.07).unwrap();
        assert!(matches!(
            info_nce(&batch),
            Err(EncoderError::ZeroVectorEmbedding)
        ));
    }

    #[test]
    fn odd_batches_are_rejected() {
        let z = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert!(ContrastiveBatch::new(z, 0.07).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let z = array![
            [0.5, -0.3, 0.8],
            [0.4, -0.1, 0.9],
            [-0.7, 0.2, 0.1],
            [-0.6, 0.4, 0.0],
            [0.2, 0.9, -0.5],
            [0.1, 0.8, -0.4]
        ];
        let batch = ContrastiveBatch::new(z.clone(), 0.2).unwrap();
        let (_, grad) = info_nce_with_grad(&batch).unwrap();
        let h = 1e-6;
        for r in 0..z.nrows() {
            for c in 0..z.ncols() {
                let mut up = z.clone();
                up[[r, c]] += h;
                let mut down = z.clone();
                down[[r, c]] -= h;
                let lu = info_nce(&ContrastiveBatch::new(up, 0.2).unwrap()).unwrap();
                let ld = info_nce(&ContrastiveBatch::new(down, 0.2).unwrap()).unwrap();
                let num = (lu - ld) / (2.0 * h);
                assert!(
                    (num - grad[[r, c]]).abs() < 1e-7,
                    "({r},{c}): num {num} vs {}",
                    grad[[r, c]]
                );
            }
        }
    }
}
