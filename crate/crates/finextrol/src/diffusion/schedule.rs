//! Squared-cosine noise schedule and the forward (noising) process.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::nn::rand_normal_array;
use crate::world::MotionSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub offset: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_steps: 100,
            offset: 0.008,
        }
    }
}

/// Cumulative signal coefficients of the diffusion process.
/// `alpha_bar[0] = 1` exactly and the sequence is strictly decreasing in
/// `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_steps(&self) -> usize {
        self.config.t_steps
    }
}

/// Builds the schedule from the normalized squared-cosine form with the
/// given small offset; per-step retention factors are clipped so the
/// cumulative product stays strictly decreasing and positive.
pub fn build_cosine_schedule(t_steps: usize, offset: f64) -> Result<NoiseSchedule, DiffusionError> {
    if t_steps < 2 {
        return Err(DiffusionError::InvalidSteps(format!(
            "need at least 2 diffusion steps, got {t_steps}"
        )));
    }
    if !(offset > 0.0) {
        return Err(DiffusionError::InvalidSteps(format!(
            "offset must be positive, got {offset}"
        )));
    }
    let f = |t: f64| {
        let inner = ((t / t_steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
        inner.cos().powi(2)
    };
    let mut alpha_bar = Vec::with_capacity(t_steps + 1);
    alpha_bar.push(1.0);
    for t in 1..=t_steps {
        // per-step retention factor 1 - beta_t, kept in [0.001, 1) so the
        // cumulative product is strictly decreasing and never reaches zero
        let ratio = (f(t as f64) / f((t - 1) as f64)).clamp(0.001, 1.0 - 1e-12);
        alpha_bar.push(alpha_bar[t - 1] * ratio);
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig { t_steps, offset },
        alpha_bar,
    })
}

/// Samples `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` and
/// returns both the noisy motion and the standard-normal noise.
pub fn forward_diffuse<R: Rng>(
    x0: &MotionSequence,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>), DiffusionError> {
    if t < 1 || t > schedule.t_steps() {
        return Err(DiffusionError::StepOutOfRange {
            t,
            max: schedule.t_steps(),
        });
    }
    let ab = schedule.alpha_bar[t];
    let noise = rand_normal_array(x0.frames.nrows(), x0.frames.ncols(), rng);
    let x_t = &x0.frames * ab.sqrt() + &noise * (1.0 - ab).sqrt();
    Ok((x_t, noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_bar_starts_at_one_and_strictly_decreases() {
        for t_steps in [2usize, 10, 100, 1000] {
            let s = build_cosine_schedule(t_steps, 0.008).unwrap();
            assert_eq!(s.alpha_bar[0], 1.0);
            assert_eq!(s.alpha_bar.len(), t_steps + 1);
            for t in 1..=t_steps {
                assert!(
                    s.alpha_bar[t] < s.alpha_bar[t - 1],
                    "t_steps {t_steps}: not decreasing at {t}"
                );
                assert!(s.alpha_bar[t] > 0.0 && s.alpha_bar[t] <= 1.0);
            }
        }
    }

    #[test]
    fn hundred_step_schedule_ends_nearly_destroyed() {
        let s = build_cosine_schedule(100, 0.008).unwrap();
        assert!(s.alpha_bar[100] < 0.01, "alpha_bar[100] = {}", s.alpha_bar[100]);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(
            build_cosine_schedule(1, 0.008),
            Err(DiffusionError::InvalidSteps(_))
        ));
        assert!(matches!(
            build_cosine_schedule(10, 0.0),
            Err(DiffusionError::InvalidSteps(_))
        ));
    }

    #[test]
    fn forward_diffuse_respects_range_and_seed() {
        let x0 = MotionSequence {
            frames: ndarray::Array2::from_elem((4, 12), 0.5),
            frame_rate: 20.0,
        };
        let s = build_cosine_schedule(100, 0.008).unwrap();
        assert!(matches!(
            forward_diffuse(&x0, 0, &s, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
        assert!(matches!(
            forward_diffuse(&x0, 101, &s, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
        let (a, na) = forward_diffuse(&x0, 50, &s, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let (b, nb) = forward_diffuse(&x0, 50, &s, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(na, nb);
    }

    #[test]
    fn unit_alpha_bar_reproduces_clean_motion() {
        let x0 = MotionSequence {
            frames: ndarray::Array2::from_elem((3, 12), -1.25),
            frame_rate: 20.0,
        };
        // hand-built schedule whose first step keeps the signal intact
        let s = NoiseSchedule {
            config: ScheduleConfig {
                t_steps: 2,
                offset: 0.008,
            },
            alpha_bar: vec![1.0, 1.0, 0.5],
        };
        let (x_t, _) = forward_diffuse(&x0, 1, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(x_t, x0.frames);
    }

    #[test]
    fn noise_variance_matches_schedule() {
        let x0 = MotionSequence {
            frames: ndarray::Array2::from_elem((1, 2), 0.8),
            frame_rate: 20.0,
        };
        let s = build_cosine_schedule(100, 0.008).unwrap();
        let t = 40;
        let ab = s.alpha_bar[t];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let n = (draws * 2) as f64;
        for _ in 0..draws {
            let (x_t, _) = forward_diffuse(&x0, t, &s, &mut rng).unwrap();
            for &v in x_t.iter() {
                let centered = v - ab.sqrt() * 0.8;
                sum += centered;
                sumsq += centered * centered;
            }
        }
        let mean = sum / n;
        let var = sumsq / n - mean * mean;
        let expect = 1.0 - ab;
        assert!(
            (var - expect).abs() / expect < 0.02,
            "var {var} vs {expect}"
        );
    }
}
