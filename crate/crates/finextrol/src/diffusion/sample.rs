//! Ancestral sampling with classifier-free guidance in x0 space.

use ndarray::Array2;
use rand::Rng;

use super::checkpoint::ModelCheckpoint;
use super::model::{controlled_forward, ModelKind};
use super::schedule::NoiseSchedule;
use super::DiffusionError;
use crate::encoder::EncoderCheckpoint;
use crate::nn::rand_normal_array;
use crate::world::MotionSequence;

#[derive(Debug, Clone)]
pub struct SampleOptions {
    /// Denoising steps; at most the schedule's step count. Fewer steps walk
    /// an evenly spaced subsequence of the timestep grid.
    pub steps: usize,
    /// Guidance scale w: `x = x_null + w (x_cond - x_null)`. At w = 1 the
    /// null pass cancels and is skipped unless `force_cfg_pass` is set.
    pub guidance: f64,
    pub force_cfg_pass: bool,
    pub n_frames: usize,
    pub frame_rate: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            steps: 100,
            guidance: 2.5,
            force_cfg_pass: false,
            n_frames: 80,
            frame_rate: 20.0,
        }
    }
}

/// Generates a motion by ancestral sampling from pure noise. `control_text`
/// requires a control checkpoint plus the frozen encoder whose content hash
/// the checkpoint records.
pub fn sample<R: Rng>(
    model: &ModelCheckpoint,
    p: &str,
    control_text: Option<&str>,
    encoder: Option<&EncoderCheckpoint>,
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<MotionSequence, DiffusionError> {
    if opts.steps == 0 || opts.steps > schedule.t_steps() {
        return Err(DiffusionError::StepOverflow {
            steps: opts.steps,
            max: schedule.t_steps(),
        });
    }
    let e_c = match control_text {
        None => None,
        Some(text) => {
            if model.control.is_none() {
                return Err(DiffusionError::MissingControlBranch);
            }
            let enc = encoder.ok_or(DiffusionError::MissingControlBranch)?;
            let hash = enc.content_hash()?;
            if hash != model.encoder_hash {
                return Err(DiffusionError::EncoderMismatch {
                    expected: model.encoder_hash.clone(),
                    found: hash,
                });
            }
            Some(enc.embed_projected(text)?)
        }
    };
    if model.kind == ModelKind::Control && control_text.is_none() && model.control.is_some() {
        // sampling a control checkpoint without a signal falls back to its
        // base branch
    }

    let cond_ids = model.vocab.encode_ids(p);
    let denoise = |x: &Array2<f64>, t: usize, null: bool| -> Result<Array2<f64>, DiffusionError> {
        let ids = if null { None } else { Some(cond_ids.as_slice()) };
        match (&e_c, &model.control) {
            (Some(e_c), Some(ctrl)) => controlled_forward(&model.base, ctrl, x, t, ids, e_c),
            _ => model.base.forward(x, t, ids),
        }
    };

    // evenly spaced ascending timesteps ending at t_steps
    let t_total = schedule.t_steps();
    let ts: Vec<usize> = (1..=opts.steps)
        .map(|i| ((t_total as f64) * i as f64 / opts.steps as f64).round() as usize)
        .collect();

    let mut x = rand_normal_array(opts.n_frames, model.config.motion_dim, rng);
    for i in (0..ts.len()).rev() {
        let t_cur = ts[i];
        let t_prev = if i == 0 { 0 } else { ts[i - 1] };

        let x_cond = denoise(&x, t_cur, false)?;
        let skip_null = (opts.guidance - 1.0).abs() < f64::EPSILON && !opts.force_cfg_pass;
        let x0_hat = if skip_null {
            x_cond
        } else {
            let x_null = denoise(&x, t_cur, true)?;
            &x_null + &((&x_cond - &x_null) * opts.guidance)
        };

        let ab_cur = schedule.alpha_bar[t_cur];
        let ab_prev = schedule.alpha_bar[t_prev];
        let alpha_eff = ab_cur / ab_prev;
        let beta_eff = 1.0 - alpha_eff;
        let coef_x0 = ab_prev.sqrt() * beta_eff / (1.0 - ab_cur);
        let coef_xt = alpha_eff.sqrt() * (1.0 - ab_prev) / (1.0 - ab_cur);
        let mean = &x0_hat * coef_x0 + &x * coef_xt;
        if t_prev == 0 {
            x = mean;
        } else {
            let var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_cur);
            let noise = rand_normal_array(x.nrows(), x.ncols(), rng);
            x = mean + noise * var.sqrt();
        }
    }

    Ok(MotionSequence {
        frames: x,
        frame_rate: opts.frame_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::build_cosine_schedule;
    use crate::diffusion::train::{train_base, DiffTrainConfig};
    use crate::diffusion::{DenoiserConfig, ScheduleConfig};
    use crate::world::{annotate, sample_script, Skeleton, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> ModelCheckpoint {
        let cfg = WorldConfig {
            frames_per_interval: 3,
            total_intervals: 4,
            ..WorldConfig::default()
        };
        let sk = Skeleton::default();
        let samples: Vec<_> = (0..6)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                annotate(&sample_script(&mut rng, &cfg).unwrap(), &sk)
            })
            .collect();
        let arch = DenoiserConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            ..DenoiserConfig::default()
        };
        let sched = ScheduleConfig {
            t_steps: 10,
            offset: 0.008,
        };
        let train = DiffTrainConfig {
            epochs: 1,
            batch_size: 4,
            warmup_steps: 1,
            ..DiffTrainConfig::default()
        };
        train_base(&samples, &arch, &sched, &train).unwrap().0
    }

    #[test]
    fn single_step_returns_the_direct_prediction() {
        let model = tiny_model();
        let schedule = build_cosine_schedule(10, 0.008).unwrap();
        let opts = SampleOptions {
            steps: 1,
            guidance: 1.0,
            n_frames: 12,
            ..SampleOptions::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let out = sample(&model, "A person stands still.", None, None, &schedule, &opts, &mut rng)
            .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = crate::nn::rand_normal_array(12, 12, &mut rng);
        let ids = model.vocab.encode_ids("A person stands still.");
        let direct = model.base.forward(&x, 10, Some(&ids)).unwrap();
        assert_eq!(out.frames, direct);
    }

    #[test]
    fn unit_guidance_cancels_the_null_pass() {
        let model = tiny_model();
        let schedule = build_cosine_schedule(10, 0.008).unwrap();
        let base_opts = SampleOptions {
            steps: 5,
            guidance: 1.0,
            n_frames: 12,
            ..SampleOptions::default()
        };
        let forced = SampleOptions {
            force_cfg_pass: true,
            ..base_opts.clone()
        };
        let p = "A person moves the left arm up.";
        let a = sample(
            &model,
            p,
            None,
            None,
            &schedule,
            &base_opts,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = sample(
            &model,
            p,
            None,
            None,
            &schedule,
            &forced,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let max_abs = (&a.frames - &b.frames)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs < 1e-6, "max abs {max_abs}");
    }

    #[test]
    fn step_overflow_is_rejected() {
        let model = tiny_model();
        let schedule = build_cosine_schedule(10, 0.008).unwrap();
        let opts = SampleOptions {
            steps: 11,
            ..SampleOptions::default()
        };
        assert!(matches!(
            sample(
                &model,
                "x",
                None,
                None,
                &schedule,
                &opts,
                &mut ChaCha8Rng::seed_from_u64(0)
            ),
            Err(DiffusionError::StepOverflow { steps: 11, max: 10 })
        ));
    }

    #[test]
    fn control_without_branch_is_rejected() {
        let model = tiny_model();
        let schedule = build_cosine_schedule(10, 0.008).unwrap();
        let opts = SampleOptions {
            steps: 10,
            ..SampleOptions::default()
        };
        assert!(matches!(
            sample(
                &model,
                "x",
                Some("left arm : <Motionless>"),
                None,
                &schedule,
                &opts,
                &mut ChaCha8Rng::seed_from_u64(0)
            ),
            Err(DiffusionError::MissingControlBranch)
        ));
    }
}
