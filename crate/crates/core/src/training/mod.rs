//! Losses, optimisation and the toy training driver.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod model;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::autodiff::{loss_value, LossKind};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{degrade, sample_batch, sample_patches, synthetic_clips, Clip, SyntheticConfig, TrainingSample};
pub use model::{forward_on_tape, loss_and_gradient, loss_only, TapeParams};

use crate::convlstm::NonLocalMode;
use crate::enhancer::{enhance, EnhanceConfig, FrameSequence, NetworkConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::nonlocal::NonLocalConfig;
use crate::tensor::{PaddingMode, Tensor};

/// `‖ŷ − y‖₂`.
pub fn l2_loss(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    loss_value(y_hat, y, LossKind::Norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub enhance: EnhanceConfig,
    pub adam: AdamConfig,
    #[serde(with = "loss_kind_serde")]
    pub loss: LossKind,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch: usize,
    /// `T`: frames on each side of the target.
    pub radius: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale settings for the synthetic clips.
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig {
                frame_channels: 1,
                feature_channels: 8,
                hidden_channels: 8,
                encoder_layers: 2,
                decoder_layers: 1,
                kernel_size: 3,
                padding: PaddingMode::Zero,
            },
            enhance: EnhanceConfig {
                nonlocal: NonLocalConfig::new(4, 4, 1.0),
                mode: NonLocalMode::Approx,
            },
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            loss: LossKind::Norm,
            iterations: 500,
            batch_size: 4,
            patch: 16,
            radius: 1,
            seed: 0,
        }
    }
}

mod loss_kind_serde {
    use super::LossKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &LossKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match k {
            LossKind::Norm => "norm",
            LossKind::MeanSquared => "mse",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LossKind, D::Error> {
        match String::deserialize(d)?.as_str() {
            "norm" => Ok(LossKind::Norm),
            "mse" => Ok(LossKind::MeanSquared),
            other => Err(serde::de::Error::custom(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub adam: AdamState,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

/// Initial parameters for `config`, seeded by `config.seed`.
pub fn initial_params(config: &TrainConfig) -> Result<NetworkParams> {
    NetworkParams::init(config.network, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

/// Mean loss and gradient over a batch, reduced in sample order.
pub fn batch_gradient(
    params: &NetworkParams,
    batch: &[TrainingSample],
    cfg: &EnhanceConfig,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let per_sample = batch
        .par_iter()
        .map(|s| loss_and_gradient(params, &s.inputs, &s.target, cfg, kind))
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len().max(1) as f64;
    let mut grad = vec![0.0; params.parameter_count()];
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Trains from the seeded initialisation on random patches of `clips`.
pub fn train_toy(clips: &[Clip], config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(clips, config, initial_params(config)?, None)
}

/// Continues training `params`, optionally from saved optimiser moments.
pub fn train_from(
    clips: &[Clip],
    config: &TrainConfig,
    mut params: NetworkParams,
    adam: Option<AdamState>,
) -> Result<TrainOutcome> {
    let mut adam = adam.unwrap_or_else(|| AdamState::new(params.parameter_count(), config.adam));
    if adam.len() != params.parameter_count() {
        return Err(Error::shape(
            "train",
            format!("{} moments for {} parameters", adam.len(), params.parameter_count()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut flat = params.to_flat();
    let mut losses = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch = sample_batch(clips, config.batch_size, config.radius, config.patch, &mut rng)?;
        let (loss, grad) = batch_gradient(&params, &batch, &config.enhance, config.loss)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration, loss });
        }
        losses.push(loss);
        adam.update(&mut flat, &grad)?;
        params.set_flat(&flat)?;
    }
    Ok(TrainOutcome {
        params,
        adam,
        losses,
    })
}

/// Trailing moving average over `window` entries (shorter at the start).
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Mean PSNR of compressed and enhanced frames against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub frames: usize,
    pub psnr_input: f64,
    pub psnr_enhanced: f64,
}

impl Evaluation {
    pub fn delta_psnr(&self) -> f64 {
        self.psnr_enhanced - self.psnr_input
    }
}

/// Enhances every frame that has a full `2·radius + 1` window inside its
/// clip and averages PSNR at peak 1.
pub fn evaluate(
    clips: &[Clip],
    params: &NetworkParams,
    cfg: &EnhanceConfig,
    radius: usize,
) -> Result<Evaluation> {
    let (mut before, mut after, mut frames) = (0.0, 0.0, 0usize);
    for clip in clips {
        for t in radius..clip.len().saturating_sub(radius) {
            let seq = FrameSequence::centered(clip.compressed[t - radius..=t + radius].to_vec())?;
            let y = enhance(&seq, params, cfg)?;
            before += psnr(&clip.compressed[t], &clip.raw[t], 1.0)?;
            after += psnr(&y, &clip.raw[t], 1.0)?;
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::invalid("evaluate", "no clip holds a full window"));
    }
    Ok(Evaluation {
        frames,
        psnr_input: before / frames as f64,
        psnr_enhanced: after / frames as f64,
    })
}
