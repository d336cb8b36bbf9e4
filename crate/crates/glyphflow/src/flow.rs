//! Rectified-flow interpolation, the pretraining and cooldown objectives,
//! and the Euler sampler for editing.
//!
//! Pretraining interpolates between the clean target latent and Gaussian
//! noise and regresses the constant velocity `z_1 - z_0`; cooldown
//! interpolates between source and edited latents and regresses
//! `z_tgt - z_src`. The noised quantity always lives in the masked-image
//! slot of the composite latent; the glyph, style and mask groups stay
//! clean at every `t`.
//!
//! The time-to-noise schedule is the identity, `sigma(t) = t`; it is kept
//! behind [`sigma`] so a different schedule stays a one-line change.

use thiserror::Error;

use crate::backbone::{self, BackboneError, ModelConfig, ModelParams, PromptBundle};
use crate::encoders::{EncoderError, LatentCodec};
use crate::imaging::{composite_output, ImageBuffer, ImagingError};
use crate::tensor::rng::seeded_randn;
use crate::tensor::{ops, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("sigma {0} outside [0, 1]")]
    SigmaRange(f32),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite sample at step {step} (max abs {max_abs:e})")]
    NonFinite { step: usize, max_abs: f32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Interpolation endpoints and the point between them for one timestep.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub z_0: Tensor,
    pub z_1: Tensor,
    pub z_t: Tensor,
    pub t: f32,
    pub sigma_t: f32,
}

/// Source/edited latent pair for the cooldown objective.
#[derive(Debug, Clone)]
pub struct CooldownPairLatents {
    pub z_src: Tensor,
    pub z_tgt: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 30,
            guidance: 30.0,
            seed: 42,
        }
    }
}

/// Time-dependent interpolation coefficient. Identity schedule.
pub fn sigma(t: f32) -> f32 {
    t
}

/// `(1 - sigma) * a + sigma * b`, elementwise.
pub fn interpolate(a: &Tensor, b: &Tensor, sigma: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(FlowError::SigmaRange(sigma));
    }
    if a.shape() != b.shape() {
        return Err(FlowError::Invalid {
            op: "interpolate",
            msg: format!("shapes {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    if sigma == 0.0 {
        return Ok(a.clone());
    }
    if sigma == 1.0 {
        return Ok(b.clone());
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (1.0 - sigma) * x + sigma * y)
        .collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

/// Rectified-flow objective: mean squared error between the prediction
/// and the noise-to-data velocity `z_1 - z_0`.
pub fn rf_loss(pred: &Tensor, z_0: &Tensor, z_1: &Tensor) -> Result<Tensor> {
    let velocity = ops::sub(z_1, z_0)?;
    Ok(ops::squared_error(pred, &velocity)?)
}

/// Cooldown objective: mean squared error against `z_tgt - z_src`.
pub fn cd_loss(pred: &Tensor, pair: &CooldownPairLatents) -> Result<Tensor> {
    rf_loss(pred, &pair.z_src, &pair.z_tgt)
}

/// Composite-latent channel spans per plane group, in units of latent
/// channels (`d = codec patch^2` per input channel).
pub fn plane_spans(codec: &LatentCodec) -> [(usize, usize); 4] {
    let d = codec.patch() * codec.patch();
    [(0, d), (d, 3 * d), (4 * d, 3 * d), (7 * d, d)]
}

/// Assemble the composite latent: encoded glyph, style and mask planes
/// around an arbitrary tensor in the target (masked-image) slot.
pub fn assemble_composite(
    bundle: &PromptBundle,
    target_slot: &Tensor,
    codec: &LatentCodec,
) -> Result<Tensor> {
    let z_glyph = codec.encode(&bundle.glyph_plane)?;
    let z_style = codec.encode(&bundle.style_plane)?;
    let z_mask = codec.encode(&bundle.mask.to_plane())?;
    if target_slot.shape() != [z_style.shape()[0], z_style.shape()[1], z_style.shape()[2]] {
        return Err(FlowError::Invalid {
            op: "assemble_composite",
            msg: format!(
                "target slot {:?} does not match plane latents {:?}",
                target_slot.shape(),
                z_style.shape()
            ),
        });
    }
    Ok(ops::concat(&[&z_glyph, &z_style, target_slot, &z_mask], 2)?)
}

/// Slice the target-group channels back out of a composite latent.
pub fn target_slice(composite: &Tensor, codec: &LatentCodec) -> Result<Tensor> {
    let (start, len) = plane_spans(codec)[2];
    Ok(ops::slice_axis(composite, 2, start, len)?)
}

/// One training input: the composite latent with the noised target slot,
/// and the velocity the model should predict.
#[derive(Debug, Clone)]
pub struct TrainingPoint {
    pub composite: Tensor,
    pub velocity_target: Tensor,
    pub state: FlowState,
}

/// Pretraining point: `z_0` encodes the target image, `z_1` is seeded
/// noise, and the masked-image slot carries their interpolation. The
/// conditioning groups are byte-identical for every `t`.
pub fn build_training_point(
    bundle: &PromptBundle,
    target: &ImageBuffer,
    t: f32,
    seed: u64,
    codec: &LatentCodec,
) -> Result<TrainingPoint> {
    if target.height() != bundle.masked_plane.height()
        || target.width() != bundle.masked_plane.width()
    {
        return Err(FlowError::Invalid {
            op: "build_training_point",
            msg: format!(
                "target {}x{} does not match bundle resolution {}x{}",
                target.height(),
                target.width(),
                bundle.masked_plane.height(),
                bundle.masked_plane.width()
            ),
        });
    }
    let z_0 = codec.encode(target)?;
    let z_1 = seeded_randn(z_0.shape(), seed);
    let sigma_t = sigma(t);
    let z_t = interpolate(&z_0, &z_1, sigma_t)?;
    let composite = assemble_composite(bundle, &z_t, codec)?;
    let velocity_target = ops::sub(&z_1, &z_0)?;
    Ok(TrainingPoint {
        composite,
        velocity_target,
        state: FlowState {
            z_0,
            z_1,
            z_t,
            t,
            sigma_t,
        },
    })
}

/// Cooldown point: interpolate between the source and edited latents and
/// regress their difference. No noise is drawn.
pub fn build_cooldown_point(
    bundle: &PromptBundle,
    source: &ImageBuffer,
    edited: &ImageBuffer,
    t: f32,
    codec: &LatentCodec,
) -> Result<(TrainingPoint, CooldownPairLatents)> {
    let z_src = codec.encode(source)?;
    let z_tgt = codec.encode(edited)?;
    let sigma_t = sigma(t);
    let z_t = interpolate(&z_src, &z_tgt, sigma_t)?;
    let composite = assemble_composite(bundle, &z_t, codec)?;
    let velocity_target = ops::sub(&z_tgt, &z_src)?;
    let pair = CooldownPairLatents {
        z_src: z_src.clone(),
        z_tgt: z_tgt.clone(),
    };
    Ok((
        TrainingPoint {
            composite,
            velocity_target,
            state: FlowState {
                z_0: z_src,
                z_1: z_tgt,
                z_t,
                t,
                sigma_t,
            },
        },
        pair,
    ))
}

/// Euler integration of a velocity field from `t = 1` down to `t = 0`:
/// `z <- z - (sigma(t_k) - sigma(t_{k-1})) * v(z, t_k)`.
///
/// Exposed separately from [`sample`] so an oracle velocity can drive the
/// exact same loop in tests.
pub fn sample_trajectory<F>(init: Tensor, steps: usize, velocity: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f32) -> Result<Tensor>,
{
    sample_trajectory_observed(init, steps, velocity, |_, _| Ok(()))
}

/// [`sample_trajectory`] with a per-step observer receiving the step
/// index (counting down) and the post-update latent; used for trace
/// dumps.
pub fn sample_trajectory_observed<F, O>(
    init: Tensor,
    steps: usize,
    mut velocity: F,
    mut observe: O,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f32) -> Result<Tensor>,
    O: FnMut(usize, &Tensor) -> Result<()>,
{
    if steps == 0 {
        return Err(FlowError::Invalid {
            op: "sample_trajectory",
            msg: "steps must be >= 1".into(),
        });
    }
    let mut z = init;
    for k in (1..=steps).rev() {
        let t_k = k as f32 / steps as f32;
        let t_prev = (k - 1) as f32 / steps as f32;
        let v = velocity(&z, t_k)?;
        if !v.is_finite() {
            return Err(FlowError::NonFinite {
                step: k,
                max_abs: v.max_abs(),
            });
        }
        let delta = sigma(t_k) - sigma(t_prev);
        z = ops::sub(&z, &ops::scalar_mul(&v, delta)?)?;
        if !z.is_finite() {
            return Err(FlowError::NonFinite {
                step: k,
                max_abs: z.max_abs(),
            });
        }
        observe(k, &z)?;
    }
    Ok(z)
}

/// Forward Euler integration of a source-to-target transport field from
/// `t = 0` up to `t = 1`: `z <- z + (sigma(t_k) - sigma(t_{k-1})) * v(z, t_{k-1})`.
pub fn transport_trajectory<F>(init: Tensor, steps: usize, mut velocity: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f32) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(FlowError::Invalid {
            op: "transport_trajectory",
            msg: "steps must be >= 1".into(),
        });
    }
    let mut z = init;
    for k in 0..steps {
        let t_k = k as f32 / steps as f32;
        let t_next = (k + 1) as f32 / steps as f32;
        let v = velocity(&z, t_k)?;
        if !v.is_finite() {
            return Err(FlowError::NonFinite {
                step: k,
                max_abs: v.max_abs(),
            });
        }
        let delta = sigma(t_next) - sigma(t_k);
        z = ops::add(&z, &ops::scalar_mul(&v, delta)?)?;
        if !z.is_finite() {
            return Err(FlowError::NonFinite {
                step: k,
                max_abs: z.max_abs(),
            });
        }
    }
    Ok(z)
}

/// Edit by transporting the source latent along the learned field, the
/// inference mode matching the cooldown objective: the interpolation runs
/// source-to-target, so integration starts at the source latent and moves
/// forward in `t`.
pub fn sample_from_source(
    params: &ModelParams,
    cfg: &ModelConfig,
    codec: &LatentCodec,
    bundle: &PromptBundle,
    source: &ImageBuffer,
    sampler: &SamplerConfig,
) -> Result<ImageBuffer> {
    bundle.validate(cfg.resolution, cfg.d_txt)?;
    let z_src = codec.encode(source)?;
    let z_final = transport_trajectory(z_src, sampler.steps, |z, t| {
        let composite = assemble_composite(bundle, z, codec)?;
        Ok(backbone::forward(
            params,
            cfg,
            codec,
            &composite,
            t,
            sampler.guidance,
            &bundle.content_embedding,
            &bundle.style_embedding,
        )?)
    })?;
    let decoded = codec.decode(&z_final)?;
    Ok(composite_output(&decoded, &bundle.masked_plane, &bundle.mask)?)
}

/// Edit one sample: integrate the learned velocity field from seeded
/// noise, decode the final target latent, and composite it into the
/// source over the mask. Off-mask pixels equal the source exactly.
pub fn sample(
    params: &ModelParams,
    cfg: &ModelConfig,
    codec: &LatentCodec,
    bundle: &PromptBundle,
    sampler: &SamplerConfig,
) -> Result<ImageBuffer> {
    sample_traced(params, cfg, codec, bundle, sampler, None)
}

/// [`sample`] that optionally dumps the latent after every Euler step as
/// `step_{k:03}.gft` under `trace_dir`.
pub fn sample_traced(
    params: &ModelParams,
    cfg: &ModelConfig,
    codec: &LatentCodec,
    bundle: &PromptBundle,
    sampler: &SamplerConfig,
    trace_dir: Option<&std::path::Path>,
) -> Result<ImageBuffer> {
    bundle.validate(cfg.resolution, cfg.d_txt)?;
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir).map_err(|e| FlowError::Invalid {
            op: "sample",
            msg: format!("trace dir: {e}"),
        })?;
    }
    let grid = cfg.latent_hw(codec);
    let z_init = seeded_randn(
        &[grid, grid, cfg.target_channels(codec)],
        sampler.seed,
    );
    let z_final = sample_trajectory_observed(
        z_init,
        sampler.steps,
        |z, t| {
            let composite = assemble_composite(bundle, z, codec)?;
            Ok(backbone::forward(
                params,
                cfg,
                codec,
                &composite,
                t,
                sampler.guidance,
                &bundle.content_embedding,
                &bundle.style_embedding,
            )?)
        },
        |k, z| {
            if let Some(dir) = trace_dir {
                crate::tensor::gft::save(&dir.join(format!("step_{k:03}.gft")), z)?;
            }
            Ok(())
        },
    )?;
    let decoded = codec.decode(&z_final)?;
    // masked plane is I*(1-M), identical to the source off the mask
    Ok(composite_output(&decoded, &bundle.masked_plane, &bundle.mask)?)
}
