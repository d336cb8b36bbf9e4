//! Optimizer, the two training stages, prompt-configuration ablations and
//! the incremental multilingual protocol.
//!
//! Pretraining is self-supervised: the velocity target connects the
//! record's (edited == source for plain scenes) image latent to seeded
//! noise. Cooldown requires paired records and connects the source latent
//! to the edited latent. Both stages update only backbone parameters; the
//! codec and text embedders are frozen, which a before/after checksum
//! makes checkable.
//!
//! Every stochastic choice is a pure function of `(seed, step, micro)`,
//! so an interrupted run resumed from a checkpoint reproduces the
//! uninterrupted loss log byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{
    self, cond_features, BackboneError, ModelConfig, ModelParams, PromptBundle,
};
use crate::dataset::{self, DatasetError, Manifest, ManifestRecord};
use crate::encoders::{embed_content_text, embed_style_text, EncoderError, LatentCodec};
use crate::flow::{self, FlowError, SamplerConfig};
use crate::glyphs::{self, GlyphError};
use crate::imaging::{
    apply_mask, crop, letterbox, mask_bbox, BinaryMask, ImageBuffer, ImagingError,
};
use crate::metrics::{seq_acc, EvalRecord, MetricsError};
use crate::tensor::rng::{derive_seed, Stream};
use crate::tensor::{ops, GradTape, Tensor, TensorError};

const TRAIN_TAG: u64 = 0x5452;
const EVAL_TAG: u64 = 0x4556;
const INIT_TAG: u64 = 0x494e;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("cooldown requires paired records; '{0}' is self-supervised")]
    UnpairedCooldown(String),
    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Glyph(#[from] GlyphError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("trainer i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

// ── Optimizer ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates plus step and skip counters.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub skipped: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |p: &ModelParams| -> BTreeMap<String, Tensor> {
            p.iter()
                .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        OptimizerState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            skipped: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained non-finite values; nothing was touched except
    /// the skip counter.
    SkippedNonFinite,
}

/// One decoupled-weight-decay Adam update over all parameters.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<StepOutcome> {
    for (name, grad) in grads {
        if !grad.is_finite() {
            state.skipped += 1;
            return Ok(StepOutcome::SkippedNonFinite);
        }
        let have = params.get(name).ok_or_else(|| TrainerError::Invalid {
            op: "adamw_step",
            msg: format!("gradient for unknown parameter '{name}'"),
        })?;
        if have.shape() != grad.shape() {
            return Err(TrainerError::Invalid {
                op: "adamw_step",
                msg: format!(
                    "gradient shape {:?} vs parameter {:?} for '{name}'",
                    grad.shape(),
                    have.shape()
                ),
            });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);

    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let Some(grad) = grads.get(&name) else { continue };
        let mut weight = params.get(&name).unwrap().clone();
        let m = state.m.get_mut(&name).expect("state matches params");
        let v = state.v.get_mut(&name).expect("state matches params");
        {
            let wd = weight.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..wd.len() {
                let g = grad.data()[i];
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = md[i] as f64 / bc1;
                let v_hat = vd[i] as f64 / bc2;
                let update = m_hat / (v_hat.sqrt() + cfg.eps as f64);
                wd[i] -= (cfg.lr as f64 * update) as f32
                    + cfg.lr * cfg.weight_decay * wd[i];
            }
        }
        params.set(&name, weight)?;
    }
    Ok(StepOutcome::Applied)
}

// ── Prompt configuration ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptConfig {
    TextOnly,
    TextGlyph,
    TextStyle,
    TextGlyphStyle,
}

impl PromptConfig {
    pub fn uses_glyph(&self) -> bool {
        matches!(self, PromptConfig::TextGlyph | PromptConfig::TextGlyphStyle)
    }

    pub fn uses_style(&self) -> bool {
        matches!(self, PromptConfig::TextStyle | PromptConfig::TextGlyphStyle)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptConfig::TextOnly => "text_only",
            PromptConfig::TextGlyph => "text_glyph",
            PromptConfig::TextStyle => "text_style",
            PromptConfig::TextGlyphStyle => "text_glyph_style",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text_only" => Ok(PromptConfig::TextOnly),
            "text_glyph" => Ok(PromptConfig::TextGlyph),
            "text_style" => Ok(PromptConfig::TextStyle),
            "text_glyph_style" => Ok(PromptConfig::TextGlyphStyle),
            other => Err(TrainerError::Config(format!(
                "unknown prompt_config '{other}'"
            ))),
        }
    }
}

/// Assemble the conditioning bundle for one sample. Disabled planes stay
/// in the layout but are zeroed, so the channel arithmetic is identical
/// across ablation configs. The style text defaults to the target text.
///
/// The glyph render and the style crop are letterboxed into the mask's
/// bounding rectangle (zero outside), spatially aligning both prompts
/// with the region they describe.
pub fn build_prompt_bundle(
    image: &ImageBuffer,
    mask: &BinaryMask,
    target_text: &str,
    language: &str,
    prompt_config: PromptConfig,
    resolution: usize,
    style_text: Option<&str>,
) -> Result<PromptBundle> {
    if image.height() != resolution || image.width() != resolution {
        return Err(TrainerError::Invalid {
            op: "build_prompt_bundle",
            msg: format!(
                "image {}x{} does not match working resolution {resolution}",
                image.height(),
                image.width()
            ),
        });
    }
    let font = glyphs::fonts().by_name(language)?;
    let bbox = mask_bbox(mask)?;

    let glyph_plane = if prompt_config.uses_glyph() {
        // Masks carry a 2 px dilation margin around the text box, so the
        // render goes into the bbox shrunk by that margin: on generated
        // scenes the glyph ink then overlays the text pixels exactly.
        let inner = shrink_rect(bbox, dataset::MASK_DILATION);
        let map = glyphs::render_line(target_text, font, 1)?;
        let fitted = letterbox(&map.image, inner.height(), inner.width())?;
        paste_at(
            ImageBuffer::zeros(resolution, resolution, 1),
            &fitted,
            inner.y0,
            inner.x0,
        )
    } else {
        ImageBuffer::zeros(resolution, resolution, 1)
    };

    let style_plane = if prompt_config.uses_style() {
        let crop = crop(image, bbox)?;
        paste_at(
            ImageBuffer::zeros(resolution, resolution, 3),
            &crop,
            bbox.y0,
            bbox.x0,
        )
    } else {
        ImageBuffer::zeros(resolution, resolution, 3)
    };

    let masked_plane = apply_mask(image, mask)?;
    let content_embedding = embed_content_text(target_text, crate::encoders::D_TXT)?;
    let style_embedding = embed_style_text(style_text.unwrap_or(target_text), crate::encoders::D_TXT);

    Ok(PromptBundle {
        glyph_plane,
        style_plane,
        masked_plane,
        mask: mask.clone(),
        content_embedding,
        style_embedding,
    })
}

/// Shrink a rect by `margin` on every side, keeping at least 1x1.
fn shrink_rect(rect: crate::imaging::Rect, margin: usize) -> crate::imaging::Rect {
    if rect.width() > 2 * margin && rect.height() > 2 * margin {
        crate::imaging::Rect {
            x0: rect.x0 + margin,
            y0: rect.y0 + margin,
            x1: rect.x1 - margin,
            y1: rect.y1 - margin,
        }
    } else {
        rect
    }
}

fn paste_at(mut canvas: ImageBuffer, patch: &ImageBuffer, oy: usize, ox: usize) -> ImageBuffer {
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            for c in 0..patch.channels() {
                canvas.set(oy + y, ox + x, c, patch.get(y, x, c));
            }
        }
    }
    canvas
}

// ── Train configuration ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Cooldown,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Cooldown => "cooldown",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "cooldown" => Ok(Stage::Cooldown),
            other => Err(TrainerError::Config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub prompt_config: PromptConfig,
    pub paired: bool,
    pub lr: f32,
    pub accum_steps: usize,
    pub batch_per_step: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub guidance: f32,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            prompt_config: PromptConfig::TextGlyph,
            paired: false,
            lr: 2e-5,
            accum_steps: 8,
            batch_per_step: 1,
            max_steps: 2000,
            seed: 42,
            checkpoint_every: 500,
            guidance: 30.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Stage defaults mirroring the prompt ablation outcome: glyph-only
    /// prompts while pretraining, glyph+style with paired data for
    /// cooldown.
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => TrainConfig::default(),
            Stage::Cooldown => TrainConfig {
                stage: Stage::Cooldown,
                prompt_config: PromptConfig::TextGlyphStyle,
                paired: true,
                ..TrainConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainerError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.accum_steps == 0 || self.batch_per_step == 0 || self.max_steps == 0 {
            return Err(TrainerError::Config(
                "accum_steps, batch_per_step and max_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Flat `key=value` serialization, one pair per line.
    pub fn to_text(&self) -> String {
        format!(
            "stage={}\nprompt_config={}\npaired={}\nlr={}\naccum_steps={}\nbatch_per_step={}\n\
             max_steps={}\nseed={}\ncheckpoint_every={}\nguidance={}\nd_model={}\nheads={}\n\
             dual_blocks={}\nsingle_blocks={}\nd_txt={}\npatch={}\nresolution={}\n",
            self.stage.as_str(),
            self.prompt_config.as_str(),
            self.paired,
            self.lr,
            self.accum_steps,
            self.batch_per_step,
            self.max_steps,
            self.seed,
            self.checkpoint_every,
            self.guidance,
            self.model.d_model,
            self.model.heads,
            self.model.dual_blocks,
            self.model.single_blocks,
            self.model.d_txt,
            self.model.patch,
            self.model.resolution,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut stage_seen = false;
        let mut prompt_seen = false;
        let mut paired_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainerError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let bad = |e: String| TrainerError::Config(format!("line {}: {e}", lineno + 1));
            let parse_usize =
                |v: &str| v.parse::<usize>().map_err(|e| bad(format!("'{v}': {e}")));
            match key.trim() {
                "stage" => {
                    cfg.stage = Stage::parse(value.trim())?;
                    stage_seen = true;
                }
                "prompt_config" => {
                    cfg.prompt_config = PromptConfig::parse(value.trim())?;
                    prompt_seen = true;
                }
                "paired" => {
                    cfg.paired = value
                        .trim()
                        .parse::<bool>()
                        .map_err(|e| bad(format!("'{value}': {e}")))?;
                    paired_seen = true;
                }
                "lr" => cfg.lr = value.trim().parse().map_err(|e| bad(format!("'{value}': {e}")))?,
                "accum_steps" => cfg.accum_steps = parse_usize(value.trim())?,
                "batch_per_step" => cfg.batch_per_step = parse_usize(value.trim())?,
                "max_steps" => cfg.max_steps = parse_usize(value.trim())?,
                "seed" => {
                    cfg.seed = value
                        .trim()
                        .parse::<u64>()
                        .map_err(|e| bad(format!("'{value}': {e}")))?
                }
                "checkpoint_every" => cfg.checkpoint_every = parse_usize(value.trim())?,
                "guidance" => {
                    cfg.guidance = value
                        .trim()
                        .parse()
                        .map_err(|e| bad(format!("'{value}': {e}")))?
                }
                "d_model" => cfg.model.d_model = parse_usize(value.trim())?,
                "heads" => cfg.model.heads = parse_usize(value.trim())?,
                "dual_blocks" => cfg.model.dual_blocks = parse_usize(value.trim())?,
                "single_blocks" => cfg.model.single_blocks = parse_usize(value.trim())?,
                "d_txt" => cfg.model.d_txt = parse_usize(value.trim())?,
                "patch" => cfg.model.patch = parse_usize(value.trim())?,
                "resolution" => cfg.model.resolution = parse_usize(value.trim())?,
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        // stage-dependent defaults when the file sets only the stage
        if stage_seen && cfg.stage == Stage::Cooldown {
            if !prompt_seen {
                cfg.prompt_config = PromptConfig::TextGlyphStyle;
            }
            if !paired_seen {
                cfg.paired = true;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Checkpointing helpers ─────────────────────────────────────────────

/// Hex SHA-256 over the frozen components (the codec matrix). Training
/// must never change this.
pub fn frozen_checksum(codec: &LatentCodec) -> String {
    let mut hasher = Sha256::new();
    hasher.update(codec.matrix().to_le_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Full checkpoint map: backbone params, the frozen codec, the config
/// descriptor, and (when given) optimizer state and progress.
pub fn checkpoint_map(
    params: &ModelParams,
    codec: &LatentCodec,
    model: &ModelConfig,
    optim: Option<(&OptimizerState, u64)>,
) -> BTreeMap<String, Tensor> {
    let mut entries = params.to_map();
    entries.insert("codec.W".into(), codec.matrix().clone());
    entries.insert("config.meta".into(), model.to_meta_tensor());
    if let Some((state, next_step)) = optim {
        for (name, t) in &state.m {
            entries.insert(format!("optim.m.{name}"), t.clone());
        }
        for (name, t) in &state.v {
            entries.insert(format!("optim.v.{name}"), t.clone());
        }
        entries.insert(
            "optim.counters".into(),
            Tensor::new(vec![2], vec![state.step as f32, state.skipped as f32])
                .expect("two values"),
        );
        entries.insert(
            "train.progress".into(),
            Tensor::new(vec![1], vec![next_step as f32]).expect("one value"),
        );
    }
    entries
}

/// Split a checkpoint map back into parts. Entries outside the backbone
/// namespace (`codec.*`, `config.*`, `optim.*`, `train.*`) are separated
/// out; everything else is a parameter tensor.
pub struct LoadedCheckpoint {
    pub params: ModelParams,
    pub codec: LatentCodec,
    pub model: ModelConfig,
    pub optim: Option<(OptimizerState, u64)>,
}

pub fn split_checkpoint(entries: BTreeMap<String, Tensor>) -> Result<LoadedCheckpoint> {
    let codec_w = entries
        .get("codec.W")
        .ok_or_else(|| TrainerError::CheckpointMismatch("missing codec.W".into()))?
        .clone();
    let codec = LatentCodec::from_matrix(codec_w)?;
    let meta = entries
        .get("config.meta")
        .ok_or_else(|| TrainerError::CheckpointMismatch("missing config.meta".into()))?;
    let model = ModelConfig::from_meta_tensor(meta)?;

    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut counters = None;
    let mut progress = None;
    for (name, tensor) in entries {
        if let Some(rest) = name.strip_prefix("optim.m.") {
            m.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("optim.v.") {
            v.insert(rest.to_string(), tensor);
        } else if name == "optim.counters" {
            counters = Some(tensor);
        } else if name == "train.progress" {
            progress = Some(tensor);
        } else if name == "codec.W" || name == "config.meta" {
            // handled above
        } else {
            params.insert(name, tensor);
        }
    }
    let optim = match (counters, progress) {
        (Some(c), Some(p)) => {
            let state = OptimizerState {
                m,
                v,
                step: c.data()[0] as u64,
                skipped: c.data()[1] as u64,
            };
            Some((state, p.data()[0] as u64))
        }
        _ => None,
    };
    Ok(LoadedCheckpoint {
        params: ModelParams::from_map(params),
        codec,
        model,
        optim,
    })
}

// ── Training ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub lr: f32,
}

pub fn loss_log_to_text(log: &[LogLine]) -> String {
    let mut out = String::new();
    for line in log {
        out.push_str(&format!("{} {:.6} {:.8}\n", line.step, line.loss, line.lr));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub loss_log: Vec<LogLine>,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
}

struct PreparedSample {
    bundle: PromptBundle,
    /// Image whose latent anchors the velocity target: the (edited ==
    /// source) scene for pretraining, the edited image for cooldown.
    target_image: ImageBuffer,
    /// Present only for cooldown: the source image latent's anchor.
    source_image: Option<ImageBuffer>,
}

fn prepare_samples(
    cfg: &TrainConfig,
    manifest: &Manifest,
    base: &Path,
) -> Result<Vec<PreparedSample>> {
    let records: Vec<&ManifestRecord> = manifest.records.iter().collect();
    if records.is_empty() {
        return Err(TrainerError::Invalid {
            op: "train_stage",
            msg: "no training records".into(),
        });
    }
    let mut prepared = Vec::with_capacity(records.len());
    for record in records {
        if cfg.stage == Stage::Cooldown && !record.is_paired() {
            return Err(TrainerError::UnpairedCooldown(record.id.clone()));
        }
        let (source, edited, mask) = dataset::load_record(base, record)?;
        if source.height() != cfg.model.resolution || source.width() != cfg.model.resolution {
            return Err(TrainerError::Invalid {
                op: "train_stage",
                msg: format!(
                    "record '{}' is {}x{}, config resolution is {}",
                    record.id,
                    source.height(),
                    source.width(),
                    cfg.model.resolution
                ),
            });
        }
        // conditioning always comes from the source side; the glyph and
        // content text are the target text
        let bundle = build_prompt_bundle(
            &source,
            &mask,
            &record.target_text,
            &record.language,
            cfg.prompt_config,
            cfg.model.resolution,
            None,
        )?;
        prepared.push(PreparedSample {
            bundle,
            target_image: edited,
            source_image: (cfg.stage == Stage::Cooldown).then_some(source),
        });
    }
    Ok(prepared)
}

/// Run one stage: seeded, resumable, and frozen-component preserving.
/// Writes `checkpoint_{step}.mste`, `checkpoint_final.mste` and
/// `loss_log.txt` under `out_dir` when given.
pub fn train_stage(
    cfg: &TrainConfig,
    manifest: &Manifest,
    base: &Path,
    init: Option<LoadedCheckpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let codec = LatentCodec::standard();
    cfg.model.validate(&codec)?;

    let (mut params, mut optimizer, start_step) = match init {
        Some(loaded) => {
            if loaded.model != cfg.model {
                return Err(TrainerError::CheckpointMismatch(format!(
                    "checkpoint model {:?} vs configured {:?}",
                    loaded.model, cfg.model
                )));
            }
            if !loaded.codec.matrix().bitwise_eq(codec.matrix()) {
                return Err(TrainerError::CheckpointMismatch(
                    "checkpoint codec differs from the frozen codec".into(),
                ));
            }
            let fresh = ModelParams::init(&cfg.model, &codec, derive_seed(cfg.seed, &[INIT_TAG]))?;
            for name in fresh.names() {
                if loaded.params.get(name).is_none() {
                    return Err(TrainerError::CheckpointMismatch(format!(
                        "checkpoint is missing parameter '{name}'"
                    )));
                }
            }
            match loaded.optim {
                Some((state, next)) => (loaded.params, state, next as usize),
                None => {
                    let state = OptimizerState::new(&loaded.params);
                    (loaded.params, state, 0)
                }
            }
        }
        None => {
            let params = ModelParams::init(&cfg.model, &codec, derive_seed(cfg.seed, &[INIT_TAG]))?;
            let state = OptimizerState::new(&params);
            (params, state, 0)
        }
    };

    let checksum_before = frozen_checksum(&codec);
    let samples = prepare_samples(cfg, manifest, base)?;
    let adamw = AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    };

    let mut loss_log = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for step in start_step..cfg.max_steps {
        let mut grad_sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0f64;
        let micro_total = cfg.accum_steps * cfg.batch_per_step;

        for micro in 0..micro_total {
            let mut stream = Stream::new(derive_seed(
                cfg.seed,
                &[TRAIN_TAG, step as u64, micro as u64],
            ));
            let sample = &samples[stream.next_below(samples.len())];
            let t = stream.next_unit() as f32;
            let noise_seed = stream.next_u64();

            let point = match cfg.stage {
                Stage::Pretrain => flow::build_training_point(
                    &sample.bundle,
                    &sample.target_image,
                    t,
                    noise_seed,
                    &codec,
                )?,
                Stage::Cooldown => {
                    let source = sample
                        .source_image
                        .as_ref()
                        .expect("cooldown samples carry the source image");
                    flow::build_cooldown_point(
                        &sample.bundle,
                        source,
                        &sample.target_image,
                        t,
                        &codec,
                    )?
                    .0
                }
            };

            let vis_tokens = backbone::patchify(&point.composite, cfg.model.patch)?;
            let target_tokens = backbone::patchify(&point.velocity_target, cfg.model.patch)?;
            let txt_tokens = sample.bundle.text_tokens()?;

            let mut tape = GradTape::new();
            let bound = params.bind(&mut tape);
            let vis = tape.leaf(&vis_tokens);
            let txt = tape.leaf(&txt_tokens);
            let feat = tape.leaf(&cond_features(t, cfg.guidance));
            let pred = backbone::forward_tokens(&mut tape, &bound, &cfg.model, vis, txt, feat)?;
            let target = tape.leaf(&target_tokens);
            let loss = tape.squared_error(pred, target)?;
            loss_sum += tape.value(loss).scalar()? as f64;

            let vars: Vec<(String, crate::tensor::Var)> =
                bound.iter().map(|(n, v)| (n.clone(), *v)).collect();
            let grads = tape.backward(loss)?;
            for (name, var) in vars {
                if let Some(g) = grads.get(var) {
                    match grad_sum.get_mut(&name) {
                        Some(acc) => *acc = ops::add(acc, g)?,
                        None => {
                            grad_sum.insert(name, g.clone());
                        }
                    }
                }
            }
        }

        let scale = 1.0 / micro_total as f32;
        let mut grads = BTreeMap::new();
        for (name, g) in grad_sum {
            grads.insert(name, ops::scalar_mul(&g, scale)?);
        }
        adamw_step(&mut params, &grads, &mut optimizer, &adamw)?;

        let line = LogLine {
            step: step + 1,
            loss: loss_sum / micro_total as f64,
            lr: cfg.lr,
        };
        loss_log.push(line);

        if let Some(dir) = out_dir {
            let done = step + 1;
            if done % cfg.checkpoint_every == 0 && done < cfg.max_steps {
                let entries =
                    checkpoint_map(&params, &codec, &cfg.model, Some((&optimizer, done as u64)));
                backbone::save_checkpoint(&dir.join(format!("checkpoint_{done:06}.mste")), &entries)?;
            }
        }
    }

    let checksum_after = frozen_checksum(&codec);
    if checksum_after != checksum_before {
        return Err(TrainerError::Invalid {
            op: "train_stage",
            msg: "frozen component checksum changed during training".into(),
        });
    }

    if let Some(dir) = out_dir {
        let entries = checkpoint_map(
            &params,
            &codec,
            &cfg.model,
            Some((&optimizer, cfg.max_steps as u64)),
        );
        backbone::save_checkpoint(&dir.join("checkpoint_final.mste"), &entries)?;
        // full log for this invocation; resumed runs append to the tail
        let log_path = dir.join("loss_log.txt");
        let mut text = String::new();
        if start_step > 0 && log_path.exists() {
            let existing = std::fs::read_to_string(&log_path)?;
            for line in existing.lines().take(start_step) {
                text.push_str(line);
                text.push('\n');
            }
        }
        text.push_str(&loss_log_to_text(&loss_log));
        std::fs::write(&log_path, text)?;
    }

    Ok(TrainOutcome {
        params,
        optimizer,
        loss_log,
        frozen_checksum_before: checksum_before,
        frozen_checksum_after: checksum_after,
    })
}

// ── Incremental multilingual protocol ─────────────────────────────────

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub order: Vec<String>,
    /// Optimizer steps per protocol stage.
    pub steps_per_stage: usize,
    /// Cap on evaluated samples per language.
    pub eval_per_language: usize,
    pub sampler_steps: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolEntry {
    pub language: String,
    /// Number of languages seen when this evaluation ran.
    pub step: usize,
    pub seq_acc: f64,
}

#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub order: Vec<String>,
    pub entries: Vec<ProtocolEntry>,
}

impl ProtocolReport {
    pub fn get(&self, language: &str, step: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.language == language && e.step == step)
            .map(|e| e.seq_acc)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("order={}\n", self.order.join(","));
        for e in &self.entries {
            out.push_str(&format!(
                "lang={} step={} seq_acc={:.6}\n",
                e.language, e.step, e.seq_acc
            ));
        }
        out
    }

    /// Lower-triangular matrix: rows are languages, columns the number of
    /// languages seen; entries exist only once the row's language has
    /// been introduced.
    pub fn render_matrix(&self) -> String {
        let mut out = String::from("language      ");
        for k in 1..=self.order.len() {
            out.push_str(&format!("{k:>8}"));
        }
        out.push('\n');
        for (row, language) in self.order.iter().enumerate() {
            out.push_str(&format!("{language:<14}"));
            for k in 1..=self.order.len() {
                match self.get(language, k) {
                    Some(v) => out.push_str(&format!("{v:>8.4}")),
                    None => {
                        let _ = row;
                        out.push_str(&format!("{:>8}", "-"));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Sample edits for a manifest slice and score exact-match accuracy.
#[allow(clippy::too_many_arguments)]
pub fn eval_seq_acc(
    params: &ModelParams,
    model: &ModelConfig,
    codec: &LatentCodec,
    records: &[ManifestRecord],
    base: &Path,
    prompt_config: PromptConfig,
    sampler_steps: usize,
    guidance: f32,
    seed: u64,
) -> Result<f64> {
    use rayon::prelude::*;
    if records.is_empty() {
        return Err(TrainerError::Invalid {
            op: "eval_seq_acc",
            msg: "no eval records".into(),
        });
    }
    let evals: Vec<EvalRecord> = records
        .par_iter()
        .enumerate()
        .map(|(i, record)| -> Result<EvalRecord> {
            let (source, _, mask) = dataset::load_record(base, record)?;
            let bundle = build_prompt_bundle(
                &source,
                &mask,
                &record.target_text,
                &record.language,
                prompt_config,
                model.resolution,
                None,
            )?;
            let sampler = SamplerConfig {
                steps: sampler_steps,
                guidance,
                seed: derive_seed(seed, &[EVAL_TAG, i as u64]),
            };
            let output = flow::sample(params, model, codec, &bundle, &sampler)?;
            let font = glyphs::fonts().by_name(&record.language)?;
            let bbox = mask_bbox(&mask)?;
            let predicted_text = glyphs::recognize(&crop(&output, bbox)?, font);
            Ok(EvalRecord {
                predicted_text,
                ground_truth: record.target_text.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(seq_acc(&evals)?)
}

/// Sequentially add languages in the given order; after each stage,
/// evaluate Seq. ACC for every language introduced so far.
pub fn incremental_protocol(
    cfg: &ProtocolConfig,
    manifest: &Manifest,
    base: &Path,
) -> Result<ProtocolReport> {
    if cfg.order.is_empty() {
        return Err(TrainerError::Invalid {
            op: "incremental_protocol",
            msg: "empty language order".into(),
        });
    }
    let codec = LatentCodec::standard();
    for language in &cfg.order {
        glyphs::fonts().by_name(language)?;
        let train_count = manifest
            .records
            .iter()
            .filter(|r| &r.language == language && r.split == "train")
            .count();
        let test_count = manifest
            .records
            .iter()
            .filter(|r| &r.language == language && r.split == "test")
            .count();
        if train_count == 0 || test_count == 0 {
            return Err(TrainerError::Invalid {
                op: "incremental_protocol",
                msg: format!(
                    "language '{language}' needs train and test records, have {train_count}/{test_count}"
                ),
            });
        }
    }

    let train_split = manifest.of_split("train");
    let test_split = manifest.of_split("test");
    let mut entries = Vec::new();
    let mut carried: Option<LoadedCheckpoint> = None;

    for k in 1..=cfg.order.len() {
        let active = dataset::language_schedule(&cfg.order, k)?;
        let mixed = Manifest {
            records: train_split
                .records
                .iter()
                .filter(|r| active.contains(&r.language))
                .cloned()
                .collect(),
        };
        let stage_cfg = TrainConfig {
            max_steps: cfg.steps_per_stage,
            seed: derive_seed(cfg.train.seed, &[0x50524f54, k as u64]),
            ..cfg.train.clone()
        };
        let outcome = train_stage(&stage_cfg, &mixed, base, carried.take(), None)?;

        for language in active {
            let records: Vec<ManifestRecord> = test_split
                .records
                .iter()
                .filter(|r| &r.language == language)
                .take(cfg.eval_per_language)
                .cloned()
                .collect();
            let acc = eval_seq_acc(
                &outcome.params,
                &cfg.train.model,
                &codec,
                &records,
                base,
                cfg.train.prompt_config,
                cfg.sampler_steps,
                cfg.train.guidance,
                derive_seed(cfg.train.seed, &[EVAL_TAG, k as u64]),
            )?;
            entries.push(ProtocolEntry {
                language: language.clone(),
                step: k,
                seq_acc: acc,
            });
        }

        carried = Some(LoadedCheckpoint {
            params: outcome.params,
            codec: LatentCodec::standard(),
            model: cfg.train.model.clone(),
            optim: None,
        });
    }

    Ok(ProtocolReport {
        order: cfg.order.clone(),
        entries,
    })
}
