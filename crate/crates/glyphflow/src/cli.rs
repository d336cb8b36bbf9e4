//! Command-line surface for batch use.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
//! Errors go to stderr; machine-readable results go to files only.
//! `GLYPHFLOW_THREADS` caps internal per-sample parallelism.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::backbone;
use crate::dataset::{self, Manifest, SceneConfig, SynthConfig, Thresholds};
use crate::encoders::LatentCodec;
use crate::flow::{self, FlowError, SamplerConfig};
use crate::glyphs;
use crate::imaging::{load_mask_png, load_png, save_mask_png, save_png};
use crate::metrics::{self, MetricsError};
use crate::tensor::{gft, TensorError};
use crate::trainer::{
    self, incremental_protocol, PromptConfig, ProtocolConfig, TrainConfig, TrainerError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "glyphflow",
    version,
    about = "Scene text editing at desk scale: synthesize data, train the velocity model, edit images, evaluate.",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render text as a white-on-black glyph line PNG.
    RenderGlyph {
        /// Text to render; every codepoint must be mapped by the font.
        #[arg(long)]
        text: String,
        /// Alphabet name (see `--help` of synth-data for the list).
        #[arg(long, default_value = "english")]
        font: String,
        /// Integer upscaling factor.
        #[arg(long, default_value_t = 1)]
        scale: usize,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the conditioning planes and text embeddings for one sample.
    MakePrompts {
        /// Source image (square PNG, gray or RGB).
        #[arg(long)]
        image: PathBuf,
        /// Edit-region mask PNG.
        #[arg(long)]
        mask: PathBuf,
        /// Target text.
        #[arg(long)]
        text: String,
        /// Prompt configuration: text_only, text_glyph, text_style or
        /// text_glyph_style.
        #[arg(long, default_value = "text_glyph_style")]
        config: String,
        /// Directory for the plane PNGs and embedding tensors.
        #[arg(long)]
        out_dir: PathBuf,
        /// Alphabet of the target text.
        #[arg(long, default_value = "english")]
        lang: String,
        /// Style text prompt; defaults to the target text.
        #[arg(long)]
        style_text: Option<String>,
    },
    /// Generate a synthetic scene or pair dataset with a manifest.
    SynthData {
        /// Comma-separated alphabet names (arabic, english, french,
        /// chinese, german, korean, japanese, italian, bengali, hindi,
        /// russian, thai, swahili).
        #[arg(long)]
        langs: String,
        /// Records per language.
        #[arg(long)]
        count: usize,
        /// Generate source/edited pairs instead of plain scenes.
        #[arg(long, default_value_t = false)]
        paired: bool,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Canvas edge in pixels.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Fraction of records moved to the test split.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Extra out-of-vocabulary eval records per language, as a
        /// fraction of count.
        #[arg(long, default_value_t = 0.1)]
        oov_fraction: f64,
    },
    /// Run the three pair validators over a manifest.
    ValidatePairs {
        /// Path to manifest.txt (images resolve relative to it).
        #[arg(long)]
        manifest: PathBuf,
        /// Override thresholds, e.g. "region=0.0078,style=0.1,dilate=2".
        #[arg(long)]
        thresholds: Option<String>,
    },
    /// Train one stage from a key=value config file.
    Train {
        /// Training config file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory containing manifest.txt.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this run's checkpoint_final.mste.
        #[arg(long, default_value_t = false)]
        resume: bool,
        /// Initialize from an existing checkpoint (e.g. a pretrained one
        /// before cooldown).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Edit the masked region of an image to show new text.
    Edit {
        /// Model checkpoint (.mste).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source image PNG at the model's working resolution.
        #[arg(long)]
        image: PathBuf,
        /// Edit-region mask PNG.
        #[arg(long)]
        mask: PathBuf,
        /// Replacement text.
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 30.0)]
        guidance: f32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output PNG path.
        #[arg(long, default_value = "edited.png")]
        out: PathBuf,
        /// Alphabet of the replacement text.
        #[arg(long, default_value = "english")]
        lang: String,
        /// Prompt configuration used to build conditioning.
        #[arg(long, default_value = "text_glyph_style")]
        prompt_config: String,
        /// Style text prompt; defaults to the replacement text.
        #[arg(long)]
        style_text: Option<String>,
        /// Dump the latent after every sampler step as GFT1 tensors.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Score predictions against a manifest: Seq. ACC, NED, Frechet.
    Eval {
        /// Directory of `{id}.pred.png` files.
        #[arg(long)]
        pred_dir: PathBuf,
        /// Path to manifest.txt.
        #[arg(long)]
        manifest: PathBuf,
        /// Report file (key=value text).
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Incremental multilingual protocol: add languages one by one and
    /// re-evaluate every language seen so far.
    Protocol {
        /// Comma-separated language order.
        #[arg(long)]
        order: String,
        /// Dataset directory containing manifest.txt.
        #[arg(long)]
        data: PathBuf,
        /// Training config file; its max_steps is the per-stage budget.
        #[arg(long)]
        config: PathBuf,
        /// Report file.
        #[arg(long)]
        out_report: PathBuf,
        /// Cap on evaluated test samples per language.
        #[arg(long, default_value_t = 32)]
        eval_per_language: usize,
        /// Sampler steps during evaluation.
        #[arg(long, default_value_t = 30)]
        sampler_steps: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Glyph(#[from] glyphs::GlyphError),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Backbone(#[from] backbone::BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} pairs failed validation")]
    ValidationFailed(usize),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Flow(FlowError::NonFinite { .. })
            | CliError::Tensor(TensorError::NonFinite { .. })
            | CliError::Metrics(MetricsError::NonFinite)
            | CliError::Trainer(TrainerError::Flow(FlowError::NonFinite { .. })) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

fn init_thread_pool() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        if let Ok(value) = std::env::var("GLYPHFLOW_THREADS") {
            if let Ok(threads) = value.parse::<usize>() {
                if threads >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build_global();
                }
            }
        }
    });
}

/// Top-level help text, used by the golden-file test.
pub fn help_text() -> String {
    use clap::CommandFactory;
    Cli::command().render_long_help().to_string()
}

/// Per-subcommand help text.
pub fn subcommand_help(name: &str) -> Option<String> {
    use clap::CommandFactory;
    let mut cmd = Cli::command();
    let sub = cmd.find_subcommand_mut(name)?;
    Some(sub.render_long_help().to_string())
}

/// Parse argv and run. Returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_thread_pool();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{e}");
                    EXIT_USAGE
                }
            }
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::RenderGlyph {
            text,
            font,
            scale,
            out,
        } => {
            let font = glyphs::fonts().by_name(&font)?;
            let map = glyphs::render_line(&text, font, scale)?;
            save_png(&out, &map.image)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::MakePrompts {
            image,
            mask,
            text,
            config,
            out_dir,
            lang,
            style_text,
        } => {
            let prompt_config = PromptConfig::parse(&config)?;
            let img = load_png(&image)?;
            if img.height() != img.width() {
                return Err(data_err(format!(
                    "image must be square, got {}x{}",
                    img.height(),
                    img.width()
                )));
            }
            let img = if img.channels() == 1 {
                img.broadcast_channels(3)?
            } else {
                img
            };
            let mask_img = load_mask_png(&mask)?;
            let bundle = trainer::build_prompt_bundle(
                &img,
                &mask_img,
                &text,
                &lang,
                prompt_config,
                img.height(),
                style_text.as_deref(),
            )?;
            std::fs::create_dir_all(&out_dir)?;
            save_png(&out_dir.join("glyph.png"), &bundle.glyph_plane)?;
            save_png(&out_dir.join("style.png"), &bundle.style_plane)?;
            save_png(&out_dir.join("masked.png"), &bundle.masked_plane)?;
            save_mask_png(&out_dir.join("mask.png"), &bundle.mask)?;
            gft::save(&out_dir.join("content_emb.gft"), &bundle.content_embedding)?;
            gft::save(&out_dir.join("style_emb.gft"), &bundle.style_embedding)?;
            println!("wrote prompt bundle to {}", out_dir.display());
            Ok(())
        }

        Command::SynthData {
            langs,
            count,
            paired,
            out,
            seed,
            resolution,
            test_fraction,
            oov_fraction,
        } => {
            let languages: Vec<String> = langs
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            let cfg = SynthConfig {
                languages,
                count,
                paired,
                seed,
                scene: SceneConfig {
                    resolution,
                    ..SceneConfig::default()
                },
                test_fraction,
                oov_fraction,
            };
            let manifest = dataset::generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} records to {}",
                manifest.records.len(),
                out.join("manifest.txt").display()
            );
            Ok(())
        }

        Command::ValidatePairs {
            manifest,
            thresholds,
        } => {
            let base = manifest_base(&manifest)?;
            let manifest = Manifest::load(&manifest)?;
            let thresholds = parse_thresholds(thresholds.as_deref())?;
            let mut failed = 0usize;
            let mut checked = 0usize;
            for record in &manifest.records {
                if !record.is_paired() {
                    continue;
                }
                let (src, edit, mask) = dataset::load_record(&base, record)?;
                let verdict = dataset::validate_pair(
                    &src,
                    &edit,
                    &mask,
                    &record.target_text,
                    &record.language,
                    &thresholds,
                )?;
                checked += 1;
                if !verdict.all() {
                    failed += 1;
                    eprintln!(
                        "fail {}: region_ok={} text_ok={} style_ok={}",
                        record.id, verdict.region_ok, verdict.text_ok, verdict.style_ok
                    );
                }
            }
            println!("validated {checked} pairs, {failed} failed");
            if failed > 0 {
                return Err(CliError::ValidationFailed(failed));
            }
            Ok(())
        }

        Command::Train {
            config,
            data,
            out,
            resume,
            init,
        } => {
            let cfg = TrainConfig::from_text(&std::fs::read_to_string(&config)?)?;
            let manifest = Manifest::load(&data.join("manifest.txt"))?;
            let train_split = manifest.of_split("train");
            let initial = if resume {
                let path = out.join("checkpoint_final.mste");
                if !path.exists() {
                    return Err(data_err(format!(
                        "--resume: no checkpoint at {}",
                        path.display()
                    )));
                }
                Some(trainer::split_checkpoint(backbone::load_checkpoint(&path)?)?)
            } else if let Some(path) = init {
                let mut loaded = trainer::split_checkpoint(backbone::load_checkpoint(&path)?)?;
                loaded.optim = None; // a new stage starts fresh
                Some(loaded)
            } else {
                None
            };
            let outcome = trainer::train_stage(&cfg, &train_split, &data, initial, Some(&out))?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoints in {}",
                outcome.loss_log.last().map(|l| l.step).unwrap_or(0),
                outcome.loss_log.last().map(|l| l.loss).unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }

        Command::Edit {
            checkpoint,
            image,
            mask,
            text,
            steps,
            guidance,
            seed,
            out,
            lang,
            prompt_config,
            style_text,
            trace_dir,
        } => {
            let prompt_config = PromptConfig::parse(&prompt_config)?;
            let loaded = trainer::split_checkpoint(backbone::load_checkpoint(&checkpoint)?)?;
            let img = load_png(&image)?;
            let img = if img.channels() == 1 {
                img.broadcast_channels(3)?
            } else {
                img
            };
            if img.height() != loaded.model.resolution || img.width() != loaded.model.resolution {
                return Err(data_err(format!(
                    "image is {}x{}, checkpoint works at {0}x{0}",
                    loaded.model.resolution,
                    img.height(),
                )));
            }
            let mask_img = load_mask_png(&mask)?;
            let bundle = trainer::build_prompt_bundle(
                &img,
                &mask_img,
                &text,
                &lang,
                prompt_config,
                loaded.model.resolution,
                style_text.as_deref(),
            )?;
            let sampler = SamplerConfig {
                steps,
                guidance,
                seed,
            };
            let edited = flow::sample_traced(
                &loaded.params,
                &loaded.model,
                &loaded.codec,
                &bundle,
                &sampler,
                trace_dir.as_deref(),
            )?;
            save_png(&out, &edited)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::Eval {
            pred_dir,
            manifest,
            out_report,
        } => {
            let base = manifest_base(&manifest)?;
            let manifest = Manifest::load(&manifest)?;
            let report = metrics::evaluate(&pred_dir, &manifest, &base)?;
            std::fs::write(&out_report, report.to_text())?;
            println!("{}", report.render_table());
            println!("report written to {}", out_report.display());
            Ok(())
        }

        Command::Protocol {
            order,
            data,
            config,
            out_report,
            eval_per_language,
            sampler_steps,
        } => {
            let train = TrainConfig::from_text(&std::fs::read_to_string(&config)?)?;
            let order: Vec<String> = order
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            let manifest = Manifest::load(&data.join("manifest.txt"))?;
            let cfg = ProtocolConfig {
                order,
                steps_per_stage: train.max_steps,
                eval_per_language,
                sampler_steps,
                train,
            };
            let report = incremental_protocol(&cfg, &manifest, &data)?;
            std::fs::write(&out_report, report.to_text())?;
            println!("{}", report.render_matrix());
            println!("report written to {}", out_report.display());
            Ok(())
        }
    }
}

fn manifest_base(manifest: &Path) -> std::result::Result<PathBuf, CliError> {
    Ok(manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from(".")))
}

fn parse_thresholds(spec: Option<&str>) -> std::result::Result<Thresholds, CliError> {
    let mut thresholds = Thresholds::default();
    let Some(spec) = spec else {
        return Ok(thresholds);
    };
    for part in spec.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| data_err(format!("thresholds: expected key=value, got '{part}'")))?;
        match key.trim() {
            "region" => {
                thresholds.region_tol = value
                    .trim()
                    .parse()
                    .map_err(|e| data_err(format!("thresholds region: {e}")))?
            }
            "style" => {
                thresholds.style_tol = value
                    .trim()
                    .parse()
                    .map_err(|e| data_err(format!("thresholds style: {e}")))?
            }
            "dilate" => {
                thresholds.dilate_px = value
                    .trim()
                    .parse()
                    .map_err(|e| data_err(format!("thresholds dilate: {e}")))?
            }
            other => return Err(data_err(format!("thresholds: unknown key '{other}'"))),
        }
    }
    Ok(thresholds)
}

// The frozen codec is reconstructed from checkpoints on load; referencing
// it here keeps the CLI honest about which codec the artifacts embed.
#[allow(dead_code)]
fn codec_fingerprint() -> String {
    trainer::frozen_checksum(&LatentCodec::standard())
}
