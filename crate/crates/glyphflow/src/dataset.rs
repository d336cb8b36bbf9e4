//! Synthetic scene-text data: generation, paired-sample construction, the
//! three pair validators, manifests, splits and the language schedule.
//!
//! A scene is a low-frequency gradient background (plus bounded Gaussian
//! noise, everything clamped below 0.35) with bright text (grayscale mean
//! in [0.65, 0.95]) rendered at a random position and scale, and a mask
//! equal to the text's bounding box dilated by 2 px. Bright-on-dark is a
//! generator contract: it keeps the recognizer's fixed 0.5 binarization
//! threshold exact, and the worst-case foreground/background contrast at
//! 0.30.
//!
//! A paired sample re-renders the same background, color, scale and
//! position with a different same-length-or-shorter text, so off-mask
//! pixels are bit-identical and only the text content changes.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::glyphs::{self, BitmapFont, GlyphError, ADVANCE, GLYPH_HEIGHT};
use crate::imaging::{
    crop, load_mask_png, load_png, mask_bbox, save_mask_png, save_png, BinaryMask,
    ImageBuffer, ImagingError, Rect,
};
use crate::tensor::rng::{derive_seed, Stream};

const SCENE_TAG: u64 = 0x5343;
const PAIR_TAG: u64 = 0x5052;
const OOV_TAG: u64 = 0x4f4f56;

/// Margin kept between the dilated mask and the canvas edge.
const EDGE_MARGIN: usize = 2;
/// Mask dilation around the text bounding box.
pub const MASK_DILATION: usize = 2;
/// Background values never exceed this (noise included).
const BG_CEILING: f32 = 0.35;
const BG_CORNER_LO: f32 = 0.05;
const BG_CORNER_HI: f32 = 0.28;
const NOISE_AMPLITUDE: f32 = 0.05;
const FG_LUM_LO: f32 = 0.65;
const FG_LUM_HI: f32 = 0.95;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("text '{text}' does not fit a {resolution}x{resolution} canvas after {attempts} attempts")]
    TextTooLarge {
        text: String,
        resolution: usize,
        attempts: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Glyph(#[from] GlyphError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Shared visual style of a source/edited pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStyle {
    pub fg: [f32; 3],
    pub scale: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ImageBuffer,
    pub mask: BinaryMask,
    pub text: String,
    pub language: String,
    pub style: SceneStyle,
}

/// Source and edited scene sharing style, mask and background.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub source: Scene,
    pub edited: Scene,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub resolution: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Glyph scales the generator may pick from.
    pub scales: Vec<usize>,
    /// Keep held-out codepoints out of sampled texts.
    pub exclude_oov: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            resolution: 64,
            min_len: 2,
            max_len: 5,
            scales: vec![1, 2],
            exclude_oov: true,
        }
    }
}

/// Codepoints held out of training texts: the first tenth (rounded up) of
/// a seeded shuffle of the alphabet, fixed per language.
pub fn holdout_codepoints(font: &BitmapFont) -> Vec<char> {
    let mut cps = font.codepoints();
    let position = glyphs::fonts().position(font.name()).unwrap_or(0);
    Stream::new(derive_seed(OOV_TAG, &[position as u64])).shuffle(&mut cps);
    let n = font.len().div_ceil(10);
    let mut held: Vec<char> = cps.into_iter().take(n).collect();
    held.sort_unstable();
    held
}

fn usable_codepoints(font: &BitmapFont, exclude_oov: bool) -> Vec<char> {
    if !exclude_oov {
        return font.codepoints();
    }
    let held: BTreeSet<char> = holdout_codepoints(font).into_iter().collect();
    font.codepoints()
        .into_iter()
        .filter(|c| !held.contains(c))
        .collect()
}

fn text_box(len: usize, scale: usize) -> (usize, usize) {
    (GLYPH_HEIGHT * scale, (len * ADVANCE - 1) * scale)
}

fn fits(len: usize, scale: usize, resolution: usize) -> bool {
    let (h, w) = text_box(len, scale);
    let margin = 2 * (MASK_DILATION + EDGE_MARGIN);
    h + margin <= resolution && w + margin <= resolution
}

/// Bilinear four-corner gradient plus clamped Gaussian noise.
fn background(resolution: usize, stream: &mut Stream) -> ImageBuffer {
    let corners: Vec<[f64; 3]> = (0..4)
        .map(|_| {
            [
                stream.next_range(BG_CORNER_LO as f64, BG_CORNER_HI as f64),
                stream.next_range(BG_CORNER_LO as f64, BG_CORNER_HI as f64),
                stream.next_range(BG_CORNER_LO as f64, BG_CORNER_HI as f64),
            ]
        })
        .collect();
    let mut data = Vec::with_capacity(resolution * resolution * 3);
    let denom = (resolution - 1).max(1) as f64;
    for y in 0..resolution {
        let fy = y as f64 / denom;
        for x in 0..resolution {
            let fx = x as f64 / denom;
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
                let bot = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
                let base = top * (1.0 - fy) + bot * fy;
                let noisy = base + NOISE_AMPLITUDE as f64 * stream.next_gauss();
                data.push((noisy as f32).clamp(0.0, BG_CEILING));
            }
        }
    }
    ImageBuffer::new(resolution, resolution, 3, data).expect("values clamped")
}

/// Random color with an exact grayscale mean drawn from [0.65, 0.95].
fn foreground(stream: &mut Stream) -> [f32; 3] {
    let raw = [
        stream.next_unit() as f32,
        stream.next_unit() as f32,
        stream.next_unit() as f32,
    ];
    let target = stream.next_range(FG_LUM_LO as f64, FG_LUM_HI as f64) as f32;
    let mean = (raw[0] + raw[1] + raw[2]) / 3.0;
    if mean >= target {
        raw.map(|v| v * target / mean)
    } else {
        // lerp toward white to raise the mean exactly to the target
        let w = (target - mean) / (1.0 - mean);
        raw.map(|v| v + (1.0 - v) * w)
    }
}

struct Blueprint {
    background: ImageBuffer,
    style: SceneStyle,
    /// Top-left corner of the rendered text box.
    origin: (usize, usize),
    mask: BinaryMask,
}

fn render_onto(blueprint: &Blueprint, text: &str, font: &BitmapFont) -> Result<ImageBuffer> {
    let glyph_map = glyphs::render_line(text, font, blueprint.style.scale)?;
    let mut image = blueprint.background.clone();
    let (oy, ox) = blueprint.origin;
    for y in 0..glyph_map.image.height() {
        for x in 0..glyph_map.image.width() {
            if glyph_map.image.get(y, x, 0) == 1.0 {
                for c in 0..3 {
                    image.set(oy + y, ox + x, c, blueprint.style.fg[c]);
                }
            }
        }
    }
    Ok(image)
}

fn make_blueprint(
    seed: u64,
    font: &BitmapFont,
    text: Option<&str>,
    style: Option<&SceneStyle>,
    cfg: &SceneConfig,
) -> Result<(Blueprint, String)> {
    let mut stream = Stream::new(derive_seed(seed, &[SCENE_TAG]));
    let background = background(cfg.resolution, &mut stream);

    let usable = usable_codepoints(font, cfg.exclude_oov);
    if usable.is_empty() {
        return Err(DatasetError::Invalid {
            op: "synth_scene",
            msg: format!("no usable codepoints in '{}'", font.name()),
        });
    }

    let (text, mut scale) = match text {
        Some(t) => {
            if t.is_empty() {
                return Err(DatasetError::Invalid {
                    op: "synth_scene",
                    msg: "explicit text must be nonempty".into(),
                });
            }
            for c in t.chars() {
                if font.glyph(c).is_none() {
                    return Err(DatasetError::Glyph(GlyphError::UnmappedCodepoint(
                        c,
                        font.name().to_string(),
                    )));
                }
            }
            let scale = match style {
                Some(s) => s.scale,
                None => cfg.scales[stream.next_below(cfg.scales.len())],
            };
            (t.to_string(), scale)
        }
        None => {
            // longest length that fits at the smallest allowed scale
            let min_scale = *cfg.scales.iter().min().expect("scales nonempty");
            let mut cap = cfg.min_len;
            for len in cfg.min_len..=cfg.max_len {
                if fits(len, min_scale, cfg.resolution) {
                    cap = len;
                }
            }
            if !fits(cfg.min_len, min_scale, cfg.resolution) {
                return Err(DatasetError::TextTooLarge {
                    text: format!("<len {}>", cfg.min_len),
                    resolution: cfg.resolution,
                    attempts: 0,
                });
            }
            let len = cfg.min_len + stream.next_below(cap - cfg.min_len + 1);
            let text: String = (0..len)
                .map(|_| usable[stream.next_below(usable.len())])
                .collect();
            let fitting: Vec<usize> = cfg
                .scales
                .iter()
                .copied()
                .filter(|&s| fits(len, s, cfg.resolution))
                .collect();
            let scale = fitting[stream.next_below(fitting.len())];
            (text, scale)
        }
    };

    // Retry smaller scales when the requested text does not fit.
    let mut attempts = 0;
    while !fits(text.chars().count(), scale, cfg.resolution) {
        attempts += 1;
        if attempts >= 8 || scale == 1 {
            return Err(DatasetError::TextTooLarge {
                text,
                resolution: cfg.resolution,
                attempts,
            });
        }
        scale -= 1;
    }

    let fg = match style {
        Some(s) => s.fg,
        None => foreground(&mut stream),
    };
    let style = SceneStyle { fg, scale };

    let (th, tw) = text_box(text.chars().count(), scale);
    let lo = MASK_DILATION + EDGE_MARGIN;
    let oy = lo + stream.next_below(cfg.resolution - th - 2 * lo + 1);
    let ox = lo + stream.next_below(cfg.resolution - tw - 2 * lo + 1);
    let bbox = Rect::new(ox, oy, ox + tw, oy + th).expect("within canvas");
    let mask = BinaryMask::from_rect(
        cfg.resolution,
        cfg.resolution,
        bbox.dilate(MASK_DILATION, cfg.resolution, cfg.resolution),
    )?;

    Ok((
        Blueprint {
            background,
            style,
            origin: (oy, ox),
            mask,
        },
        text,
    ))
}

/// Generate one scene. Same seed, same bytes.
pub fn synth_scene(
    seed: u64,
    language: &str,
    text: Option<&str>,
    style: Option<&SceneStyle>,
    cfg: &SceneConfig,
) -> Result<Scene> {
    let font = glyphs::fonts().by_name(language)?;
    let (blueprint, text) = make_blueprint(seed, font, text, style, cfg)?;
    let image = render_onto(&blueprint, &text, font)?;
    Ok(Scene {
        image,
        mask: blueprint.mask,
        text,
        language: language.to_string(),
        style: blueprint.style,
    })
}

fn sample_target_text(
    source_text: &str,
    usable: &[char],
    stream: &mut Stream,
) -> String {
    let src_len = source_text.chars().count();
    loop {
        // same length or shorter, floor 1
        let len = 1 + stream.next_below(src_len);
        let candidate: String = (0..len)
            .map(|_| usable[stream.next_below(usable.len())])
            .collect();
        if candidate != source_text {
            return candidate;
        }
    }
}

/// Generate a paired sample: identical background, style and mask, only
/// the text differs (same length or shorter).
pub fn synth_pair(seed: u64, language: &str, cfg: &SceneConfig) -> Result<PairedSample> {
    let font = glyphs::fonts().by_name(language)?;
    let (blueprint, source_text) = make_blueprint(seed, font, None, None, cfg)?;
    let mut stream = Stream::new(derive_seed(seed, &[PAIR_TAG]));
    let usable = usable_codepoints(font, cfg.exclude_oov);
    let target_text = sample_target_text(&source_text, &usable, &mut stream);

    let source_image = render_onto(&blueprint, &source_text, font)?;
    let edited_image = render_onto(&blueprint, &target_text, font)?;
    let source = Scene {
        image: source_image,
        mask: blueprint.mask.clone(),
        text: source_text,
        language: language.to_string(),
        style: blueprint.style.clone(),
    };
    let edited = Scene {
        image: edited_image,
        mask: blueprint.mask,
        text: target_text,
        language: language.to_string(),
        style: blueprint.style,
    };
    Ok(PairedSample { source, edited })
}

/// One deliberately broken pair, violating exactly one validator check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defect {
    /// A 0.5-magnitude pixel change outside the dilated mask.
    OffMaskEdit,
    /// The edited image renders a different text than the recorded target.
    WrongText,
    /// The edited foreground color is shifted by 0.3 in one channel.
    RecoloredForeground,
}

pub fn synth_defective_pair(
    seed: u64,
    language: &str,
    defect: Defect,
    cfg: &SceneConfig,
) -> Result<PairedSample> {
    let font = glyphs::fonts().by_name(language)?;
    let mut pair = synth_pair(seed, language, cfg)?;
    let mut stream = Stream::new(derive_seed(seed, &[PAIR_TAG, defect as u64 + 1]));
    match defect {
        Defect::OffMaskEdit => {
            let band = pair.edited.mask.dilate(MASK_DILATION);
            let outside: Vec<(usize, usize)> = (0..band.height())
                .flat_map(|y| (0..band.width()).map(move |x| (y, x)))
                .filter(|&(y, x)| band.get(y, x) == 0)
                .collect();
            let (y, x) = outside[stream.next_below(outside.len())];
            let v = pair.edited.image.get(y, x, 0);
            // background is <= 0.35, so +0.5 never clamps
            pair.edited.image.set(y, x, 0, v + 0.5);
        }
        Defect::WrongText => {
            // render something else while the manifest keeps claiming the
            // original target text
            let usable = usable_codepoints(font, cfg.exclude_oov);
            let claimed = pair.edited.text.clone();
            let rendered = loop {
                let candidate = sample_target_text(&pair.source.text, &usable, &mut stream);
                if candidate != claimed {
                    break candidate;
                }
            };
            let blueprint = Blueprint {
                background: pair.source.image.clone(),
                style: pair.edited.style.clone(),
                origin: origin_of(&pair.source),
                mask: pair.edited.mask.clone(),
            };
            // paint over the source text area first
            let mut cleared = blueprint;
            cleared.background = clear_text_region(&pair);
            pair.edited.image = render_onto(&cleared, &rendered, font)?;
            pair.edited.text = claimed;
        }
        Defect::RecoloredForeground => {
            let fg = pair.edited.style.fg;
            let shifted = if fg[0] >= 0.5 { fg[0] - 0.3 } else { fg[0] + 0.3 };
            for y in 0..pair.edited.image.height() {
                for x in 0..pair.edited.image.width() {
                    let px = [
                        pair.edited.image.get(y, x, 0),
                        pair.edited.image.get(y, x, 1),
                        pair.edited.image.get(y, x, 2),
                    ];
                    if px == fg {
                        pair.edited.image.set(y, x, 0, shifted);
                    }
                }
            }
        }
    }
    Ok(pair)
}

fn origin_of(scene: &Scene) -> (usize, usize) {
    let bbox = mask_bbox(&scene.mask).expect("scene masks are nonempty");
    (bbox.y0 + MASK_DILATION, bbox.x0 + MASK_DILATION)
}

/// Reconstruct the pair's background inside the mask from the edited
/// image (pixels that are not foreground-colored), so a different text
/// can be rendered in place.
fn clear_text_region(pair: &PairedSample) -> ImageBuffer {
    let mut bg = pair.edited.image.clone();
    let fg = pair.edited.style.fg;
    let bbox = mask_bbox(&pair.edited.mask).expect("nonempty");
    // sample a background value from just outside the text box
    let sy = bbox.y0;
    let sx = bbox.x0;
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            let px = [bg.get(y, x, 0), bg.get(y, x, 1), bg.get(y, x, 2)];
            if px == fg {
                for c in 0..3 {
                    let v = bg.get(sy, sx, c);
                    bg.set(y, x, c, v);
                }
            }
        }
    }
    bg
}

// ── Validators ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Max absolute off-mask difference (default 2/255).
    pub region_tol: f32,
    /// Max L2 distance between foreground mean colors (default 0.1).
    pub style_tol: f32,
    /// Extra dilation applied to the mask for the region check.
    pub dilate_px: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            region_tol: 2.0 / 255.0,
            style_tol: 0.1,
            dilate_px: MASK_DILATION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub region_ok: bool,
    pub text_ok: bool,
    pub style_ok: bool,
}

impl Verdict {
    pub fn all(&self) -> bool {
        self.region_ok && self.text_ok && self.style_ok
    }
}

/// Otsu threshold over a grayscale crop (256 bins).
fn otsu_threshold(gray: &ImageBuffer) -> f32 {
    let mut hist = [0usize; 256];
    for &v in gray.data() {
        hist[((v * 255.0) as usize).min(255)] += 1;
    }
    let total = gray.data().len() as f64;
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum();
    let (mut best_t, mut best_var) = (0usize, -1.0f64);
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    for t in 0..256 {
        w0 += hist[t] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += t as f64 * hist[t] as f64;
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best_var {
            best_var = between;
            best_t = t;
        }
    }
    // the foreground class is every bin above best_t; returning the next
    // bin's lower edge keeps the pixel selection identical to the class
    // split (a mid-bin cut would leak the argmax bin's upper half)
    (best_t as f32 + 1.0) / 255.0
}

/// Mean RGB over the Otsu-bright pixels of a crop.
pub fn foreground_mean_rgb(image_crop: &ImageBuffer) -> [f32; 3] {
    let gray = image_crop.to_gray();
    let threshold = otsu_threshold(&gray);
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for y in 0..image_crop.height() {
        for x in 0..image_crop.width() {
            if gray.get(y, x, 0) >= threshold {
                for c in 0..3 {
                    acc[c] += image_crop.get(y, x, c.min(image_crop.channels() - 1)) as f64;
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        // constant crop: fall back to the overall mean
        let mut acc = [0.0f64; 3];
        for y in 0..image_crop.height() {
            for x in 0..image_crop.width() {
                for c in 0..3 {
                    acc[c] += image_crop.get(y, x, c.min(image_crop.channels() - 1)) as f64;
                }
            }
        }
        let n = (image_crop.height() * image_crop.width()) as f64;
        return [0, 1, 2].map(|c| (acc[c] / n) as f32);
    }
    [0, 1, 2].map(|c| (acc[c] / n as f64) as f32)
}

pub fn style_distance(source_crop: &ImageBuffer, edited_crop: &ImageBuffer) -> f32 {
    let a = foreground_mean_rgb(source_crop);
    let b = foreground_mean_rgb(edited_crop);
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// The three paired-data criteria: untouched non-target regions, correct
/// target text, consistent foreground style.
pub fn validate_pair(
    source: &ImageBuffer,
    edited: &ImageBuffer,
    mask: &BinaryMask,
    target_text: &str,
    language: &str,
    thresholds: &Thresholds,
) -> Result<Verdict> {
    if source.height() != edited.height() || source.width() != edited.width() {
        return Err(DatasetError::Invalid {
            op: "validate_pair",
            msg: "source/edited sizes differ".into(),
        });
    }
    let font = glyphs::fonts().by_name(language)?;
    let band = mask.dilate(thresholds.dilate_px);
    let mut worst = 0.0f32;
    for y in 0..source.height() {
        for x in 0..source.width() {
            if band.get(y, x) == 1 {
                continue;
            }
            for c in 0..source.channels() {
                worst = worst.max((source.get(y, x, c) - edited.get(y, x, c)).abs());
            }
        }
    }
    let region_ok = worst <= thresholds.region_tol;

    let bbox = mask_bbox(mask)?;
    let edited_crop = crop(edited, bbox)?;
    let text_ok = glyphs::recognize(&edited_crop, font) == target_text;

    let source_crop = crop(source, bbox)?;
    let style_ok = style_distance(&source_crop, &edited_crop) <= thresholds.style_tol;

    Ok(Verdict {
        region_ok,
        text_ok,
        style_ok,
    })
}

// ── Manifest ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub src_path: String,
    pub edit_path: String,
    pub mask_path: String,
    pub source_text: String,
    pub target_text: String,
    pub language: String,
    pub split: String,
}

impl ManifestRecord {
    /// Self-supervised records carry the same text on both sides.
    pub fn is_paired(&self) -> bool {
        self.source_text != self.target_text
    }
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn of_split(&self, split: &str) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn of_language(&self, language: &str) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| r.language == language)
                .cloned()
                .collect(),
        }
    }

    pub fn languages(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.records.iter().map(|r| r.language.clone()).collect();
        set.into_iter().collect()
    }

    /// One record per line, `key=value` fields separated by single
    /// spaces. Texts are alphabet codepoints only, so no escaping is
    /// needed; the parser rejects values containing whitespace.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "id={} src={} edit={} mask={} source_text={} target_text={} lang={} split={}\n",
                r.id,
                r.src_path,
                r.edit_path,
                r.mask_path,
                r.source_text,
                r.target_text,
                r.language,
                r.split
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Manifest> {
        let mut records = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = std::collections::BTreeMap::new();
            for token in line.split(' ') {
                let (k, v) = token.split_once('=').ok_or_else(|| {
                    DatasetError::Manifest(format!("line {}: bad token '{token}'", lineno + 1))
                })?;
                fields.insert(k.to_string(), v.to_string());
            }
            let get = |k: &str| -> Result<String> {
                fields
                    .get(k)
                    .cloned()
                    .ok_or_else(|| DatasetError::Manifest(format!("line {}: missing '{k}'", lineno + 1)))
            };
            let record = ManifestRecord {
                id: get("id")?,
                src_path: get("src")?,
                edit_path: get("edit")?,
                mask_path: get("mask")?,
                source_text: get("source_text")?,
                target_text: get("target_text")?,
                language: get("lang")?,
                split: get("split")?,
            };
            if !seen.insert(record.id.clone()) {
                return Err(DatasetError::Manifest(format!(
                    "duplicate id '{}'",
                    record.id
                )));
            }
            records.push(record);
        }
        Ok(Manifest { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        Manifest::from_text(&text)
    }
}

/// Load a record's images relative to the dataset root.
pub fn load_record(
    base: &Path,
    record: &ManifestRecord,
) -> Result<(ImageBuffer, ImageBuffer, BinaryMask)> {
    let src = load_png(&base.join(&record.src_path))?;
    let edit = load_png(&base.join(&record.edit_path))?;
    let mask = load_mask_png(&base.join(&record.mask_path))?;
    Ok((src, edit, mask))
}

/// Deterministic stratified split. Within each language the records are
/// shuffled by the seed; test counts use largest-remainder allocation so
/// the total is exactly `round(n * fraction)` and every language stays
/// within one record of the global fraction.
pub fn split(manifest: &Manifest, test_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if manifest.records.is_empty() {
        return Err(DatasetError::Invalid {
            op: "split",
            msg: "empty manifest".into(),
        });
    }
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(DatasetError::Invalid {
            op: "split",
            msg: format!("test fraction {test_fraction} outside (0, 1)"),
        });
    }
    let total = manifest.records.len();
    let target = ((total as f64) * test_fraction).round() as usize;

    let languages = manifest.languages();
    let mut shares: Vec<(usize, f64, usize)> = Vec::new(); // (lang idx, remainder, base)
    let mut base_total = 0usize;
    let mut per_lang: Vec<Vec<usize>> = Vec::new(); // record indices per language
    for (li, lang) in languages.iter().enumerate() {
        let idx: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.language == lang)
            .map(|(i, _)| i)
            .collect();
        let exact = idx.len() as f64 * test_fraction;
        let base = exact.floor() as usize;
        shares.push((li, exact - base as f64, base));
        base_total += base;
        per_lang.push(idx);
    }
    // hand out the remaining test slots by largest fractional remainder
    let mut leftover = target.saturating_sub(base_total);
    shares.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut test_count = vec![0usize; languages.len()];
    for (li, _, base) in &shares {
        let mut take = *base;
        if leftover > 0 && take < per_lang[*li].len() {
            take += 1;
            leftover -= 1;
        }
        test_count[*li] = take;
    }

    let mut is_test = vec![false; total];
    for (li, idx) in per_lang.iter().enumerate() {
        let mut shuffled = idx.clone();
        Stream::new(derive_seed(seed, &[li as u64])).shuffle(&mut shuffled);
        for &record_idx in shuffled.iter().take(test_count[li]) {
            is_test[record_idx] = true;
        }
    }

    let mut train = Manifest::default();
    let mut test = Manifest::default();
    for (i, record) in manifest.records.iter().enumerate() {
        let mut r = record.clone();
        if is_test[i] {
            r.split = "test".into();
            test.records.push(r);
        } else {
            r.split = "train".into();
            train.records.push(r);
        }
    }
    Ok((train, test))
}

/// First `k` languages of the order, mixed uniformly by the caller.
pub fn language_schedule(order: &[String], k: usize) -> Result<&[String]> {
    if k == 0 || k > order.len() {
        return Err(DatasetError::Invalid {
            op: "language_schedule",
            msg: format!("step {k} outside 1..={}", order.len()),
        });
    }
    Ok(&order[..k])
}

// ── Dataset generation ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub languages: Vec<String>,
    /// Records generated per language.
    pub count: usize,
    pub paired: bool,
    pub seed: u64,
    pub scene: SceneConfig,
    pub test_fraction: f64,
    /// Extra out-of-vocabulary eval records per language, as a fraction
    /// of `count` (their target texts use held-out codepoints).
    pub oov_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            languages: vec!["english".into()],
            count: 200,
            paired: false,
            seed: 42,
            scene: SceneConfig::default(),
            test_fraction: 0.2,
            oov_fraction: 0.1,
        }
    }
}

/// Generate scenes or pairs, write `data/{split}/{id}.*.png` plus
/// `manifest.txt` under `out_dir`, and return the manifest.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.count == 0 || cfg.languages.is_empty() {
        return Err(DatasetError::Invalid {
            op: "generate_dataset",
            msg: "need at least one language and a positive count".into(),
        });
    }
    for language in &cfg.languages {
        glyphs::fonts().by_name(language)?;
    }

    struct Generated {
        record: ManifestRecord,
        source: ImageBuffer,
        edited: ImageBuffer,
        mask: BinaryMask,
    }

    let mut generated: Vec<Generated> = Vec::new();
    for (li, language) in cfg.languages.iter().enumerate() {
        let jobs: Vec<usize> = (0..cfg.count).collect();
        let mut batch: Vec<Generated> = jobs
            .par_iter()
            .map(|&i| -> Result<Generated> {
                let sample_seed = derive_seed(cfg.seed, &[li as u64, i as u64]);
                let id = format!("{language}_{i:05}");
                let (source, edited, mask, source_text, target_text) = if cfg.paired {
                    let pair = synth_pair(sample_seed, language, &cfg.scene)?;
                    (
                        pair.source.image,
                        pair.edited.image,
                        pair.source.mask,
                        pair.source.text,
                        pair.edited.text,
                    )
                } else {
                    let scene = synth_scene(sample_seed, language, None, None, &cfg.scene)?;
                    let text = scene.text.clone();
                    (
                        scene.image.clone(),
                        scene.image,
                        scene.mask,
                        text.clone(),
                        text,
                    )
                };
                Ok(Generated {
                    record: ManifestRecord {
                        id,
                        src_path: String::new(),
                        edit_path: String::new(),
                        mask_path: String::new(),
                        source_text,
                        target_text,
                        language: language.clone(),
                        split: String::new(),
                    },
                    source,
                    edited,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        generated.append(&mut batch);

        // out-of-vocabulary eval records: targets draw from the held-out
        // codepoints excluded from every train/test text
        let font = glyphs::fonts().by_name(language)?;
        let held = holdout_codepoints(font);
        let oov_count = (cfg.count as f64 * cfg.oov_fraction).ceil() as usize;
        for i in 0..oov_count {
            let sample_seed = derive_seed(cfg.seed, &[li as u64, (cfg.count + i) as u64, OOV_TAG]);
            let mut stream = Stream::new(sample_seed);
            let scene = synth_scene(sample_seed, language, None, None, &cfg.scene)?;
            // rewrite one random position with a held-out codepoint
            let mut chars: Vec<char> = scene.text.chars().collect();
            let pos = stream.next_below(chars.len());
            chars[pos] = held[stream.next_below(held.len())];
            let oov_text: String = chars.into_iter().collect();
            let style = scene.style.clone();
            let oov_scene = synth_scene(sample_seed, language, Some(&oov_text), Some(&style), &cfg.scene)?;
            generated.push(Generated {
                record: ManifestRecord {
                    id: format!("{language}_oov_{i:05}"),
                    src_path: String::new(),
                    edit_path: String::new(),
                    mask_path: String::new(),
                    source_text: oov_scene.text.clone(),
                    target_text: oov_scene.text.clone(),
                    language: language.clone(),
                    split: "oov".into(),
                },
                source: oov_scene.image.clone(),
                edited: oov_scene.image,
                mask: oov_scene.mask,
            });
        }
    }

    // split the non-oov records into train/test
    let main = Manifest {
        records: generated
            .iter()
            .filter(|g| g.record.split != "oov")
            .map(|g| g.record.clone())
            .collect(),
    };
    let (train, test) = split(&main, cfg.test_fraction, derive_seed(cfg.seed, &[0x53504c]))?;
    let mut split_of = std::collections::BTreeMap::new();
    for r in train.records.iter().chain(test.records.iter()) {
        split_of.insert(r.id.clone(), r.split.clone());
    }

    let mut manifest = Manifest::default();
    for g in &mut generated {
        if g.record.split != "oov" {
            g.record.split = split_of[&g.record.id].clone();
        }
        let dir = out_dir.join("data").join(&g.record.split);
        std::fs::create_dir_all(&dir)?;
        let rel = |suffix: &str| format!("data/{}/{}.{suffix}.png", g.record.split, g.record.id);
        g.record.src_path = rel("src");
        g.record.edit_path = rel("edit");
        g.record.mask_path = rel("mask");
        save_png(&out_dir.join(&g.record.src_path), &g.source)?;
        save_png(&out_dir.join(&g.record.edit_path), &g.edited)?;
        save_mask_png(&out_dir.join(&g.record.mask_path), &g.mask)?;
        manifest.records.push(g.record.clone());
    }
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Scene self-checks used by tests and the generator soundness suite.
pub fn validate_scene(scene: &Scene) -> Result<()> {
    let font = glyphs::fonts().by_name(&scene.language)?;
    let bbox = mask_bbox(&scene.mask)?;
    let text_crop = crop(&scene.image, bbox)?;
    let recognized = glyphs::recognize(&text_crop, font);
    if recognized != scene.text {
        return Err(DatasetError::Invalid {
            op: "validate_scene",
            msg: format!("recognized '{recognized}', expected '{}'", scene.text),
        });
    }
    // every bright-text pixel must lie inside the mask
    let fg = scene.style.fg;
    for y in 0..scene.image.height() {
        for x in 0..scene.image.width() {
            let px = [
                scene.image.get(y, x, 0),
                scene.image.get(y, x, 1),
                scene.image.get(y, x, 2),
            ];
            if px == fg && scene.mask.get(y, x) == 0 {
                return Err(DatasetError::Invalid {
                    op: "validate_scene",
                    msg: format!("text pixel ({y},{x}) outside the mask"),
                });
            }
        }
    }
    Ok(())
}
