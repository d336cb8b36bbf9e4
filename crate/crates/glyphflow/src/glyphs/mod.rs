//! Deterministic text rasterization over embedded 5x7 bitmap fonts, and a
//! template recognizer used as the evaluation oracle.
//!
//! Thirteen alphabets stand in for the multilingual setting, indexed in a
//! fixed order ([`LANGUAGE_ORDER`]). Each is a visually distinct glyph
//! design over shared codepoints; tables live in `fonts.txt` and are
//! validated when first loaded:
//!
//! - every glyph has ink in every column and in its top and bottom row
//!   (keeps gap segmentation and scale inference exact on clean renders),
//! - no two glyphs within a font are bit-identical,
//! - any two glyphs from different alphabets differ in at least 4 bits.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use thiserror::Error;

use crate::imaging::ImageBuffer;

pub const GLYPH_WIDTH: usize = 5;
pub const GLYPH_HEIGHT: usize = 7;
/// Horizontal pitch: glyph width plus a 1-column gap.
pub const ADVANCE: usize = 6;

/// Alphabet names in the fixed language order used by the incremental
/// multilingual protocol.
pub const LANGUAGE_ORDER: [&str; 13] = [
    "arabic", "english", "french", "chinese", "german", "korean", "japanese", "italian",
    "bengali", "hindi", "russian", "thai", "swahili",
];

#[derive(Debug, Error)]
pub enum GlyphError {
    #[error("codepoint '{0}' is not mapped in font '{1}'")]
    UnmappedCodepoint(char, String),
    #[error("render_line: {0}")]
    Invalid(String),
    #[error("unknown alphabet '{0}' (expected one of {LANGUAGE_ORDER:?})")]
    UnknownAlphabet(String),
    #[error("font table: {0}")]
    Table(String),
}

pub type Result<T> = std::result::Result<T, GlyphError>;

/// One 5x7 glyph as a 35-bit pattern, row-major from the top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Glyph {
    bits: u64,
}

impl Glyph {
    pub fn get(&self, row: usize, col: usize) -> bool {
        (self.bits >> (row * GLYPH_WIDTH + col)) & 1 == 1
    }

    pub fn popcount(&self) -> u32 {
        self.bits.count_ones()
    }

    pub fn hamming(&self, other: &Glyph) -> u32 {
        (self.bits ^ other.bits).count_ones()
    }
}

/// A fixed-pitch bitmap font: one alphabet's codepoint → glyph table.
#[derive(Debug, Clone)]
pub struct BitmapFont {
    name: String,
    glyphs: BTreeMap<char, Glyph>,
}

impl BitmapFont {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn glyph(&self, c: char) -> Option<&Glyph> {
        self.glyphs.get(&c)
    }

    /// Mapped codepoints in sorted order.
    pub fn codepoints(&self) -> Vec<char> {
        self.glyphs.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    /// Table dump in the documented text format (same as `fonts.txt`).
    pub fn export_table(&self) -> String {
        let mut out = format!("alphabet {}\n", self.name);
        for (c, g) in &self.glyphs {
            out.push_str(&format!("glyph {c}\n"));
            for r in 0..GLYPH_HEIGHT {
                for col in 0..GLYPH_WIDTH {
                    out.push(if g.get(r, col) { '#' } else { '.' });
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

/// All thirteen fonts, in language order.
pub struct FontSet {
    fonts: Vec<BitmapFont>,
}

impl FontSet {
    pub fn by_name(&self, name: &str) -> Result<&BitmapFont> {
        self.fonts
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| GlyphError::UnknownAlphabet(name.to_string()))
    }

    pub fn by_index(&self, i: usize) -> Option<&BitmapFont> {
        self.fonts.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BitmapFont> {
        self.fonts.iter()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.fonts.iter().position(|f| f.name == name)
    }
}

static FONTS: LazyLock<FontSet> = LazyLock::new(|| {
    let set = parse_tables(include_str!("fonts.txt")).expect("embedded font tables parse");
    validate_tables(&set).expect("embedded font tables satisfy their invariants");
    set
});

/// The embedded font tables, validated on first access.
pub fn fonts() -> &'static FontSet {
    &FONTS
}

fn parse_tables(text: &str) -> Result<FontSet> {
    let mut fonts: Vec<BitmapFont> = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix("alphabet ") {
            fonts.push(BitmapFont {
                name: name.trim().to_string(),
                glyphs: BTreeMap::new(),
            });
        } else if let Some(ch) = line.strip_prefix("glyph ") {
            let font = fonts
                .last_mut()
                .ok_or_else(|| GlyphError::Table("glyph before any alphabet".into()))?;
            let mut chars = ch.trim().chars();
            let c = chars
                .next()
                .ok_or_else(|| GlyphError::Table("empty glyph name".into()))?;
            if chars.next().is_some() {
                return Err(GlyphError::Table(format!("multi-char glyph name '{ch}'")));
            }
            let mut bits = 0u64;
            for r in 0..GLYPH_HEIGHT {
                let row = lines
                    .next()
                    .ok_or_else(|| GlyphError::Table(format!("truncated glyph '{c}'")))?;
                let row = row.trim_end();
                if row.len() != GLYPH_WIDTH {
                    return Err(GlyphError::Table(format!(
                        "glyph '{c}' row {r} has width {}, want {GLYPH_WIDTH}",
                        row.len()
                    )));
                }
                for (col, rc) in row.chars().enumerate() {
                    match rc {
                        '#' => bits |= 1 << (r * GLYPH_WIDTH + col),
                        '.' => {}
                        other => {
                            return Err(GlyphError::Table(format!(
                                "glyph '{c}': unexpected character '{other}'"
                            )))
                        }
                    }
                }
            }
            if font.glyphs.insert(c, Glyph { bits }).is_some() {
                return Err(GlyphError::Table(format!(
                    "duplicate glyph '{c}' in '{}'",
                    font.name
                )));
            }
        } else {
            return Err(GlyphError::Table(format!("unexpected line '{line}'")));
        }
    }
    Ok(FontSet { fonts })
}

fn validate_tables(set: &FontSet) -> Result<()> {
    let order: Vec<&str> = set.fonts.iter().map(|f| f.name.as_str()).collect();
    if order != LANGUAGE_ORDER {
        return Err(GlyphError::Table(format!(
            "alphabet order {order:?} does not match {LANGUAGE_ORDER:?}"
        )));
    }
    for font in &set.fonts {
        if font.glyphs.len() < 10 {
            return Err(GlyphError::Table(format!(
                "font '{}' has only {} glyphs",
                font.name,
                font.glyphs.len()
            )));
        }
        for (c, g) in &font.glyphs {
            if g.popcount() == 0 {
                return Err(GlyphError::Table(format!("empty glyph '{c}'")));
            }
            for col in 0..GLYPH_WIDTH {
                if !(0..GLYPH_HEIGHT).any(|r| g.get(r, col)) {
                    return Err(GlyphError::Table(format!(
                        "glyph '{c}' in '{}' has a blank column",
                        font.name
                    )));
                }
            }
            for row in [0, GLYPH_HEIGHT - 1] {
                if !(0..GLYPH_WIDTH).any(|col| g.get(row, col)) {
                    return Err(GlyphError::Table(format!(
                        "glyph '{c}' in '{}' does not span full height",
                        font.name
                    )));
                }
            }
        }
        let glyphs: Vec<&Glyph> = font.glyphs.values().collect();
        for i in 0..glyphs.len() {
            for j in i + 1..glyphs.len() {
                if glyphs[i].hamming(glyphs[j]) == 0 {
                    return Err(GlyphError::Table(format!(
                        "bit-identical glyphs in '{}'",
                        font.name
                    )));
                }
            }
        }
    }
    for (i, fa) in set.fonts.iter().enumerate() {
        for fb in set.fonts.iter().skip(i + 1) {
            for ga in fa.glyphs.values() {
                for gb in fb.glyphs.values() {
                    if ga.hamming(gb) < 4 {
                        return Err(GlyphError::Table(format!(
                            "alphabets '{}' and '{}' share a near-identical glyph",
                            fa.name, fb.name
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// A rendered single-line glyph image: white strokes (1.0) on black (0.0).
#[derive(Debug, Clone)]
pub struct GlyphMap {
    pub image: ImageBuffer,
    pub text: String,
    pub font: String,
}

/// Render `text` as one line at an integer `scale`. Width is
/// `scale * (6n - 1)` for `n` codepoints, height `scale * 7`.
pub fn render_line(text: &str, font: &BitmapFont, scale: usize) -> Result<GlyphMap> {
    if text.is_empty() {
        return Err(GlyphError::Invalid("text must be nonempty".into()));
    }
    if scale == 0 {
        return Err(GlyphError::Invalid("scale must be >= 1".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    for &c in &chars {
        if font.glyph(c).is_none() {
            return Err(GlyphError::UnmappedCodepoint(c, font.name.clone()));
        }
    }
    let width = scale * (chars.len() * ADVANCE - 1);
    let height = scale * GLYPH_HEIGHT;
    let mut data = vec![0.0f32; width * height];
    for (i, &c) in chars.iter().enumerate() {
        let glyph = font.glyph(c).expect("checked above");
        let x_origin = i * ADVANCE * scale;
        for r in 0..GLYPH_HEIGHT {
            for col in 0..GLYPH_WIDTH {
                if !glyph.get(r, col) {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let y = r * scale + dy;
                        let x = x_origin + col * scale + dx;
                        data[y * width + x] = 1.0;
                    }
                }
            }
        }
    }
    let image = ImageBuffer::new(height, width, 1, data)
        .expect("rendered values are exactly 0 or 1");
    Ok(GlyphMap {
        image,
        text: text.to_string(),
        font: font.name.clone(),
    })
}

/// Read a single text line back out of an image with the given font.
///
/// Binarizes at 0.5, finds the ink bounding box, infers the integer scale
/// from its height, segments cells on blank-column gaps (splitting merged
/// cells at the fixed glyph pitch), then matches each cell to the nearest
/// glyph by Hamming distance after block-majority downsampling to 5x7.
/// An image with no ink reads back as the empty string.
pub fn recognize(image: &ImageBuffer, font: &BitmapFont) -> String {
    let gray = image.to_gray();
    let (h, w) = (gray.height(), gray.width());
    let ink: Vec<bool> = gray.data().iter().map(|&v| v >= 0.5).collect();

    // Ink bounding box.
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if ink[y * w + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x1 == 0 {
        return String::new();
    }

    let scale = (((y1 - y0) as f64 / GLYPH_HEIGHT as f64).round() as usize).max(1);

    // Column ink histogram inside the box; zero columns are gaps.
    let cols = x1 - x0;
    let mut hist = vec![0usize; cols];
    for (x, count) in hist.iter_mut().enumerate() {
        for y in y0..y1 {
            if ink[y * w + x0 + x] {
                *count += 1;
            }
        }
    }

    let mut out = String::new();
    let mut col = 0;
    while col < cols {
        if hist[col] == 0 {
            col += 1;
            continue;
        }
        let start = col;
        while col < cols && hist[col] > 0 {
            col += 1;
        }
        let cell_w = col - start;
        // A run of k glyphs spans (6k - 1) * scale columns.
        let k = (((cell_w + scale) as f64 / (ADVANCE * scale) as f64).round() as usize).max(1);
        for j in 0..k {
            let cx = x0 + start + j * ADVANCE * scale;
            out.push(match_cell(&ink, w, cx, y0, scale, x1, y1, font));
        }
    }
    out
}

/// Downsample one glyph cell to 5x7 by block majority and return the
/// nearest font glyph.
#[allow(clippy::too_many_arguments)]
fn match_cell(
    ink: &[bool],
    w: usize,
    cx: usize,
    cy: usize,
    scale: usize,
    x_limit: usize,
    y_limit: usize,
    font: &BitmapFont,
) -> char {
    let mut bits = 0u64;
    for r in 0..GLYPH_HEIGHT {
        for c in 0..GLYPH_WIDTH {
            let mut count = 0usize;
            for dy in 0..scale {
                for dx in 0..scale {
                    let y = cy + r * scale + dy;
                    let x = cx + c * scale + dx;
                    if y < y_limit && x < x_limit && ink[y * w + x] {
                        count += 1;
                    }
                }
            }
            if count * 2 > scale * scale {
                bits |= 1 << (r * GLYPH_WIDTH + c);
            }
        }
    }
    let cell = Glyph { bits };
    font.glyphs
        .iter()
        .min_by_key(|(c, g)| (g.hamming(&cell), **c as u32))
        .map(|(c, _)| *c)
        .expect("fonts are nonempty")
}
