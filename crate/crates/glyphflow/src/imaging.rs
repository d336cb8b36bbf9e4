//! Image and mask primitives: masked-image construction, style-crop
//! geometry, channel concatenation and the final composite.
//!
//! Images are row-major HWC f32 in `[0, 1]`. PNG i/o covers 8-bit gray and
//! RGB (values scaled by 255, round-half-up on save); masks are written as
//! 1-bit PNGs. Float images can also round-trip through the raw tensor
//! format via [`ImageBuffer::to_tensor`].

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("{op}: size mismatch: {lhs} vs {rhs}")]
    SizeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("mask has no set pixels but an edit region is required")]
    EmptyMask,
    #[error("rect {rect:?} out of bounds for {w}x{h}")]
    RectOutOfBounds { rect: Rect, w: usize, h: usize },
    #[error("png: {0}")]
    Png(String),
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Axis-aligned pixel rectangle, `x0/y0` inclusive, `x1/y1` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(ImagingError::Invalid {
                op: "rect",
                msg: format!("degenerate rect ({x0},{y0})..({x1},{y1})"),
            });
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// Grow by `r` pixels on every side, clipped to `w` x `h`.
    pub fn dilate(&self, r: usize, w: usize, h: usize) -> Rect {
        Rect {
            x0: self.x0.saturating_sub(r),
            y0: self.y0.saturating_sub(r),
            x1: (self.x1 + r).min(w),
            y1: (self.y1 + r).min(h),
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Row-major HWC float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(ImagingError::Invalid {
                op: "image",
                msg: format!("zero dimension {height}x{width}x{channels}"),
            });
        }
        if data.len() != height * width * channels {
            return Err(ImagingError::Invalid {
                op: "image",
                msg: format!(
                    "{height}x{width}x{channels} wants {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            });
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::Invalid {
                op: "image",
                msg: format!("value {bad} outside [0,1]"),
            });
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageBuffer {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Single channel as a new 1-channel image.
    pub fn channel(&self, c: usize) -> Result<ImageBuffer> {
        if c >= self.channels {
            return Err(ImagingError::Invalid {
                op: "channel",
                msg: format!("channel {c} of {}", self.channels),
            });
        }
        let data = (0..self.height * self.width)
            .map(|i| self.data[i * self.channels + c])
            .collect();
        ImageBuffer::new(self.height, self.width, 1, data)
    }

    /// Channel-mean grayscale.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let inv = 1.0 / self.channels as f32;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f32>() * inv)
            .collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Replicate a 1-channel image to `c` channels.
    pub fn broadcast_channels(&self, c: usize) -> Result<ImageBuffer> {
        if self.channels != 1 {
            return Err(ImagingError::Invalid {
                op: "broadcast_channels",
                msg: format!("expected 1 channel, got {}", self.channels),
            });
        }
        let mut data = Vec::with_capacity(self.data.len() * c);
        for &v in &self.data {
            data.extend(std::iter::repeat_n(v, c));
        }
        ImageBuffer::new(self.height, self.width, c, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.channels],
            self.data.clone(),
        )
        .expect("image dims are consistent")
    }

    /// Tensor `[H, W, C]` to image, clamping into `[0, 1]`.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<ImageBuffer> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(ImagingError::Invalid {
                op: "from_tensor",
                msg: format!("expected [H, W, C], got {s:?}"),
            });
        }
        let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        ImageBuffer::new(s[0], s[1], s[2], data)
    }
}

/// Per-pixel {0, 1} mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(ImagingError::Invalid {
                op: "mask",
                msg: format!(
                    "{height}x{width} wants {} values, got {}",
                    height * width,
                    data.len()
                ),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(ImagingError::Invalid {
                op: "mask",
                msg: "mask values must be exactly 0 or 1".into(),
            });
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_rect(height: usize, width: usize, rect: Rect) -> Result<Self> {
        if rect.x1 > width || rect.y1 > height {
            return Err(ImagingError::RectOutOfBounds {
                rect,
                w: width,
                h: height,
            });
        }
        let mut m = BinaryMask::zeros(height, width);
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                m.data[y * width + x] = 1;
            }
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = if v > 0 { 1 } else { 0 };
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Chebyshev dilation by `r` pixels.
    pub fn dilate(&self, r: usize) -> BinaryMask {
        if r == 0 {
            return self.clone();
        }
        let mut out = BinaryMask::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.data[y * self.width + x] == 0 {
                    continue;
                }
                let y0 = y.saturating_sub(r);
                let x0 = x.saturating_sub(r);
                for yy in y0..=(y + r).min(self.height - 1) {
                    for xx in x0..=(x + r).min(self.width - 1) {
                        out.data[yy * self.width + xx] = 1;
                    }
                }
            }
        }
        out
    }

    /// Mask as a 1-channel float plane.
    pub fn to_plane(&self) -> ImageBuffer {
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

fn check_same_hw(op: &'static str, ih: usize, iw: usize, mh: usize, mw: usize) -> Result<()> {
    if ih != mh || iw != mw {
        return Err(ImagingError::SizeMismatch {
            op,
            lhs: format!("{ih}x{iw}"),
            rhs: format!("{mh}x{mw}"),
        });
    }
    Ok(())
}

/// Masked image: `I * (1 - M)` per channel. Pixels under the mask go to
/// zero, everything else is copied bit-for-bit.
pub fn apply_mask(image: &ImageBuffer, mask: &BinaryMask) -> Result<ImageBuffer> {
    check_same_hw(
        "apply_mask",
        image.height,
        image.width,
        mask.height,
        mask.width,
    )?;
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            if mask.get(y, x) == 1 {
                for c in 0..image.channels {
                    out.data[(y * image.width + x) * image.channels + c] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Tightest rectangle containing every set pixel.
pub fn mask_bbox(mask: &BinaryMask) -> Result<Rect> {
    let mut found = false;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) == 1 {
                found = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if !found {
        return Err(ImagingError::EmptyMask);
    }
    Ok(Rect { x0, y0, x1, y1 })
}

pub fn crop(image: &ImageBuffer, rect: Rect) -> Result<ImageBuffer> {
    if rect.x1 > image.width || rect.y1 > image.height {
        return Err(ImagingError::RectOutOfBounds {
            rect,
            w: image.width,
            h: image.height,
        });
    }
    let mut data = Vec::with_capacity(rect.width() * rect.height() * image.channels);
    for y in rect.y0..rect.y1 {
        let start = (y * image.width + rect.x0) * image.channels;
        data.extend_from_slice(&image.data[start..start + rect.width() * image.channels]);
    }
    ImageBuffer::new(rect.height(), rect.width(), image.channels, data)
}

/// Corner-aligned bilinear resample to an exact size (no aspect handling).
pub fn bilinear_resize(image: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(ImagingError::Invalid {
            op: "bilinear_resize",
            msg: "zero output size".into(),
        });
    }
    let (h, w, c) = (image.height, image.width, image.channels);
    let sy = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let sx = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    let mut data = vec![0.0f32; out_h * out_w * c];
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            for ch in 0..c {
                let v00 = image.get(y0, x0, ch);
                let v01 = image.get(y0, x1, ch);
                let v10 = image.get(y1, x0, ch);
                let v11 = image.get(y1, x1, ch);
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                let v = top + (bot - top) * wy;
                data[(oy * out_w + ox) * c + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(out_h, out_w, c, data)
}

/// Aspect-preserving bilinear resize, centered on a zero canvas of
/// `out_h` x `out_w`.
pub fn letterbox(image: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(ImagingError::Invalid {
            op: "letterbox",
            msg: "zero output size".into(),
        });
    }
    let scale = (out_h as f64 / image.height as f64).min(out_w as f64 / image.width as f64);
    let nh = ((image.height as f64 * scale).round() as usize).clamp(1, out_h);
    let nw = ((image.width as f64 * scale).round() as usize).clamp(1, out_w);
    let resized = bilinear_resize(image, nh, nw)?;
    let mut out = ImageBuffer::zeros(out_h, out_w, image.channels);
    let oy = (out_h - nh) / 2;
    let ox = (out_w - nw) / 2;
    for y in 0..nh {
        for x in 0..nw {
            for c in 0..image.channels {
                out.data[((y + oy) * out_w + (x + ox)) * image.channels + c] =
                    resized.get(y, x, c);
            }
        }
    }
    Ok(out)
}

/// Stack parts along the channel axis, in the given order.
pub fn channel_concat(parts: &[&ImageBuffer]) -> Result<ImageBuffer> {
    let first = parts.first().ok_or_else(|| ImagingError::Invalid {
        op: "channel_concat",
        msg: "no inputs".into(),
    })?;
    let (h, w) = (first.height, first.width);
    let mut channels = 0;
    for p in parts {
        check_same_hw("channel_concat", h, w, p.height, p.width)?;
        channels += p.channels;
    }
    let mut data = Vec::with_capacity(h * w * channels);
    for i in 0..h * w {
        for p in parts {
            data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
        }
    }
    ImageBuffer::new(h, w, channels, data)
}

/// Final output: decoded pixels inside the mask, original pixels outside.
pub fn composite_output(
    decoded: &ImageBuffer,
    original: &ImageBuffer,
    mask: &BinaryMask,
) -> Result<ImageBuffer> {
    check_same_hw(
        "composite_output",
        decoded.height,
        decoded.width,
        original.height,
        original.width,
    )?;
    check_same_hw(
        "composite_output",
        decoded.height,
        decoded.width,
        mask.height,
        mask.width,
    )?;
    if decoded.channels != original.channels {
        return Err(ImagingError::SizeMismatch {
            op: "composite_output",
            lhs: format!("{} channels", decoded.channels),
            rhs: format!("{} channels", original.channels),
        });
    }
    let mut out = original.clone();
    for y in 0..decoded.height {
        for x in 0..decoded.width {
            if mask.get(y, x) == 1 {
                for c in 0..decoded.channels {
                    let i = (y * decoded.width + x) * decoded.channels + c;
                    out.data[i] = decoded.data[i];
                }
            }
        }
    }
    Ok(out)
}

// ── PNG i/o ──────────────────────────────────────────────────────────

fn png_err<E: std::fmt::Display>(e: E) -> ImagingError {
    ImagingError::Png(e.to_string())
}

/// Save an 8-bit gray (1 channel) or RGB (3 channel) PNG. Values are
/// scaled by 255 with round-half-up.
pub fn save_png(path: &Path, image: &ImageBuffer) -> Result<()> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(ImagingError::Invalid {
                op: "save_png",
                msg: format!("png supports 1 or 3 channels, got {c}"),
            })
        }
    };
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|&v| (v * 255.0 + 0.5).floor() as u8)
        .collect();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut encoder = png::Encoder::new(file, image.width as u32, image.height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    let (h, w) = (info.height as usize, info.width as usize);
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale, png::BitDepth::Eight) => {
            let data = buf.iter().map(|&b| b as f32 / 255.0).collect();
            ImageBuffer::new(h, w, 1, data)
        }
        (png::ColorType::Rgb, png::BitDepth::Eight) => {
            let data = buf.iter().map(|&b| b as f32 / 255.0).collect();
            ImageBuffer::new(h, w, 3, data)
        }
        (png::ColorType::Grayscale, png::BitDepth::One) => {
            let data = unpack_bit_rows(&buf, h, w)
                .into_iter()
                .map(|b| b as f32)
                .collect();
            ImageBuffer::new(h, w, 1, data)
        }
        (ct, bd) => Err(ImagingError::Png(format!(
            "unsupported png layout {ct:?}/{bd:?}"
        ))),
    }
}

/// Save a mask as a 1-bit grayscale PNG.
pub fn save_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let row_bytes = mask.width.div_ceil(8);
    let mut bytes = vec![0u8; row_bytes * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) == 1 {
                bytes[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut encoder = png::Encoder::new(file, mask.width as u32, mask.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = load_png(path)?;
    if img.channels != 1 {
        return Err(ImagingError::Png("mask png must be grayscale".into()));
    }
    let data = img.data.iter().map(|&v| (v >= 0.5) as u8).collect();
    BinaryMask::new(img.height, img.width, data)
}

fn unpack_bit_rows(packed: &[u8], h: usize, w: usize) -> Vec<u8> {
    let row_bytes = w.div_ceil(8);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let byte = packed[y * row_bytes + x / 8];
            out.push((byte >> (7 - x % 8)) & 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Stream;

    fn gray(h: usize, w: usize, vals: &[f32]) -> ImageBuffer {
        ImageBuffer::new(h, w, 1, vals.to_vec()).unwrap()
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut s = Stream::new(seed);
        let data = (0..h * w * c).map(|_| s.next_unit() as f32).collect();
        ImageBuffer::new(h, w, c, data).unwrap()
    }

    fn random_mask(h: usize, w: usize, seed: u64) -> BinaryMask {
        let mut s = Stream::new(seed);
        let data = (0..h * w).map(|_| (s.next_unit() < 0.4) as u8).collect();
        BinaryMask::new(h, w, data).unwrap()
    }

    #[test]
    fn apply_mask_hand_case() {
        let img = gray(2, 2, &[0.2, 0.4, 0.6, 0.8]);
        let mask = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let out = apply_mask(&img, &mask).unwrap();
        assert_eq!(out.data(), &[0.0, 0.4, 0.6, 0.0]);
    }

    #[test]
    fn apply_mask_identity_and_annihilation() {
        let img = random_image(5, 7, 3, 1);
        let zeros = BinaryMask::zeros(5, 7);
        assert_eq!(apply_mask(&img, &zeros).unwrap(), img);
        let ones = BinaryMask::new(5, 7, vec![1; 35]).unwrap();
        assert!(apply_mask(&img, &ones)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn mask_complement_partition_is_exact() {
        for seed in 0..20 {
            let img = random_image(6, 6, 3, seed);
            let m = random_mask(6, 6, seed + 100);
            let inv = BinaryMask::new(6, 6, m.data().iter().map(|&v| 1 - v).collect()).unwrap();
            let a = apply_mask(&img, &m).unwrap();
            let b = apply_mask(&img, &inv).unwrap();
            for i in 0..img.data().len() {
                assert_eq!(a.data()[i] + b.data()[i], img.data()[i]);
            }
        }
    }

    #[test]
    fn bbox_single_pixel_and_full() {
        let mut m = BinaryMask::zeros(8, 8);
        m.set(3, 5, 1);
        assert_eq!(
            mask_bbox(&m).unwrap(),
            Rect {
                x0: 5,
                y0: 3,
                x1: 6,
                y1: 4
            }
        );
        let full = BinaryMask::new(4, 6, vec![1; 24]).unwrap();
        assert_eq!(
            mask_bbox(&full).unwrap(),
            Rect {
                x0: 0,
                y0: 0,
                x1: 6,
                y1: 4
            }
        );
    }

    #[test]
    fn bbox_scattered_pixels() {
        let mut m = BinaryMask::zeros(10, 10);
        m.set(1, 2, 1);
        m.set(4, 7, 1);
        assert_eq!(
            mask_bbox(&m).unwrap(),
            Rect {
                x0: 2,
                y0: 1,
                x1: 8,
                y1: 5
            }
        );
    }

    #[test]
    fn bbox_matches_bruteforce_scan() {
        for seed in 0..200u64 {
            let m = random_mask(16, 16, seed);
            if m.count_ones() == 0 {
                assert!(matches!(mask_bbox(&m), Err(ImagingError::EmptyMask)));
                continue;
            }
            // oracle: min/max over every set pixel
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..16 {
                for x in 0..16 {
                    if m.get(y, x) == 1 {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            assert_eq!(mask_bbox(&m).unwrap(), Rect { x0, y0, x1, y1 });
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(
            mask_bbox(&BinaryMask::zeros(4, 4)),
            Err(ImagingError::EmptyMask)
        ));
    }

    #[test]
    fn crop_identity_and_single_pixel() {
        let img = random_image(5, 6, 3, 2);
        let full = crop(&img, Rect::new(0, 0, 6, 5).unwrap()).unwrap();
        assert_eq!(full, img);
        let px = crop(&img, Rect::new(2, 3, 3, 4).unwrap()).unwrap();
        assert_eq!(
            px.data(),
            &[img.get(3, 2, 0), img.get(3, 2, 1), img.get(3, 2, 2)]
        );
    }

    #[test]
    fn nested_crops_compose() {
        let img = random_image(10, 12, 3, 3);
        let outer = Rect::new(2, 1, 11, 9).unwrap();
        let inner = Rect::new(3, 2, 7, 6).unwrap(); // relative to outer
        let two_step = crop(&crop(&img, outer).unwrap(), inner).unwrap();
        let composed = Rect::new(
            outer.x0 + inner.x0,
            outer.y0 + inner.y0,
            outer.x0 + inner.x1,
            outer.y0 + inner.y1,
        )
        .unwrap();
        assert_eq!(two_step, crop(&img, composed).unwrap());
    }

    #[test]
    fn crop_out_of_bounds_errors() {
        let img = random_image(4, 4, 1, 4);
        assert!(crop(
            &img,
            Rect {
                x0: 0,
                y0: 0,
                x1: 5,
                y1: 4
            }
        )
        .is_err());
    }

    #[test]
    fn letterbox_same_size_is_identity() {
        let img = random_image(8, 8, 3, 5);
        let out = letterbox(&img, 8, 8).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn letterbox_constant_content_and_zero_padding() {
        let img = gray(2, 2, &[0.5; 4]);
        let out = letterbox(&img, 6, 8).unwrap();
        // content occupies a centered 6x6 square; padding stays zero
        for y in 0..6 {
            for x in 0..8 {
                let v = out.get(y, x, 0);
                if (1..7).contains(&x) {
                    assert!((v - 0.5).abs() < 1e-6, "content at ({y},{x}) = {v}");
                } else {
                    assert_eq!(v, 0.0, "padding at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn bilinear_corner_aligned_weights() {
        let img = gray(1, 2, &[0.0, 1.0]);
        let out = bilinear_resize(&img, 1, 4).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, e) in out.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn letterbox_stays_in_unit_range() {
        for seed in 0..20 {
            let img = random_image(3, 9, 3, seed);
            let out = letterbox(&img, 16, 16).unwrap();
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn channel_concat_layout() {
        let g = random_image(4, 4, 1, 6);
        let s = random_image(4, 4, 3, 7);
        let m = random_image(4, 4, 3, 8);
        let k = random_image(4, 4, 1, 9);
        let out = channel_concat(&[&g, &s, &m, &k]).unwrap();
        assert_eq!(out.channels(), 8);
        // each output channel reads back its contributing part exactly
        assert_eq!(out.channel(0).unwrap(), g);
        for c in 0..3 {
            assert_eq!(out.channel(1 + c).unwrap(), s.channel(c).unwrap());
            assert_eq!(out.channel(4 + c).unwrap(), m.channel(c).unwrap());
        }
        assert_eq!(out.channel(7).unwrap(), k);
    }

    #[test]
    fn channel_concat_single_is_identity() {
        let img = random_image(3, 3, 3, 10);
        assert_eq!(channel_concat(&[&img]).unwrap(), img);
    }

    #[test]
    fn composite_selects_per_pixel() {
        for seed in 0..20 {
            let decoded = random_image(6, 5, 3, seed);
            let original = random_image(6, 5, 3, seed + 50);
            let m = random_mask(6, 5, seed + 99);
            let out = composite_output(&decoded, &original, &m).unwrap();
            for y in 0..6 {
                for x in 0..5 {
                    for c in 0..3 {
                        let expect = if m.get(y, x) == 1 {
                            decoded.get(y, x, c)
                        } else {
                            original.get(y, x, c)
                        };
                        assert_eq!(out.get(y, x, c).to_bits(), expect.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn composite_endpoint_masks() {
        let decoded = random_image(4, 4, 3, 1);
        let original = random_image(4, 4, 3, 2);
        let none = BinaryMask::zeros(4, 4);
        assert_eq!(
            composite_output(&decoded, &original, &none).unwrap(),
            original
        );
        let all = BinaryMask::new(4, 4, vec![1; 16]).unwrap();
        assert_eq!(composite_output(&decoded, &original, &all).unwrap(), decoded);
    }

    #[test]
    fn png_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        for (name, c) in [("g.png", 1), ("rgb.png", 3)] {
            let raw = random_image(9, 7, c, 42);
            // quantize to the 8-bit grid so the roundtrip is exact
            let quantized: Vec<f32> = raw
                .data()
                .iter()
                .map(|&v| (v * 255.0 + 0.5).floor() / 255.0)
                .collect();
            let img = ImageBuffer::new(9, 7, c, quantized).unwrap();
            let path = dir.path().join(name);
            save_png(&path, &img).unwrap();
            let back = load_png(&path).unwrap();
            assert_eq!(back.channels(), c);
            for (a, b) in back.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mask_png_roundtrip_one_bit() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_mask(11, 13, 3);
        let path = dir.path().join("m.png");
        save_mask_png(&path, &m).unwrap();
        assert_eq!(load_mask_png(&path).unwrap(), m);
    }

    #[test]
    fn dilate_grows_mask() {
        let mut m = BinaryMask::zeros(7, 7);
        m.set(3, 3, 1);
        let d = m.dilate(2);
        assert_eq!(d.count_ones(), 25);
        assert_eq!(
            mask_bbox(&d).unwrap(),
            Rect {
                x0: 1,
                y0: 1,
                x1: 6,
                y1: 6
            }
        );
    }
}
