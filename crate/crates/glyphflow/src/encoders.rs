//! Frozen encoder stand-ins: an exactly invertible orthogonal patch codec
//! in place of a learned VAE, and deterministic hash-based text embedders
//! in the pooled/sequence encoder roles.
//!
//! The codec mixes each non-overlapping `p x p` patch of every channel
//! independently with one orthogonal matrix `W` (`p^2 x p^2`), so input
//! channel `c` owns latent channels `c*p^2 .. (c+1)*p^2` and channel
//! groups of a composite stay separable in latent space. `W` is generated
//! once from a fixed seed and never updated by training; checkpoints carry
//! it as the tensor `codec.W`.

#![allow(clippy::needless_range_loop)]

use thiserror::Error;

use crate::imaging::ImageBuffer;
use crate::tensor::rng::{derive_seed, seeded_randn};
use crate::tensor::Tensor;

/// Seed for the codec matrix.
pub const CODEC_SEED: u64 = 7;
/// Patch edge, fixed at desk scale.
pub const CODEC_PATCH: usize = 2;
/// Text embedding width shared by both embedders.
pub const D_TXT: usize = 32;

const EMBED_TAG: u64 = 0x74_78_74; // "txt"

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encode: {h}x{w} not divisible by patch {p}")]
    Indivisible { h: usize, w: usize, p: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("codec matrix is not orthogonal (max residual {residual:e})")]
    NotOrthogonal { residual: f32 },
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Frozen per-patch orthogonal codec.
#[derive(Debug, Clone)]
pub struct LatentCodec {
    patch: usize,
    /// `[p^2, p^2]`, rows are the analysis directions.
    w: Tensor,
}

impl LatentCodec {
    /// Orthogonalize a seeded Gaussian matrix (modified Gram–Schmidt in
    /// f64, stored as f32).
    pub fn seeded(patch: usize, seed: u64) -> Self {
        let d = patch * patch;
        let gauss = seeded_randn(&[d, d], seed);
        let mut rows: Vec<Vec<f64>> = (0..d)
            .map(|r| gauss.data()[r * d..(r + 1) * d].iter().map(|&v| v as f64).collect())
            .collect();
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                for k in 0..d {
                    rows[i][k] -= dot * rows[j][k];
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-6, "seeded Gaussian rows are independent");
            for v in &mut rows[i] {
                *v /= norm;
            }
        }
        let data: Vec<f32> = rows.into_iter().flatten().map(|v| v as f32).collect();
        LatentCodec {
            patch,
            w: Tensor::new(vec![d, d], data).expect("square matrix"),
        }
    }

    /// The codec used everywhere: patch 2, seed 7.
    pub fn standard() -> Self {
        LatentCodec::seeded(CODEC_PATCH, CODEC_SEED)
    }

    /// Rebuild from a persisted `codec.W` tensor, verifying orthogonality.
    pub fn from_matrix(w: Tensor) -> Result<Self> {
        let s = w.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(EncoderError::Invalid {
                op: "from_matrix",
                msg: format!("expected square matrix, got {s:?}"),
            });
        }
        let d = s[0];
        let patch = (d as f64).sqrt().round() as usize;
        if patch * patch != d {
            return Err(EncoderError::Invalid {
                op: "from_matrix",
                msg: format!("dimension {d} is not a square"),
            });
        }
        let codec = LatentCodec { patch, w };
        let residual = codec.orthogonality_residual();
        if residual > 1e-5 {
            return Err(EncoderError::NotOrthogonal { residual });
        }
        Ok(codec)
    }

    /// `max |WᵀW - I|`.
    pub fn orthogonality_residual(&self) -> f32 {
        let d = self.patch * self.patch;
        let wd = self.w.data();
        let mut worst = 0.0f32;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| (wd[k * d + i] * wd[k * d + j]) as f64).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs() as f32);
            }
        }
        worst
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn matrix(&self) -> &Tensor {
        &self.w
    }

    pub fn latent_channels(&self, image_channels: usize) -> usize {
        image_channels * self.patch * self.patch
    }

    /// Image `[H, W, C]` to latent `[H/p, W/p, C*p^2]`.
    pub fn encode(&self, image: &ImageBuffer) -> Result<Tensor> {
        self.encode_tensor(&image.to_tensor())
    }

    /// Same as [`LatentCodec::encode`] for a raw `[H, W, C]` tensor (values
    /// need not be in `[0, 1]`, which the interpolated planes are not).
    pub fn encode_tensor(&self, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(EncoderError::Invalid {
                op: "encode",
                msg: format!("expected [H, W, C], got {s:?}"),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(EncoderError::Indivisible { h, w, p });
        }
        let d = p * p;
        let (gh, gw) = (h / p, w / p);
        let wd = self.w.data();
        let mut out = vec![0.0f32; gh * gw * c * d];
        let mut v = vec![0.0f32; d];
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            v[dy * p + dx] = t.data()[((gy * p + dy) * w + gx * p + dx) * c + ch];
                        }
                    }
                    let base = (gy * gw + gx) * c * d + ch * d;
                    for k in 0..d {
                        let mut acc = 0.0f32;
                        for (j, &vj) in v.iter().enumerate() {
                            acc += wd[k * d + j] * vj;
                        }
                        out[base + k] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![gh, gw, c * d], out).map_err(|e| EncoderError::Invalid {
            op: "encode",
            msg: e.to_string(),
        })
    }

    /// Latent `[H/p, W/p, C*p^2]` back to a raw `[H, W, C]` tensor (Wᵀ per
    /// patch), without clamping.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        let p = self.patch;
        let d = p * p;
        if s.len() != 3 || !s[2].is_multiple_of(d) {
            return Err(EncoderError::Invalid {
                op: "decode",
                msg: format!("latent shape {s:?} inconsistent with patch {p}"),
            });
        }
        let (gh, gw, c) = (s[0], s[1], s[2] / d);
        let (h, w) = (gh * p, gw * p);
        let wd = self.w.data();
        let mut out = vec![0.0f32; h * w * c];
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    let base = (gy * gw + gx) * c * d + ch * d;
                    for dy in 0..p {
                        for dx in 0..p {
                            let j = dy * p + dx;
                            let mut acc = 0.0f32;
                            for k in 0..d {
                                acc += wd[k * d + j] * z.data()[base + k];
                            }
                            out[((gy * p + dy) * w + gx * p + dx) * c + ch] = acc;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![h, w, c], out).map_err(|e| EncoderError::Invalid {
            op: "decode",
            msg: e.to_string(),
        })
    }

    /// Decode and clamp into a displayable image.
    pub fn decode(&self, z: &Tensor) -> Result<ImageBuffer> {
        let raw = self.decode_tensor(z)?;
        ImageBuffer::from_tensor_clamped(&raw).map_err(|e| EncoderError::Invalid {
            op: "decode",
            msg: e.to_string(),
        })
    }
}

fn codepoint_vector(c: char, d_txt: usize) -> Vec<f32> {
    let raw = seeded_randn(&[d_txt], derive_seed(EMBED_TAG, &[c as u64]));
    let norm: f64 = raw.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    raw.data().iter().map(|&v| (v as f64 / norm) as f32).collect()
}

/// Per-codepoint unit vectors, one row per character of `text`.
pub fn embed_content_text(text: &str, d_txt: usize) -> Result<Tensor> {
    if text.is_empty() {
        return Err(EncoderError::Invalid {
            op: "embed_content_text",
            msg: "content text must be nonempty".into(),
        });
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for c in text.chars() {
        data.extend(codepoint_vector(c, d_txt));
        rows += 1;
    }
    Ok(Tensor::new(vec![rows, d_txt], data).expect("rows * d_txt values"))
}

/// L2-normalized sum of codepoint vectors; the empty string embeds as the
/// zero vector (normalization skipped).
pub fn embed_style_text(text: &str, d_txt: usize) -> Tensor {
    let mut acc = vec![0.0f64; d_txt];
    for c in text.chars() {
        for (a, v) in acc.iter_mut().zip(codepoint_vector(c, d_txt)) {
            *a += v as f64;
        }
    }
    let norm: f64 = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let data: Vec<f32> = if norm > 0.0 {
        acc.into_iter().map(|v| (v / norm) as f32).collect()
    } else {
        vec![0.0; d_txt]
    };
    Tensor::new(vec![1, d_txt], data).expect("d_txt values")
}
