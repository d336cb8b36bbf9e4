//! Sentence accuracy, normalized edit distance, and a Fréchet feature
//! distance over a toy 64-dim extractor.
//!
//! NED is `1 - levenshtein / max(len)`, so higher is better and two empty
//! strings score 1. The Fréchet distance fits a Gaussian to each feature
//! set (covariance normalized by `n - 1`, plus `1e-6 I` jitter) and uses
//! the symmetrized square-root form `tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`,
//! computed by symmetric eigendecomposition with negative eigenvalues
//! clamped to zero.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{DatasetError, Manifest};
use crate::glyphs::{self, GlyphError};
use crate::imaging::{bilinear_resize, crop, load_png, mask_bbox, ImageBuffer, ImagingError};
use crate::tensor::{Tensor, TensorError};

/// Feature width of the toy extractor (8x8 grayscale thumbnail).
pub const FEATURE_DIM: usize = 64;
const COVARIANCE_JITTER: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("feature set needs at least 2 rows for a covariance, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite feature values")]
    NonFinite,
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Glyph(#[from] GlyphError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// One prediction/reference pairing for evaluation.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub predicted_text: String,
    pub ground_truth: String,
}

/// `n x d` feature matrix with its extractor tag.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Tensor,
    pub extractor: String,
}

impl FeatureSet {
    pub fn new(features: Tensor, extractor: &str) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(MetricsError::Invalid {
                op: "feature_set",
                msg: format!("expected [n, d], got {:?}", features.shape()),
            });
        }
        if !features.is_finite() {
            return Err(MetricsError::NonFinite);
        }
        Ok(FeatureSet {
            features,
            extractor: extractor.to_string(),
        })
    }

    pub fn from_images<'a>(images: impl Iterator<Item = &'a ImageBuffer>) -> Result<Self> {
        let mut rows = Vec::new();
        let mut n = 0;
        for image in images {
            rows.extend_from_slice(extract_features(image).data());
            n += 1;
        }
        FeatureSet::new(Tensor::new(vec![n, FEATURE_DIM], rows)?, "gray8x8")
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(crate::tensor::gft::save(path, &self.features)?)
    }

    pub fn load(path: &Path, extractor: &str) -> Result<Self> {
        FeatureSet::new(crate::tensor::gft::load(path)?, extractor)
    }
}

/// Levenshtein distance over codepoints (two-row iterative form).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Normalized edit distance: `1 - lev / max(len)`, `ned("", "") = 1`.
pub fn ned(pred: &str, gt: &str) -> f64 {
    let denom = pred.chars().count().max(gt.chars().count());
    if denom == 0 {
        return 1.0;
    }
    1.0 - levenshtein(pred, gt) as f64 / denom as f64
}

/// Fraction of records whose prediction matches exactly.
pub fn seq_acc(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(MetricsError::Invalid {
            op: "seq_acc",
            msg: "no records".into(),
        });
    }
    let hits = records
        .iter()
        .filter(|r| r.predicted_text == r.ground_truth)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Toy feature extractor: grayscale, corner-aligned bilinear resize to
/// 8x8, flattened.
pub fn extract_features(image: &ImageBuffer) -> Tensor {
    let gray = image.to_gray();
    let thumb = bilinear_resize(&gray, 8, 8).expect("8x8 output");
    Tensor::new(vec![FEATURE_DIM], thumb.data().to_vec()).expect("64 values")
}

fn mean_and_covariance(set: &FeatureSet) -> (Vec<f64>, DMatrix<f64>) {
    let n = set.len();
    let d = set.features.shape()[1];
    let data = set.features.data();
    let mut mean = vec![0.0f64; d];
    for row in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += data[row * d + j] as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in 0..n {
        for i in 0..d {
            let di = data[row * d + i] as f64 - mean[i];
            for j in i..d {
                let dj = data[row * d + j] as f64 - mean[j];
                cov[(i, j)] += di * dj;
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] * norm;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += COVARIANCE_JITTER;
    }
    (mean, cov)
}

/// PSD square root by symmetric eigendecomposition, clamping negative
/// eigenvalues to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
        let root = lambda.max(0.0).sqrt();
        for r in 0..scaled.nrows() {
            scaled[(r, c)] *= root;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    for set in [a, b] {
        if set.len() < 2 {
            return Err(MetricsError::TooFewSamples(set.len()));
        }
        if !set.features.is_finite() {
            return Err(MetricsError::NonFinite);
        }
    }
    if a.features.shape()[1] != b.features.shape()[1] {
        return Err(MetricsError::Invalid {
            op: "frechet",
            msg: format!(
                "feature widths differ: {:?} vs {:?}",
                a.features.shape(),
                b.features.shape()
            ),
        });
    }
    let (mu_a, cov_a) = mean_and_covariance(a);
    let (mu_b, cov_b) = mean_and_covariance(b);
    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let root_a = sqrtm_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let cross = sqrtm_psd(&inner);
    let trace_term = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace_term).max(0.0))
}

/// Aggregated evaluation over a prediction directory.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub seq_acc: f64,
    pub ned_mean: f64,
    pub frechet: f64,
    pub n_evaluated: usize,
    pub missing: Vec<String>,
}

impl EvalReport {
    /// Documented key-value serialization.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "seq_acc={:.6}\nned_mean={:.6}\nfrechet={:.6}\nn_evaluated={}\nn_missing={}\n",
            self.seq_acc,
            self.ned_mean,
            self.frechet,
            self.n_evaluated,
            self.missing.len()
        );
        if !self.missing.is_empty() {
            out.push_str(&format!("missing={}\n", self.missing.join(",")));
        }
        out
    }

    pub fn render_table(&self) -> String {
        format!(
            "+-----------+----------+\n\
             | metric    | value    |\n\
             +-----------+----------+\n\
             | Seq. ACC  | {:>8.4} |\n\
             | NED       | {:>8.4} |\n\
             | Frechet   | {:>8.4} |\n\
             | samples   | {:>8} |\n\
             | missing   | {:>8} |\n\
             +-----------+----------+",
            self.seq_acc,
            self.ned_mean,
            self.frechet,
            self.n_evaluated,
            self.missing.len()
        )
    }
}

/// Evaluate predictions named `{id}.pred.png` under `pred_dir` against a
/// manifest rooted at `base`. Missing predictions are excluded and listed.
pub fn evaluate(pred_dir: &Path, manifest: &Manifest, base: &Path) -> Result<EvalReport> {
    struct PerRecord {
        record: EvalRecord,
        ned: f64,
        pred_features: Vec<f32>,
        ref_features: Vec<f32>,
    }

    let mut missing = Vec::new();
    let mut jobs = Vec::new();
    for record in &manifest.records {
        let pred_path = pred_dir.join(format!("{}.pred.png", record.id));
        if pred_path.exists() {
            jobs.push((record.clone(), pred_path));
        } else {
            missing.push(record.id.clone());
        }
    }
    if jobs.is_empty() {
        return Err(MetricsError::Invalid {
            op: "evaluate",
            msg: "no predictions found".into(),
        });
    }

    let rows: Vec<PerRecord> = jobs
        .par_iter()
        .map(|(record, pred_path)| -> Result<PerRecord> {
            let pred = load_png(pred_path)?;
            let reference = load_png(&base.join(&record.edit_path))?;
            let mask = crate::imaging::load_mask_png(&base.join(&record.mask_path))?;
            let font = glyphs::fonts().by_name(&record.language)?;
            let bbox = mask_bbox(&mask)?;
            let predicted_text = glyphs::recognize(&crop(&pred, bbox)?, font);
            let eval = EvalRecord {
                predicted_text,
                ground_truth: record.target_text.clone(),
            };
            let ned_score = ned(&eval.predicted_text, &eval.ground_truth);
            Ok(PerRecord {
                record: eval,
                ned: ned_score,
                pred_features: extract_features(&pred).data().to_vec(),
                ref_features: extract_features(&reference).data().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let records: Vec<EvalRecord> = rows.iter().map(|r| r.record.clone()).collect();
    let accuracy = seq_acc(&records)?;
    let ned_mean = rows.iter().map(|r| r.ned).sum::<f64>() / rows.len() as f64;

    let frechet_score = if rows.len() >= 2 {
        let pred_set = FeatureSet::new(
            Tensor::new(
                vec![rows.len(), FEATURE_DIM],
                rows.iter().flat_map(|r| r.pred_features.clone()).collect(),
            )?,
            "gray8x8",
        )?;
        let ref_set = FeatureSet::new(
            Tensor::new(
                vec![rows.len(), FEATURE_DIM],
                rows.iter().flat_map(|r| r.ref_features.clone()).collect(),
            )?,
            "gray8x8",
        )?;
        frechet(&pred_set, &ref_set)?
    } else {
        f64::NAN
    };

    Ok(EvalReport {
        seq_acc: accuracy,
        ned_mean,
        frechet: frechet_score,
        n_evaluated: rows.len(),
        missing,
    })
}
