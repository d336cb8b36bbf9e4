//! Dense f32 tensors, the primitive op set, and reverse-mode gradients.
//!
//! Tensors are immutable values: every op allocates its output, so a tensor
//! can be shared read-only across threads. Gradients are computed by
//! recording ops on a single-owner [`GradTape`] and consuming it with
//! [`GradTape::backward`].

pub mod gft;
pub mod ops;
pub mod rng;
pub mod tape;

pub use tape::{GradTape, Gradients, Var};

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite value encountered (max abs {max_abs:e})")]
    NonFinite { op: &'static str, max_abs: f32 },
    #[error("tensor i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major f32 tensor. Data is behind an [`Arc`] so clones and
/// tape-saved activations are cheap.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "new",
                msg: format!("zero dim in shape {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "new",
                msg: format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            requires_grad: false,
        }
    }

    pub fn scalar_tensor(value: f32) -> Self {
        Tensor::full(&[1], value)
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn wants_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access, copying only if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn scalar(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "scalar",
                msg: format!("expected 1 element, got shape {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Little-endian f32 payload, used by checksums and bit-exact compares.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Central-difference gradient estimate of a scalar-valued function.
///
/// This is the test oracle for [`GradTape::backward`]; it only ever calls
/// `f` forward, so it stays independent of the reverse-mode path.
///
/// The step is snapped to the nearest power of two so that `x ± h` (and,
/// for well-scaled inputs, low-degree polynomial evaluations of it) stay
/// exactly representable in f32; that keeps the difference quotient from
/// being dominated by representation roundoff.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(TensorError::Invalid {
            op: "finite_diff_grad",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let h = (2.0f32).powi(h.log2().round() as i32);
    let mut grad = vec![0.0f32; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus)?)?.scalar()?;
        let fm = f(&Tensor::new(x.shape().to_vec(), minus)?)?.scalar()?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_grad",
                max_abs: fp.abs().max(fm.abs()),
            });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}
