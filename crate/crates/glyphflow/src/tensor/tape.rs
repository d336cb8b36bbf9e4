//! Wengert-list reverse-mode differentiation over the primitive ops.
//!
//! A [`GradTape`] owns every intermediate value of one forward pass. Ops
//! append records in execution order, so the list is already topologically
//! sorted; [`GradTape::backward`] consumes the tape and walks it once in
//! reverse, accumulating vector-Jacobian products.

use super::ops;
use super::{Result, Tensor, TensorError};

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Record {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    ScalarMul { a: Var, c: f32 },
    Mul { a: Var, b: Var },
    Transpose2d { a: Var },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Softmax { a: Var },
    LayerNorm { a: Var, eps: f32 },
    Gelu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SquaredError { a: Var, b: Var },
}

struct Node {
    record: Record,
    value: Tensor,
}

/// Single-owner op recorder; consumed by [`GradTape::backward`].
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input value. Whether a gradient is accumulated for it is
    /// governed by the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Record::Leaf, t.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, record: Record, value: Tensor) -> Var {
        self.nodes.push(Node { record, value });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.val(a), self.val(b))?;
        Ok(self.push(Record::Matmul { a, b }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.val(a), self.val(b))?;
        Ok(self.push(Record::Add { a, b }, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.val(a), self.val(b))?;
        Ok(self.push(Record::Sub { a, b }, out))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = ops::scalar_mul(self.val(a), c)?;
        Ok(self.push(Record::ScalarMul { a, c }, out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.val(a), self.val(b))?;
        Ok(self.push(Record::Mul { a, b }, out))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose2d(self.val(a))?;
        Ok(self.push(Record::Transpose2d { a }, out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = ops::reshape(self.val(a), shape)?;
        Ok(self.push(Record::Reshape { a }, out))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.val(v)).collect();
        let out = ops::concat(&tensors, axis)?;
        Ok(self.push(
            Record::Concat {
                parts: parts.to_vec(),
                axis,
            },
            out,
        ))
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let pieces = ops::split(self.val(a), axis, sizes)?;
        let mut out = Vec::with_capacity(pieces.len());
        let mut start = 0;
        for (tensor, &len) in pieces.into_iter().zip(sizes) {
            out.push(self.push(Record::Slice { a, axis, start }, tensor));
            start += len;
        }
        Ok(out)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_last(self.val(a))?;
        Ok(self.push(Record::Softmax { a }, out))
    }

    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Result<Var> {
        let out = ops::layer_norm_last(self.val(a), eps)?;
        Ok(self.push(Record::LayerNorm { a, eps }, out))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = ops::gelu(self.val(a))?;
        Ok(self.push(Record::Gelu { a }, out))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = ops::sum(self.val(a))?;
        Ok(self.push(Record::Sum { a }, out))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = ops::mean(self.val(a))?;
        Ok(self.push(Record::Mean { a }, out))
    }

    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::squared_error(self.val(a), self.val(b))?;
        Ok(self.push(Record::SquaredError { a, b }, out))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape: one backward
    /// per forward.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("node {} is not on this tape", loss.0),
            });
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1], 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.record {
                Record::Leaf => {
                    grads[id] = Some(g); // keep for the caller
                    continue;
                }
                Record::Matmul { a, b } => {
                    let da = ops::matmul(&g, &ops::transpose2d(self.val(*b))?)?;
                    let db = ops::matmul(&ops::transpose2d(self.val(*a))?, &g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Record::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    let db = ops::sum_to_suffix(&g, self.val(*b).shape())?;
                    accumulate(&mut grads, *b, db)?;
                }
                Record::Sub { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    let db = ops::sum_to_suffix(&g, self.val(*b).shape())?;
                    accumulate(&mut grads, *b, ops::scalar_mul(&db, -1.0)?)?;
                }
                Record::ScalarMul { a, c } => {
                    accumulate(&mut grads, *a, ops::scalar_mul(&g, *c)?)?;
                }
                Record::Mul { a, b } => {
                    accumulate(&mut grads, *a, ops::mul(&g, self.val(*b))?)?;
                    accumulate(&mut grads, *b, ops::mul(&g, self.val(*a))?)?;
                }
                Record::Transpose2d { a } => {
                    accumulate(&mut grads, *a, ops::transpose2d(&g)?)?;
                }
                Record::Reshape { a } => {
                    accumulate(&mut grads, *a, ops::reshape(&g, self.val(*a).shape())?)?;
                }
                Record::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.val(p).shape()[*axis];
                        let piece = ops::slice_axis(&g, *axis, start, len)?;
                        accumulate(&mut grads, p, piece)?;
                        start += len;
                    }
                }
                Record::Slice { a, axis, start } => {
                    let da = embed_slice(self.val(*a).shape(), &g, *axis, *start)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Record::Softmax { a } => {
                    // dx = y * (g - rowsum(g * y))
                    let y = &node.value;
                    let gy = ops::mul(&g, y)?;
                    let da = softmax_vjp(y, &g, &gy)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Record::LayerNorm { a, eps } => {
                    let da = layer_norm_vjp(self.val(*a), &g, *eps)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Record::Gelu { a } => {
                    let x = self.val(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| gv * ops::gelu_grad_scalar(xv))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), data)?)?;
                }
                Record::Sum { a } => {
                    let gs = g.scalar()?;
                    accumulate(&mut grads, *a, Tensor::full(self.val(*a).shape(), gs))?;
                }
                Record::Mean { a } => {
                    let x = self.val(*a);
                    let gs = g.scalar()? / x.numel() as f32;
                    accumulate(&mut grads, *a, Tensor::full(x.shape(), gs))?;
                }
                Record::SquaredError { a, b } => {
                    // d/da mean((a-b)^2) = 2 (a-b) / n
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let scale = 2.0 * g.scalar()? / ta.numel() as f32;
                    let diff = ops::sub(ta, tb)?;
                    let da = ops::scalar_mul(&diff, scale)?;
                    accumulate(&mut grads, *b, ops::scalar_mul(&da, -1.0)?)?;
                    accumulate(&mut grads, *a, da)?;
                }
            }
        }

        // Keep gradients only for grad-enabled leaves.
        for (id, node) in self.nodes.iter().enumerate() {
            let keep = matches!(node.record, Record::Leaf) && node.value.wants_grad();
            if !keep {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    grads[v.0] = Some(match grads[v.0].take() {
        Some(existing) => ops::add(&existing, &g)?,
        None => g,
    });
    Ok(())
}

fn softmax_vjp(y: &Tensor, g: &Tensor, gy: &Tensor) -> Result<Tensor> {
    let last = *y.shape().last().unwrap();
    let rows = y.numel() / last;
    let mut out = vec![0.0f32; y.numel()];
    for r in 0..rows {
        let span = r * last..(r + 1) * last;
        let dot: f64 = gy.data()[span.clone()].iter().map(|&v| v as f64).sum();
        for i in span.clone() {
            out[i] = y.data()[i] * (g.data()[i] - dot as f32);
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

fn layer_norm_vjp(x: &Tensor, g: &Tensor, eps: f32) -> Result<Tensor> {
    let last = *x.shape().last().unwrap();
    let rows = x.numel() / last;
    let n = last as f64;
    let mut out = vec![0.0f32; x.numel()];
    for r in 0..rows {
        let span = r * last..(r + 1) * last;
        let xr = &x.data()[span.clone()];
        let gr = &g.data()[span.clone()];
        let (mean, var) = ops::row_moments(xr);
        let inv = 1.0 / (var + eps as f64).sqrt();
        let g_mean: f64 = gr.iter().map(|&v| v as f64).sum::<f64>() / n;
        let gxhat: f64 = gr
            .iter()
            .zip(xr)
            .map(|(&gv, &xv)| gv as f64 * (xv as f64 - mean) * inv)
            .sum::<f64>()
            / n;
        for (o, (&gv, &xv)) in out[span].iter_mut().zip(gr.iter().zip(xr)) {
            let xhat = (xv as f64 - mean) * inv;
            *o = (inv * (gv as f64 - g_mean - xhat * gxhat)) as f32;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Zero tensor of `shape` with `g` written at offset `start` along `axis`.
fn embed_slice(shape: &[usize], g: &Tensor, axis: usize, start: usize) -> Result<Tensor> {
    let outer: usize = shape[..axis].iter().product();
    let adim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let len = g.shape()[axis];
    let mut out = vec![0.0f32; shape.iter().product()];
    for o in 0..outer {
        let dst = (o * adim + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::new(shape.to_vec(), out)
}

/// Gradients produced by one backward pass, keyed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
