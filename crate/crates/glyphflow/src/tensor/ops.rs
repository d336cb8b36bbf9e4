//! The primitive op set.
//!
//! Every op is a pure function: inputs are borrowed, the output is a fresh
//! tensor. [`crate::tensor::GradTape`] wraps these for recording; the
//! functions here are also used directly wherever no gradient is needed
//! (sampling, data preparation, VJPs).
//!
//! Reductions (`sum`, `mean`, `squared_error`, and the layer-norm moments)
//! accumulate in f64.

use super::{Result, Tensor, TensorError};

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// Rows × columns view of the last axis: `(rows, last_dim)`.
fn last_axis(t: &Tensor) -> (usize, usize) {
    let last = *t.shape().last().expect("tensors have at least one dim");
    (t.numel() / last, last)
}

/// True when `b` is `a`'s shape suffix (row-vector style broadcast).
fn is_suffix(a: &Tensor, b: &Tensor) -> bool {
    let (sa, sb) = (a.shape(), b.shape());
    sb.len() < sa.len() && sa[sa.len() - sb.len()..] == *sb
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = ad[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Elementwise add; the right operand may also be a shape suffix of the
/// left (e.g. `[n, d] + [d]`), broadcast across the leading dims.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_broadcast("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_broadcast("sub", a, b, |x, y| x - y)
}

fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if is_suffix(a, b) {
        let bn = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % bn]))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    Err(shape_err(op, a, b))
}

pub fn scalar_mul(a: &Tensor, c: f32) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn transpose2d(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(TensorError::Invalid {
            op: "transpose2d",
            msg: format!("expected 2-d, got {s:?}"),
        });
    }
    let (m, n) = (s[0], s[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() || shape.contains(&0) {
        return Err(TensorError::Invalid {
            op: "reshape",
            msg: format!("cannot view {:?} as {shape:?}", a.shape()),
        });
    }
    // Same bytes, new dims.
    let mut out = a.clone();
    out.shape = shape.to_vec();
    Ok(out)
}

/// `(outer, axis_dim, inner)` strides around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| TensorError::Invalid {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    if axis >= first.shape().len() {
        return Err(TensorError::Invalid {
            op: "concat",
            msg: format!("axis {axis} out of range for {:?}", first.shape()),
        });
    }
    let mut axis_total = 0;
    for p in parts {
        let mut want = p.shape().to_vec();
        let mut have = first.shape().to_vec();
        want[axis] = 0;
        have[axis] = 0;
        if want != have {
            return Err(shape_err("concat", first, p));
        }
        axis_total += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = axis_total;
    let (outer, _, inner) = around_axis(&shape, axis);
    let mut out = vec![0.0f32; shape.iter().product()];
    for o in 0..outer {
        let mut at = 0;
        for p in parts {
            let pa = p.shape()[axis];
            let src = &p.data()[o * pa * inner..(o + 1) * pa * inner];
            let dst_start = (o * axis_total + at) * inner;
            out[dst_start..dst_start + pa * inner].copy_from_slice(src);
            at += pa;
        }
    }
    Tensor::new(shape, out)
}

/// Contiguous slab `[start, start+len)` along `axis`.
pub fn slice_axis(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let s = a.shape();
    if axis >= s.len() || start + len > s[axis] || len == 0 {
        return Err(TensorError::Invalid {
            op: "slice_axis",
            msg: format!("slice [{start}, {}) on axis {axis} of {s:?}", start + len),
        });
    }
    let (outer, adim, inner) = around_axis(s, axis);
    let mut shape = s.to_vec();
    shape[axis] = len;
    let mut out = vec![0.0f32; outer * len * inner];
    for o in 0..outer {
        let src_start = (o * adim + start) * inner;
        out[o * len * inner..(o + 1) * len * inner]
            .copy_from_slice(&a.data()[src_start..src_start + len * inner]);
    }
    Tensor::new(shape, out)
}

pub fn split(a: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = sizes.iter().sum();
    if axis >= a.shape().len() || total != a.shape()[axis] {
        return Err(TensorError::Invalid {
            op: "split",
            msg: format!("sizes {sizes:?} do not tile axis {axis} of {:?}", a.shape()),
        });
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &len in sizes {
        out.push(slice_axis(a, axis, at, len)?);
        at += len;
    }
    Ok(out)
}

/// Softmax along the last axis, with the usual row-max shift.
pub fn softmax_last(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = last_axis(a);
    let mut out = vec![0.0f32; a.numel()];
    for r in 0..rows {
        let row = &a.data()[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0f64;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            total += e as f64;
        }
        let inv = (1.0 / total) as f32;
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o *= inv;
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Layer norm along the last axis with population variance and no affine
/// parameters: `(x - mean) / sqrt(var + eps)`.
pub fn layer_norm_last(a: &Tensor, eps: f32) -> Result<Tensor> {
    if eps < 0.0 {
        return Err(TensorError::Invalid {
            op: "layer_norm",
            msg: format!("negative eps {eps}"),
        });
    }
    let (rows, cols) = last_axis(a);
    let mut out = vec![0.0f32; a.numel()];
    for r in 0..rows {
        let row = &a.data()[r * cols..(r + 1) * cols];
        let (mean, var) = row_moments(row);
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = ((v as f64 - mean) * inv) as f32;
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

pub(crate) fn row_moments(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

/// tanh-form GELU.
pub fn gelu(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| gelu_scalar(x)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sum(a: &Tensor) -> Result<Tensor> {
    let total: f64 = a.data().iter().map(|&v| v as f64).sum();
    Ok(Tensor::scalar_tensor(total as f32))
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    let total: f64 = a.data().iter().map(|&v| v as f64).sum();
    Ok(Tensor::scalar_tensor((total / a.numel() as f64) as f32))
}

/// Mean squared error, `mean((a - b)^2)`, as a scalar tensor.
pub fn squared_error(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("squared_error", a, b));
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok(Tensor::scalar_tensor((total / a.numel() as f64) as f32))
}

/// Reduce `g` over leading dims until it matches `shape` (broadcast VJP).
pub(crate) fn sum_to_suffix(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let bn: usize = shape.iter().product();
    let mut out = vec![0.0f64; bn];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % bn] += v as f64;
    }
    Tensor::new(shape.to_vec(), out.into_iter().map(|v| v as f32).collect())
}
