//! Forward and backward kernels. All functions are pure; the
//! [`Tape`](crate::autograd::Tape) decides which of them to record.

pub mod conv;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv_out_size, deconv2d, deconv_out_size};
pub use norm::{batch_norm_eval, batch_norm_train, RunningStats};
pub use pool::max_pool2d;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at `x = 0`.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = grad_out.clone();
    for (g, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EltwiseMode {
    Sum,
    Prod,
}

pub fn eltwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: EltwiseMode) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::InputMismatch { index: 1, expected: a.shape().to_vec(), got: b.shape().to_vec() });
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        match mode {
            EltwiseMode::Sum => *o += bv,
            EltwiseMode::Prod => *o *= bv,
        }
    }
    Ok(out)
}

/// Concatenates `N×Ci×H×W` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let first = inputs.first().ok_or(TensorError::Empty("concat_channels"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut channels = 0;
    for (i, t) in inputs.iter().enumerate() {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(TensorError::InputMismatch { index: i, expected: first.shape().to_vec(), got: t.shape().to_vec() });
        }
        channels += tc;
    }
    let mut data = Vec::with_capacity(n * channels * h * w);
    for b in 0..n {
        for t in inputs {
            data.extend_from_slice(t.batch_item(b));
        }
    }
    Tensor::new(&[n, channels, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>, TensorError> {
    let (n, _, h, w) = grad.dims4()?;
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|c| Vec::with_capacity(n * c * plane)).collect();
    for b in 0..n {
        let mut item = grad.batch_item(b);
        for (part, &c) in parts.iter_mut().zip(channels) {
            let (head, rest) = item.split_at(c * plane);
            part.extend_from_slice(head);
            item = rest;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::new(&[n, c, h, w], d))
        .collect()
}

/// Rearranges a head output `N×(B·K)×H×W` into rows `N×(H·W·B)×K`, ordered
/// row-major over cells and box-minor, matching the anchor ordering.
pub fn flatten_head<T: Scalar>(input: &Tensor<T>, row_width: usize) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = input.dims4()?;
    if row_width == 0 || c % row_width != 0 {
        return Err(TensorError::Shape {
            op: "flatten_head",
            detail: format!("{c} channels are not a multiple of row width {row_width}"),
        });
    }
    let boxes = c / row_width;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let (bx, k) = (ch / row_width, ch % row_width);
            for cell in 0..h * w {
                out[((b * h * w + cell) * boxes + bx) * row_width + k] = x[(b * c + ch) * h * w + cell];
            }
        }
    }
    Tensor::new(&[n, h * w * boxes, row_width], out)
}

pub fn flatten_head_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>, row_width: usize) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let boxes = c / row_width;
    let g = grad_out.data();
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let (bx, k) = (ch / row_width, ch % row_width);
            for cell in 0..h * w {
                d[(b * c + ch) * h * w + cell] = g[((b * h * w + cell) * boxes + bx) * row_width + k];
            }
        }
    }
    dx
}

/// Concatenates `N×Ri×K` tensors along the row axis.
pub fn concat_rows<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let first = inputs.first().ok_or(TensorError::Empty("concat_rows"))?;
    let [n, _, k] = *first.shape() else {
        return Err(TensorError::Rank { expected: 3, shape: first.shape().to_vec() });
    };
    let mut rows = 0;
    for (i, t) in inputs.iter().enumerate() {
        match *t.shape() {
            [tn, r, tk] if tn == n && tk == k => rows += r,
            _ => return Err(TensorError::InputMismatch { index: i, expected: first.shape().to_vec(), got: t.shape().to_vec() }),
        }
    }
    let mut data = Vec::with_capacity(n * rows * k);
    for b in 0..n {
        for t in inputs {
            data.extend_from_slice(t.batch_item(b));
        }
    }
    Tensor::new(&[n, rows, k], data)
}

pub fn split_rows<T: Scalar>(grad: &Tensor<T>, rows: &[usize]) -> Vec<Tensor<T>> {
    let (n, k) = (grad.shape()[0], grad.shape()[2]);
    let mut parts: Vec<Vec<T>> = rows.iter().map(|r| Vec::with_capacity(n * r * k)).collect();
    for b in 0..n {
        let mut item = grad.batch_item(b);
        for (part, &r) in parts.iter_mut().zip(rows) {
            let (head, rest) = item.split_at(r * k);
            part.extend_from_slice(head);
            item = rest;
        }
    }
    parts
        .into_iter()
        .zip(rows)
        .map(|(d, &r)| Tensor::new(&[n, r, k], d).expect("split sizes"))
        .collect()
}

/// Row-wise softmax of a `R×K` matrix (any leading dims collapsed into rows).
pub fn softmax_rows<T: Scalar>(logits: &[T], width: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(width) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// `-log softmax(row)[label]`, stabilized by max subtraction.
pub fn cross_entropy_row<T: Scalar>(row: &[T], label: usize) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
    lse - row[label]
}

pub fn smooth_l1_value<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    if x.abs() < T::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}
