//! Convolution and transposed convolution via im2col + GEMM.
//!
//! Weights are `[Cout, Cin, k, k]` for [`conv2d`] and `[Cin, Cout, k, k]` for
//! [`deconv2d`], so a transposed convolution uses the same weight tensor as the
//! convolution it is the adjoint of.

use crate::error::TensorError;
use crate::tensor::{matmul, Scalar, Tensor};

/// Spatial output extent of a convolution: `floor((h + 2·pad − k)/stride) + 1`.
pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > h + 2 * pad {
        return None;
    }
    Some((h + 2 * pad - k) / stride + 1)
}

/// Spatial output extent of a transposed convolution: `(h − 1)·stride − 2·pad + k`.
pub fn deconv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> i64 {
    (h as i64 - 1) * stride as i64 - 2 * pad as i64 + k as i64
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(img: &[T], g: &Geometry, col: &mut [T]) {
    let plane = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.height + ii as usize) * g.width..][..g.width];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.width as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, img: &mut [T]) {
    let plane = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.height + ii as usize) * g.width..][..g.width];
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.width {
                            dst[jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(
    op: &'static str,
    input: &[usize],
    weight: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, Geometry, usize), TensorError> {
    let [n, cin, h, w] = *input else {
        return Err(TensorError::Rank { expected: 4, shape: input.to_vec() });
    };
    let [cout, wcin, kh, kw] = *weight else {
        return Err(TensorError::Rank { expected: 4, shape: weight.to_vec() });
    };
    if kh != kw {
        return Err(TensorError::Shape { op, detail: format!("kernel must be square, got {kh}x{kw}") });
    }
    if wcin != cin {
        return Err(TensorError::Shape {
            op,
            detail: format!("input has {cin} channels but weight expects {wcin}"),
        });
    }
    if stride == 0 {
        return Err(TensorError::Argument(format!("{op}: stride must be positive")));
    }
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let (Some(out_h), Some(out_w)) = (oh, ow) else {
        return Err(TensorError::EmptyOutput {
            op,
            height: (h as i64 + 2 * pad as i64 - kh as i64).div_euclid(stride as i64) + 1,
            width: (w as i64 + 2 * pad as i64 - kw as i64).div_euclid(stride as i64) + 1,
        });
    };
    let g = Geometry { channels: cin, height: h, width: w, kernel: kh, stride, pad, out_h, out_w };
    Ok((n, g, cout))
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, g, cout) = conv_geometry("conv2d", input.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("bias has {} entries for {cout} output channels", b.len()),
            });
        }
    }
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); n * cout * cols];
    for (img, dst) in input.data().chunks(g.channels * g.height * g.width).zip(out.chunks_mut(cout * cols)) {
        im2col(img, &g, &mut col);
        matmul(cout, rows, cols, weight.data(), false, &col, false, T::zero(), dst);
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_mut(cols).enumerate() {
                let bv = b.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[n, cout, g.out_h, g.out_w], out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>, TensorError> {
    let (_, g, cout) = conv_geometry("conv2d", input.shape(), weight.shape(), stride, pad)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut dcol = vec![T::zero(); rows * cols];
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[cout]);
    let in_stride = g.channels * g.height * g.width;
    for (i, dy) in grad_out.data().chunks(cout * cols).enumerate() {
        let img = &input.data()[i * in_stride..(i + 1) * in_stride];
        im2col(img, &g, &mut col);
        matmul(cout, cols, rows, dy, false, &col, true, T::one(), dw.data_mut());
        matmul(rows, cout, cols, weight.data(), true, dy, false, T::zero(), &mut dcol);
        col2im(&dcol, &g, &mut dx.data_mut()[i * in_stride..(i + 1) * in_stride]);
        for (co, plane) in dy.chunks(cols).enumerate() {
            db.data_mut()[co] += plane.iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    Ok(ConvGrads { input: dx, weight: dw, bias: db })
}

fn deconv_geometry(
    input: &[usize],
    weight: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, Geometry), TensorError> {
    let [n, cin, h, w] = *input else {
        return Err(TensorError::Rank { expected: 4, shape: input.to_vec() });
    };
    let [wcin, cout, kh, kw] = *weight else {
        return Err(TensorError::Rank { expected: 4, shape: weight.to_vec() });
    };
    if kh != kw {
        return Err(TensorError::Shape { op: "deconv2d", detail: format!("kernel must be square, got {kh}x{kw}") });
    }
    if wcin != cin {
        return Err(TensorError::Shape {
            op: "deconv2d",
            detail: format!("input has {cin} channels but weight expects {wcin}"),
        });
    }
    if stride == 0 {
        return Err(TensorError::Argument("deconv2d: stride must be positive".into()));
    }
    let oh = deconv_out_size(h, kh, stride, pad);
    let ow = deconv_out_size(w, kw, stride, pad);
    if oh <= 0 || ow <= 0 {
        return Err(TensorError::EmptyOutput { op: "deconv2d", height: oh, width: ow });
    }
    // The geometry describes the adjoint convolution: image = deconv output, columns = deconv input.
    let g = Geometry {
        channels: cout,
        height: oh as usize,
        width: ow as usize,
        kernel: kh,
        stride,
        pad,
        out_h: h,
        out_w: w,
    };
    Ok((n, cin, g))
}

pub fn deconv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, cin, g) = deconv_geometry(input.shape(), weight.shape(), stride, pad)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let out_stride = g.channels * g.height * g.width;
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); n * out_stride];
    for (x, dst) in input.data().chunks(cin * cols).zip(out.chunks_mut(out_stride)) {
        matmul(rows, cin, cols, weight.data(), true, x, false, T::zero(), &mut col);
        col2im(&col, &g, dst);
    }
    Tensor::new(&[n, g.channels, g.height, g.width], out)
}

pub struct DeconvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
}

pub fn deconv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<DeconvGrads<T>, TensorError> {
    let (_, cin, g) = deconv_geometry(input.shape(), weight.shape(), stride, pad)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let out_stride = g.channels * g.height * g.width;
    let mut col = vec![T::zero(); rows * cols];
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(weight.shape());
    for (i, dy) in grad_out.data().chunks(out_stride).enumerate() {
        im2col(dy, &g, &mut col);
        let x = &input.data()[i * cin * cols..(i + 1) * cin * cols];
        matmul(cin, rows, cols, weight.data(), false, &col, false, T::zero(), &mut dx.data_mut()[i * cin * cols..(i + 1) * cin * cols]);
        matmul(cin, cols, rows, x, false, &col, true, T::one(), dw.data_mut());
    }
    Ok(DeconvGrads { input: dx, weight: dw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, k, _) = w.dims4().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b_ in 0..n {
            for co in 0..cout {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b_ * cin + ci) * h + ii as usize) * wd + jj as usize];
                                    let wv = w.data()[((co * cin + ci) * k + ki) * k + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((b_ * cout + co) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        out
    }

    /// Scatter-accumulate transposed convolution.
    fn naive_deconv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (_, cout, k, _) = w.dims4().unwrap();
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for ci in 0..cin {
                for i in 0..h {
                    for j in 0..wd {
                        let xv = x.data()[((b * cin + ci) * h + i) * wd + j];
                        for co in 0..cout {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let oi = (i * stride + ki) as isize - pad as isize;
                                    let oj = (j * stride + kj) as isize - pad as isize;
                                    if oi < 0 || oj < 0 || oi >= oh as isize || oj >= ow as isize {
                                        continue;
                                    }
                                    let wv = w.data()[((ci * cout + co) * k + ki) * k + kj];
                                    out.data_mut()[((b * cout + co) * oh + oi as usize) * ow + oj as usize] += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scale_step_38_to_19() {
        let x = Tensor::<f32>::zeros(&[1, 3, 38, 38]);
        let w = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 19, 19]);
    }

    #[test]
    fn one_by_one_kernel_is_affine() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(&[1], vec![1.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = random(&[2, 2, 5, 5], &mut rng);
            let w = random(&[3, 2, 3, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let fast = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = naive_conv(&x, &w, b.data(), stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("3 channels"), "{err}");
        let big = Tensor::<f32>::zeros(&[2, 3, 7, 7]);
        assert!(matches!(conv2d(&x, &big, None, 1, 0), Err(TensorError::EmptyOutput { .. })));
    }

    #[test]
    fn deconv_doubles_19_to_38() {
        let x = Tensor::<f32>::zeros(&[1, 8, 19, 19]);
        let w = Tensor::<f32>::zeros(&[8, 5, 2, 2]);
        let y = deconv2d(&x, &w, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 5, 38, 38]);
    }

    #[test]
    fn deconv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 3, 4, 4], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = deconv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn deconv_matches_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, stride, pad) in &[(2, 2, 0), (3, 2, 1), (3, 1, 1), (3, 2, 0)] {
            let x = random(&[1, 1, 3, 3], &mut rng);
            let w = random(&[1, 2, k, k], &mut rng);
            let fast = deconv2d(&x, &w, stride, pad).unwrap();
            let slow = naive_deconv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn deconv_rejects_empty_output() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        let w = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        assert!(matches!(deconv2d(&x, &w, 2, 1), Err(TensorError::EmptyOutput { .. })));
    }
}
