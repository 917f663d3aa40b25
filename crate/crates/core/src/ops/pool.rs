use crate::error::TensorError;
use crate::ops::conv::conv_out_size;
use crate::tensor::{Scalar, Tensor};

/// Max pooling with implicit `-inf` padding. Returns the output and, for every
/// output element, the flat input index that produced it (first index wins ties).
pub fn max_pool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let (n, c, h, w) = input.dims4()?;
    if stride == 0 || kernel == 0 {
        return Err(TensorError::Argument("max_pool2d: kernel and stride must be positive".into()));
    }
    if pad >= kernel {
        return Err(TensorError::Argument(format!("max_pool2d: pad {pad} must be smaller than kernel {kernel}")));
    }
    let (Some(oh), Some(ow)) = (conv_out_size(h, kernel, stride, pad), conv_out_size(w, kernel, stride, pad)) else {
        return Err(TensorError::Shape {
            op: "max_pool2d",
            detail: format!("window {kernel} larger than padded input {h}x{w} (pad {pad})"),
        });
    };
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ki in 0..kernel {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let idx = base + ii as usize * w + jj as usize;
                        match best {
                            Some((v, _)) if x[idx] <= v => {}
                            _ => best = Some((x[idx], idx)),
                        }
                    }
                }
                // A window clipped entirely into padding cannot occur: pad < kernel.
                let (v, idx) = best.expect("window overlaps input");
                out.push(v);
                argmax.push(idx);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

pub fn max_pool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[idx] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_window() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn ties_route_to_first_index() {
        // Window values (row-major): 5 at positions 1 and 2.
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 5.0, 5.0, 0.0]).unwrap();
        let (_, argmax) = max_pool2d(&x, 2, 2, 0).unwrap();
        let g = max_pool2d_backward(x.shape(), &argmax, &Tensor::<f32>::ones(&[1, 1, 1, 1]));
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn overlapping_windows_accumulate() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 3], vec![0.0, 9.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let (y, argmax) = max_pool2d(&x, 2, 1, 0).unwrap();
        assert_eq!(y.data(), &[9.0, 9.0]);
        let g = max_pool2d_backward(x.shape(), &argmax, &Tensor::<f64>::ones(&[1, 1, 1, 2]));
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn padding_rounds_75_up_to_38() {
        let x = Tensor::<f32>::zeros(&[1, 1, 75, 75]);
        let (y, _) = max_pool2d(&x, 2, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 38, 38]);
    }

    #[test]
    fn oversized_window_fails() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(max_pool2d(&x, 3, 1, 0).is_err());
    }
}
