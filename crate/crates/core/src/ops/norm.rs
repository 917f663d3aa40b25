//! Per-channel batch normalization.

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Exponential moving average factor applied to the previous running statistic.
pub const RUNNING_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: Tensor::zeros(&[channels]), var: Tensor::ones(&[channels]) }
    }

    /// `running ← 0.9·running + 0.1·batch`, using the population batch variance.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::from_f64_lossy(RUNNING_MOMENTUM);
        let one_minus = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = m * *r + one_minus * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch_var) {
            *r = m * *r + one_minus * b;
        }
    }
}

/// Values saved by the forward pass for use in backward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub train: bool,
}

fn check<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<(usize, usize, usize), TensorError> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(TensorError::Shape {
            op: "batch_norm",
            detail: format!("{c} channels but gamma/beta have {}/{}", gamma.len(), beta.len()),
        });
    }
    if eps <= T::zero() {
        return Err(TensorError::Argument("batch_norm: eps must be positive".into()));
    }
    Ok((n, c, h * w))
}

/// Train mode: normalizes with batch mean and population variance over `N×H×W`.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>), TensorError> {
    let (n, c, plane) = check(input, gamma, beta, eps)?;
    let count = T::from_usize(n * plane).unwrap();
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let s = &x[(b * c + ch) * plane..][..plane];
            mean[ch] += s.iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            let s = &x[(b * c + ch) * plane..][..plane];
            var[ch] += s.iter().fold(T::zero(), |a, &v| a + (v - mean[ch]) * (v - mean[ch]));
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (out, normalized) = apply(input, gamma, beta, &mean, &inv_std, c, plane);
    Ok((out, BatchNormCache { normalized, inv_std, batch_mean: mean, batch_var: var, train: true }))
}

/// Eval mode: normalizes with running statistics.
pub fn batch_norm_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    stats: Option<&RunningStats<T>>,
) -> Result<(Tensor<T>, BatchNormCache<T>), TensorError> {
    let (_, c, plane) = check(input, gamma, beta, eps)?;
    let stats = stats.ok_or(TensorError::MissingRunningStats)?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(TensorError::MissingRunningStats);
    }
    let inv_std: Vec<T> = stats.var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = stats.mean.data().to_vec();
    let (out, normalized) = apply(input, gamma, beta, &mean, &inv_std, c, plane);
    Ok((out, BatchNormCache { normalized, inv_std, batch_mean: mean, batch_var: stats.var.data().to_vec(), train: false }))
}

fn apply<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    c: usize,
    plane: usize,
) -> (Tensor<T>, Tensor<T>) {
    let mut normalized = input.clone();
    let mut out = input.clone();
    for (idx, (nv, ov)) in normalized.data_mut().iter_mut().zip(out.data_mut()).enumerate() {
        let ch = (idx / plane) % c;
        *nv = (*nv - mean[ch]) * inv_std[ch];
        *ov = gamma.data()[ch] * *nv + beta.data()[ch];
    }
    (out, normalized)
}

pub struct BatchNormGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>, TensorError> {
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let xhat = cache.normalized.data();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (idx, (&g, &xh)) in dy.iter().zip(xhat).enumerate() {
        let ch = (idx / plane) % c;
        dgamma[ch] += g * xh;
        dbeta[ch] += g;
    }
    let mut dx = Tensor::zeros(grad_out.shape());
    if cache.train {
        // dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), with dxhat = γ·dy.
        let m = T::from_usize(n * plane).unwrap();
        for (idx, v) in dx.data_mut().iter_mut().enumerate() {
            let ch = (idx / plane) % c;
            let gm = gamma.data()[ch];
            *v = gm * cache.inv_std[ch] / m * (m * dy[idx] - dbeta[ch] - xhat[idx] * dgamma[ch]);
        }
    } else {
        for (idx, v) in dx.data_mut().iter_mut().enumerate() {
            let ch = (idx / plane) % c;
            *v = dy[idx] * gamma.data()[ch] * cache.inv_std[ch];
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_values_normalize_to_unit() {
        let x = Tensor::<f64>::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (y, cache) = batch_norm_train(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
        assert_eq!(cache.batch_mean, vec![2.0]);
        assert_eq!(cache.batch_var, vec![1.0]);
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| i as f64 * 0.37 - 2.0);
        let beta = Tensor::new(&[2], vec![0.25, -4.0]).unwrap();
        let (y, _) = batch_norm_train(&x, &Tensor::zeros(&[2]), &beta, 1e-5).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, beta.data()[(i / 9) % 2]);
        }
    }

    #[test]
    fn eval_without_stats_fails() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        let err = batch_norm_eval(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-5, None).unwrap_err();
        assert_eq!(err, TensorError::MissingRunningStats);
    }

    #[test]
    fn running_stats_ema() {
        let mut s = RunningStats::<f64>::new(1);
        s.update(&[1.0], &[3.0]);
        assert!((s.mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((s.var.data()[0] - (0.9 + 0.3)).abs() < 1e-12);
    }
}
