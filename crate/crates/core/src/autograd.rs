//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Tape`] is a Wengert list: every differentiable operation appends a
//! record holding its output value, the ids of its inputs, and whatever the
//! backward rule needs (pooling argmax, normalized activations, softmax
//! probabilities). Records are appended in execution order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep. A value consumed by several records receives the sum of
//! their partials.
//!
//! One training step owns one tape; tapes are not shared across threads.

use crate::error::TensorError;
use crate::ops::{self, norm::BatchNormCache, EltwiseMode};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Record<T: Scalar> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize },
    Deconv2d { input: Var, weight: Var, stride: usize, pad: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, cache: BatchNormCache<T> },
    Relu { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, channels: Vec<usize> },
    Eltwise { a: Var, b: Var, mode: EltwiseMode },
    Scale { input: Var, factor: T },
    SumAll { input: Var },
    WeightedSum { input: Var, weights: Tensor<T> },
    FlattenHead { input: Var, row_width: usize },
    ConcatRows { inputs: Vec<Var>, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<T>, width: usize },
    SmoothL1 { pred: Var, diffs: Vec<T>, rows: Vec<usize> },
}

impl<T: Scalar> Record<T> {
    fn name(&self) -> &'static str {
        match self {
            Record::Leaf => "leaf",
            Record::Conv2d { .. } => "conv2d",
            Record::Deconv2d { .. } => "deconv2d",
            Record::BatchNorm { .. } => "batch_norm",
            Record::Relu { .. } => "relu",
            Record::MaxPool { .. } => "max_pool2d",
            Record::Concat { .. } => "concat_channels",
            Record::Eltwise { .. } => "eltwise",
            Record::Scale { .. } => "scale",
            Record::SumAll { .. } => "sum",
            Record::WeightedSum { .. } => "weighted_sum",
            Record::FlattenHead { .. } => "flatten_head",
            Record::ConcatRows { .. } => "concat_rows",
            Record::CrossEntropy { .. } => "cross_entropy",
            Record::SmoothL1 { .. } => "smooth_l1",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Record::Leaf => vec![],
            Record::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Record::Deconv2d { input, weight, .. } => vec![*input, *weight],
            Record::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Record::Relu { input }
            | Record::MaxPool { input, .. }
            | Record::Scale { input, .. }
            | Record::SumAll { input }
            | Record::WeightedSum { input, .. }
            | Record::FlattenHead { input, .. } => vec![*input],
            Record::Concat { inputs, .. } | Record::ConcatRows { inputs, .. } => inputs.clone(),
            Record::Eltwise { a, b, .. } => vec![*a, *b],
            Record::CrossEntropy { logits, .. } => vec![*logits],
            Record::SmoothL1 { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    record: Record<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`; zeros when `var` does not reach the loss.
    pub fn get(&self, var: Var) -> Tensor<T> {
        self.grads[var.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn get_ref(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Names of recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.record.name()).collect()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, record: Record::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, record: Record<T>) -> Var {
        let inputs = record.inputs();
        debug_assert!(
            value.all_finite() || inputs.iter().any(|v| !self.nodes[v.0].value.all_finite()),
            "{} produced non-finite output from finite inputs",
            record.name()
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, record, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let out = ops::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), stride, pad)?;
        Ok(self.push(out, Record::Conv2d { input, weight, bias, stride, pad }))
    }

    pub fn deconv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let out = ops::deconv2d(self.value(input), self.value(weight), stride, pad)?;
        Ok(self.push(out, Record::Deconv2d { input, weight, stride, pad }))
    }

    /// Train-mode batch normalization. The returned cache carries the batch
    /// statistics so the caller can update running averages.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>), TensorError> {
        let (out, cache) = ops::batch_norm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (cache.batch_mean.clone(), cache.batch_var.clone());
        Ok((self.push(out, Record::BatchNorm { input, gamma, beta, cache }), mean, var))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        stats: Option<&ops::RunningStats<T>>,
    ) -> Result<Var, TensorError> {
        let (out, cache) = ops::batch_norm_eval(self.value(input), self.value(gamma), self.value(beta), eps, stats)?;
        Ok(self.push(out, Record::BatchNorm { input, gamma, beta, cache }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Record::Relu { input })
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (out, argmax) = ops::max_pool2d(self.value(input), kernel, stride, pad)?;
        Ok(self.push(out, Record::MaxPool { input, argmax }))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        let channels = values.iter().map(|t| t.shape()[1]).collect();
        Ok(self.push(out, Record::Concat { inputs: inputs.to_vec(), channels }))
    }

    pub fn eltwise(&mut self, a: Var, b: Var, mode: EltwiseMode) -> Result<Var, TensorError> {
        let out = ops::eltwise(self.value(a), self.value(b), mode)?;
        Ok(self.push(out, Record::Eltwise { a, b, mode }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.eltwise(a, b, EltwiseMode::Sum)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Record::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Record::SumAll { input })
    }

    /// `Σ input ⊙ weights` for a constant weight tensor.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var, TensorError> {
        if weights.shape() != self.value(input).shape() {
            return Err(TensorError::InputMismatch { index: 1, expected: self.value(input).shape().to_vec(), got: weights.shape().to_vec() });
        }
        let out = Tensor::scalar(self.value(input).dot(&weights));
        Ok(self.push(out, Record::WeightedSum { input, weights }))
    }

    pub fn flatten_head(&mut self, input: Var, row_width: usize) -> Result<Var, TensorError> {
        let out = ops::flatten_head(self.value(input), row_width)?;
        Ok(self.push(out, Record::FlattenHead { input, row_width }))
    }

    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_rows(&values)?;
        let rows = values.iter().map(|t| t.shape()[1]).collect();
        Ok(self.push(out, Record::ConcatRows { inputs: inputs.to_vec(), rows }))
    }

    /// `Σ -log softmax(logits[row])[label]` over `(row, label)` targets; the last
    /// axis of `logits` holds class scores and all leading axes are rows.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var, TensorError> {
        let value = self.value(logits);
        let width = *value.shape().last().expect("rank ≥ 1");
        let rows = value.len() / width;
        let mut probs = Vec::with_capacity(targets.len() * width);
        let mut total = T::zero();
        for &(row, label) in targets {
            if row >= rows {
                return Err(TensorError::Argument(format!("cross_entropy: row {row} out of {rows}")));
            }
            if label >= width {
                return Err(TensorError::LabelRange { label, classes: width });
            }
            let r = &value.data()[row * width..(row + 1) * width];
            total += ops::cross_entropy_row(r, label);
            probs.extend(ops::softmax_rows(r, width));
        }
        Ok(self.push(Tensor::scalar(total), Record::CrossEntropy { logits, targets: targets.to_vec(), probs, width }))
    }

    /// `Σ smooth_l1(pred[rows[i]] − target[i])` over all coordinates.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: &Tensor<T>, rows: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(pred);
        let width = *value.shape().last().expect("rank ≥ 1");
        if target.len() != rows.len() * width {
            return Err(TensorError::Shape {
                op: "smooth_l1",
                detail: format!("target holds {} values for {} rows of width {width}", target.len(), rows.len()),
            });
        }
        let n_rows = value.len() / width;
        let mut diffs = Vec::with_capacity(target.len());
        for (i, &row) in rows.iter().enumerate() {
            if row >= n_rows {
                return Err(TensorError::Argument(format!("smooth_l1: row {row} out of {n_rows}")));
            }
            for k in 0..width {
                diffs.push(value.data()[row * width + k] - target.data()[i * width + k]);
            }
        }
        let total = diffs.iter().fold(T::zero(), |a, &d| a + ops::smooth_l1_value(d));
        Ok(self.push(Tensor::scalar(total), Record::SmoothL1 { pred, diffs, rows: rows.to_vec() }))
    }

    /// Mean cross-entropy over every row of `logits` (`B×K`).
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(logits);
        let width = *value.shape().last().expect("rank ≥ 1");
        let rows = value.len() / width;
        if labels.len() != rows {
            return Err(TensorError::Shape { op: "softmax_ce", detail: format!("{} labels for {rows} rows", labels.len()) });
        }
        let targets: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
        let total = self.cross_entropy_sum(logits, &targets)?;
        Ok(self.scale(total, T::one() / T::from_usize(rows).unwrap()))
    }

    /// `Σ smooth_l1(pred − target)` over all entries; shapes must match.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, TensorError> {
        if self.value(pred).shape() != target.shape() {
            return Err(TensorError::InputMismatch { index: 1, expected: self.value(pred).shape().to_vec(), got: target.shape().to_vec() });
        }
        let width = *target.shape().last().expect("rank ≥ 1");
        let rows: Vec<usize> = (0..target.len() / width).collect();
        self.smooth_l1_sum(pred, target, &rows)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (var, partial) in self.partials(&node.record, &node.value, &g)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&partial),
                    slot @ None => *slot = Some(partial),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn partials(&self, record: &Record<T>, _out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, TensorError> {
        Ok(match record {
            Record::Leaf => vec![],
            Record::Conv2d { input, weight, bias, stride, pad } => {
                let gr = ops::conv::conv2d_backward(self.value(*input), self.value(*weight), g, *stride, *pad)?;
                let mut v = vec![(*input, gr.input), (*weight, gr.weight)];
                if let Some(b) = bias {
                    v.push((*b, gr.bias));
                }
                v
            }
            Record::Deconv2d { input, weight, stride, pad } => {
                let gr = ops::conv::deconv2d_backward(self.value(*input), self.value(*weight), g, *stride, *pad)?;
                vec![(*input, gr.input), (*weight, gr.weight)]
            }
            Record::BatchNorm { input, gamma, beta, cache } => {
                let gr = ops::norm::batch_norm_backward(cache, self.value(*gamma), g)?;
                vec![(*input, gr.input), (*gamma, gr.gamma), (*beta, gr.beta)]
            }
            Record::Relu { input } => vec![(*input, ops::relu_backward(self.value(*input), g))],
            Record::MaxPool { input, argmax } => {
                vec![(*input, ops::pool::max_pool2d_backward(self.value(*input).shape(), argmax, g))]
            }
            Record::Concat { inputs, channels } => inputs.iter().copied().zip(ops::split_channels(g, channels)?).collect(),
            Record::Eltwise { a, b, mode } => match mode {
                EltwiseMode::Sum => vec![(*a, g.clone()), (*b, g.clone())],
                EltwiseMode::Prod => {
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    for ((x, y), (va, vb)) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(gb.data_mut())
                        .zip(self.value(*a).data().iter().zip(self.value(*b).data()))
                    {
                        *x *= *vb;
                        *y *= *va;
                    }
                    vec![(*a, ga), (*b, gb)]
                }
            },
            Record::Scale { input, factor } => vec![(*input, g.map(|v| v * *factor))],
            Record::SumAll { input } => {
                let s = g.data()[0];
                vec![(*input, Tensor::full(self.value(*input).shape(), s))]
            }
            Record::WeightedSum { input, weights } => {
                let s = g.data()[0];
                vec![(*input, weights.map(|w| w * s))]
            }
            Record::FlattenHead { input, row_width } => {
                vec![(*input, ops::flatten_head_backward(self.value(*input).shape(), g, *row_width))]
            }
            Record::ConcatRows { inputs, rows } => inputs.iter().copied().zip(ops::split_rows(g, rows)).collect(),
            Record::CrossEntropy { logits, targets, probs, width } => {
                let s = g.data()[0];
                let mut d = Tensor::zeros(self.value(*logits).shape());
                for (i, &(row, label)) in targets.iter().enumerate() {
                    let dst = &mut d.data_mut()[row * width..(row + 1) * width];
                    for (k, v) in dst.iter_mut().enumerate() {
                        let onehot = if k == label { T::one() } else { T::zero() };
                        *v += s * (probs[i * width + k] - onehot);
                    }
                }
                vec![(*logits, d)]
            }
            Record::SmoothL1 { pred, diffs, rows } => {
                let s = g.data()[0];
                let value = self.value(*pred);
                let width = *value.shape().last().expect("rank ≥ 1");
                let mut d = Tensor::zeros(value.shape());
                for (i, &row) in rows.iter().enumerate() {
                    for k in 0..width {
                        d.data_mut()[row * width + k] += s * ops::smooth_l1_grad(diffs[i * width + k]);
                    }
                }
                vec![(*pred, d)]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_consumers_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2, 2]));
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn concat_backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[1, 2, 2, 2]));
        let b = tape.param(Tensor::zeros(&[1, 3, 2, 2]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a), Tensor::ones(&[1, 2, 2, 2]));
        assert_eq!(grads.get(b), Tensor::ones(&[1, 3, 2, 2]));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.relu(x);
        let z = tape.add(x, y).unwrap();
        let _ = tape.sum(z);
        for (i, node) in tape.nodes.iter().enumerate() {
            assert!(node.record.inputs().iter().all(|v| v.0 < i));
        }
        assert_eq!(tape.op_names(), vec!["leaf", "relu", "eltwise", "sum"]);
    }

    #[test]
    fn softmax_ce_two_classes() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::zeros(&[3, 2]));
        let loss = tape.softmax_ce(logits, &[0, 1, 1]).unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let err = tape.softmax_ce(logits, &[0, 2, 1]).unwrap_err();
        assert_eq!(err, TensorError::LabelRange { label: 2, classes: 2 });
    }
}
