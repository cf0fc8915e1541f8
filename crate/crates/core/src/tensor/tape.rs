use rand::Rng;

use super::ops;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        targets: Tensor<T>,
    },
    Sum(Var),
    Scale(Var, T),
    Select {
        input: Var,
        index: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records the forward computation so that [`GradTape::backward`] can
/// produce exact reverse-mode gradients for every recorded value.
pub struct GradTape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> GradTape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or image).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input whose gradient is never needed.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let needs = self.needs(inputs);
        Ok(self.push_raw(value, op, needs))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &[input, kernel, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d(self.value(x), size)?;
        self.push("max_pool2d", out, Op::MaxPool { input: x, argmax }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x), &[x])
    }

    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(x), self.value(weight), self.value(bias))?;
        self.push(
            "dense",
            out,
            Op::Dense {
                input: x,
                weight,
                bias,
            },
            &[x, weight, bias],
        )
    }

    /// Inverted dropout. With `training == false` or `rate == 0` this records
    /// an all-ones mask and draws nothing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        ops::check_dropout_rate(rate)?;
        let len = self.value(x).len();
        let mask = if training && rate > 0.0 {
            ops::dropout_mask(len, rate, rng)?
        } else {
            vec![T::one(); len]
        };
        let src = self.value(x);
        let out = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        self.push("dropout", out, Op::Dropout { input: x, mask }, &[x])
    }

    /// Softmax followed by mean cross-entropy against (possibly soft)
    /// targets. Returns `(loss, probs)`; `probs` is recorded as a constant.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<(Var, Var)> {
        let probs = ops::softmax(self.value(logits))?;
        let loss = ops::cross_entropy(&probs, targets)?;
        let probs_var = self.constant(probs.clone());
        let loss_var = self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.clone(),
            },
            &[logits],
        )?;
        Ok((loss_var, probs_var))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    /// Scalar element `index` (flat, row-major) of `x`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let src = self.value(x);
        let v = *src.data().get(index).ok_or_else(|| {
            Error::shape("select", format!("index {index} out of range for {:?}", src.shape()))
        })?;
        self.push("select", Tensor::scalar(v), Op::Select { input: x, index }, &[x])
    }

    /// Reverse pass from a scalar node. Every node that the loss depends on
    /// receives a gradient, including intermediate activations.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let want_input = self.nodes[input.0].needs_grad;
                    let (dx, dk, db) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                        want_input,
                    )?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *input, dx);
                    }
                    accumulate(&mut grads, *kernel, dk);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(self.value(*x), &g)?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { input, argmax } => {
                    let dx = ops::max_pool2d_backward(self.value(*input).shape(), argmax, &g);
                    accumulate(&mut grads, *input, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let dx = ops::global_avg_pool_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dense { input, weight, bias } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*input), self.value(*weight), &g)?;
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Dropout { input, mask } => {
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect(),
                    )?;
                    accumulate(&mut grads, *input, dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    targets,
                } => {
                    // d/dz of mean CE through softmax: (p - t * sum(t)) / N,
                    // which is (p - t) / N for rows of t summing to one.
                    let seed = g.data()[0];
                    let k = probs.shape()[1];
                    let n = T::from_usize(probs.shape()[0]).unwrap();
                    let mut dz = Vec::with_capacity(probs.len());
                    for (p_row, t_row) in probs.data().chunks(k).zip(targets.data().chunks(k)) {
                        let mass: T = t_row.iter().copied().sum();
                        for (&p, &t) in p_row.iter().zip(t_row) {
                            dz.push(seed * (p * mass - t) / n);
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(probs.shape().to_vec(), dz)?);
                }
                Op::Sum(x) => {
                    let dx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads, *x, g.map(|v| v * *factor));
                }
                Op::Select { input, index } => {
                    let mut dx = Tensor::zeros(self.value(*input).shape());
                    dx.data_mut()[*index] = g.data()[0];
                    accumulate(&mut grads, *input, dx);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn sum_loss_gives_ones() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 4, 4], |_| rng.random_range(-1.0..1.0)));
        let k = tape.leaf(Tensor::from_fn(&[2, 1, 3, 3], |_| rng.random_range(-1.0..1.0)));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, k, b, (1, 1), (1, 1)).unwrap();
        let s = tape.sum(y).unwrap();
        let z = tape.scale(s, 0.0).unwrap();
        let grads = tape.backward(z).unwrap();
        for v in [x, k, b] {
            assert!(grads.get(v).unwrap().data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.relu(x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn relu_gradient_matches_finite_differences_away_from_zero() {
        let x0 = Tensor::new(vec![6], vec![-1.5, -0.3, 0.2, 0.7, 1.1, -2.0]).unwrap();
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(x0.clone());
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let numeric = central_diff(|t| ops::relu(t).sum(), &x0, 1e-5);
        for (a, n) in g.get(x).unwrap().data().iter().zip(numeric) {
            assert!((a - n).abs() < 1e-8);
        }
        // subgradient at exactly zero
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.relu(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn gap_gradient_is_inverse_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = Tensor::from_fn(&[2, 3, 4, 5], |_| rng.random_range(-1.0..1.0));
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(x0.clone());
        let y = tape.global_avg_pool(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let numeric = central_diff(|t| ops::global_avg_pool(t).unwrap().sum(), &x0, 1e-5);
        for (a, n) in g.get(x).unwrap().data().iter().zip(numeric) {
            assert!((a - 1.0 / 20.0).abs() < 1e-15);
            assert!((a - n).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_and_dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = Tensor::from_fn(&[2, 2, 5, 5], |_| rng.random_range(-1.0..1.0));
        let k0 = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let b0 = Tensor::from_fn(&[3], |_| rng.random_range(-1.0..1.0));
        let w0 = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        let c0 = Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0));
        let targets = Tensor::<f64>::one_hot(&[1, 3], 4).unwrap();

        let f = |x: &Tensor<f64>, k: &Tensor<f64>| {
            let y = ops::conv2d(x, k, &b0, (2, 1), (1, 0)).unwrap();
            let p = ops::global_avg_pool(&y).unwrap();
            let z = ops::dense(&p, &w0, &c0).unwrap();
            ops::cross_entropy(&ops::softmax(&z).unwrap(), &targets).unwrap()
        };

        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(x0.clone());
        let k = tape.leaf(k0.clone());
        let b = tape.leaf(b0.clone());
        let w = tape.leaf(w0.clone());
        let c = tape.leaf(c0.clone());
        let y = tape.conv2d(x, k, b, (2, 1), (1, 0)).unwrap();
        let p = tape.global_avg_pool(y).unwrap();
        let z = tape.dense(p, w, c).unwrap();
        let (loss, _) = tape.softmax_cross_entropy(z, &targets).unwrap();
        let g = tape.backward(loss).unwrap();

        let nx = central_diff(|t| f(t, &k0), &x0, 1e-5);
        let nk = central_diff(|t| f(&x0, t), &k0, 1e-5);
        for (a, n) in g.get(x).unwrap().data().iter().zip(nx) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
        for (a, n) in g.get(k).unwrap().data().iter().zip(nk) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 0.5));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, (1, 1), (1, 1)).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert!(g.get(k).is_some());
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[2], f32::MAX));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(err.is_numeric());
    }
}
