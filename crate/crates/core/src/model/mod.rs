//! Convolutional backbone plus the classifier head
//! `softmax(Dropout(ReLU(GAP(F(x)) W1 + b1)) W2 + b2)`.

mod archive;
mod checkpoint;

use std::ops::{Deref, DerefMut};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, GradTape, Gradients, Tensor, Var};

pub use archive::{read_archive, write_archive, ArchiveRecord, ARCHIVE_MAGIC, FORMAT_VERSION};
pub use checkpoint::{Checkpoint, RngState, TrainProgress};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub input_size: (usize, usize),
    pub blocks: Vec<BlockSpec>,
    pub head_hidden_width: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

pub const DEFAULT_FILTERS: [usize; 4] = [16, 32, 64, 128];

impl ModelSpec {
    /// Four 3x3 conv blocks (16, 32, 64, 128 filters) with 2x2 max pooling,
    /// hidden width 128 and dropout 0.3.
    pub fn new(num_classes: usize, input_size: (usize, usize)) -> Self {
        Self::with_filters(num_classes, input_size, &DEFAULT_FILTERS)
    }

    pub fn with_filters(num_classes: usize, input_size: (usize, usize), filters: &[usize]) -> Self {
        Self {
            in_channels: 3,
            input_size,
            blocks: filters
                .iter()
                .map(|&f| BlockSpec {
                    filters: f,
                    kernel: 3,
                    stride: 1,
                    pool: true,
                })
                .collect(),
            head_hidden_width: 128,
            dropout_rate: 0.3,
            num_classes,
        }
    }

    /// Spatial size after each block as `(pre_pool, post_pool)`.
    fn block_sizes(&self) -> Result<Vec<((usize, usize), (usize, usize))>> {
        let (mut h, mut w) = self.input_size;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.filters == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::InvalidArgument(format!(
                    "block {i}: filters, kernel and stride must be positive"
                )));
            }
            let pad = b.kernel / 2;
            if h + 2 * pad < b.kernel || w + 2 * pad < b.kernel {
                return Err(Error::InvalidArgument(format!(
                    "block {i}: kernel {} does not fit a {h}x{w} map",
                    b.kernel
                )));
            }
            let conv = ((h + 2 * pad - b.kernel) / b.stride + 1, (w + 2 * pad - b.kernel) / b.stride + 1);
            let pooled = if b.pool { (conv.0 / 2, conv.1 / 2) } else { conv };
            if pooled.0 == 0 || pooled.1 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "block {i}: output collapses below 1x1 for input {:?}",
                    self.input_size
                )));
            }
            out.push((conv, pooled));
            (h, w) = pooled;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("at least two classes are required".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidArgument("the backbone needs at least one block".into()));
        }
        if self.in_channels == 0 || self.head_hidden_width == 0 {
            return Err(Error::InvalidArgument("channel and hidden widths must be positive".into()));
        }
        crate::tensor::ops::check_dropout_rate(self.dropout_rate)?;
        self.block_sizes().map(|_| ())
    }

    /// `(channels, height, width)` of the last block's activations before
    /// pooling, i.e. the maps used for class activation mapping.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        let sizes = self.block_sizes()?;
        let (h, w) = sizes.last().expect("validated").0;
        Ok((self.blocks.last().unwrap().filters, h, w))
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut channels = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.kernel"), vec![b.filters, channels, b.kernel, b.kernel]));
            out.push((format!("block{i}.bias"), vec![b.filters]));
            channels = b.filters;
        }
        out.push(("head.hidden.weight".into(), vec![channels, self.head_hidden_width]));
        out.push(("head.hidden.bias".into(), vec![self.head_hidden_width]));
        out.push(("head.output.weight".into(), vec![self.head_hidden_width, self.num_classes]));
        out.push(("head.output.bias".into(), vec![self.num_classes]));
        out
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<Params<T>> {
        self.validate()?;
        let mut rng = rng::derive(seed, rng::DOMAIN_INIT, 0);
        let mut params = Params::default();
        for (name, shape) in self.param_shapes() {
            let t = if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)))
            };
            params.insert(name, t);
        }
        Ok(params)
    }

    fn check_params<T: Element>(&self, params: &Params<T>) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(
                        "model",
                        format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape()),
                    ))
                }
                None => {
                    return Err(Error::shape("model", format!("missing parameter `{name}`")));
                }
            }
        }
        Ok(())
    }

    fn check_input<T: Element>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let ok = s.len() == 4
            && s[1] == self.in_channels
            && (s[2], s[3]) == self.input_size;
        if !ok {
            return Err(Error::shape(
                "model",
                format!(
                    "input {s:?} does not match N,{},{},{}",
                    self.in_channels, self.input_size.0, self.input_size.1
                ),
            ));
        }
        Ok(())
    }

    /// Records a full forward pass. `track_input` makes the image a
    /// differentiable leaf so that input gradients are available.
    pub fn forward<T: Element, R: Rng + ?Sized>(
        &self,
        params: &Params<T>,
        x: &Tensor<T>,
        training: bool,
        track_input: bool,
        rng: &mut R,
    ) -> Result<Forward<T>> {
        self.check_params(params)?;
        self.check_input(x)?;
        let mut tape = GradTape::new();
        let input = if track_input {
            tape.leaf(x.clone())
        } else {
            tape.constant(x.clone())
        };
        let mut vars = IndexMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), tape.leaf(t.clone()));
        }
        let mut h = input;
        let mut features = input;
        for (i, b) in self.blocks.iter().enumerate() {
            let pad = b.kernel / 2;
            let conv = tape.conv2d(
                h,
                vars[&format!("block{i}.kernel")],
                vars[&format!("block{i}.bias")],
                (b.stride, b.stride),
                (pad, pad),
            )?;
            let act = tape.relu(conv)?;
            features = act;
            h = if b.pool { tape.max_pool2d(act, 2)? } else { act };
        }
        let pooled = tape.global_avg_pool(h)?;
        let hidden = tape.dense(pooled, vars["head.hidden.weight"], vars["head.hidden.bias"])?;
        let hidden = tape.relu(hidden)?;
        let dropped = tape.dropout(hidden, self.dropout_rate, rng, training)?;
        let logits = tape.dense(dropped, vars["head.output.weight"], vars["head.output.bias"])?;
        let probs = crate::tensor::ops::softmax(tape.value(logits))?;
        Ok(Forward {
            tape,
            input,
            params: vars,
            features,
            logits,
            probs,
        })
    }

    /// Inference-mode class probabilities.
    pub fn predict<T: Element>(&self, params: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut unused = rng::derive(0, 0, 0);
        Ok(self.forward(params, x, false, false, &mut unused)?.probs)
    }
}

/// A recorded forward pass.
pub struct Forward<T: Element> {
    pub tape: GradTape<T>,
    pub input: Var,
    pub params: IndexMap<String, Var>,
    /// Post-ReLU activations of the last conv block, before pooling.
    pub features: Var,
    pub logits: Var,
    pub probs: Tensor<T>,
}

impl<T: Element> Forward<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.tape.value(self.logits)
    }

    pub fn features(&self) -> &Tensor<T> {
        self.tape.value(self.features)
    }

    /// Appends the mean cross-entropy against `targets` and runs the reverse
    /// pass. Returns `(loss, gradients)`.
    pub fn backward_loss(&mut self, targets: &Tensor<T>) -> Result<(T, Gradients<T>)> {
        let (loss, _) = self.tape.softmax_cross_entropy(self.logits, targets)?;
        let value = self.tape.value(loss).data()[0];
        Ok((value, self.tape.backward(loss)?))
    }

    /// Parameter gradients keyed by name.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Named model parameters in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Element = f32>(IndexMap<String, Tensor<T>>);

impl<T: Element> Default for Params<T> {
    fn default() -> Self {
        Self(IndexMap::new())
    }
}

impl<T: Element> Deref for Params<T> {
    type Target = IndexMap<String, Tensor<T>>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl<T: Element> DerefMut for Params<T> {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

impl<T: Element> FromIterator<(String, Tensor<T>)> for Params<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<T: Element> Params<T> {
    pub fn cast<U: Element>(&self) -> Params<U> {
        self.0.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }
}

/// Which backbone blocks are excluded from optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    pub frozen_blocks: usize,
}

impl FreezeMask {
    pub fn is_trainable(&self, name: &str) -> bool {
        match name.strip_prefix("block").and_then(|r| r.split('.').next()) {
            Some(idx) => idx.parse::<usize>().map_or(true, |i| i >= self.frozen_blocks),
            None => true,
        }
    }
}

/// Freezes the first `freeze_depth` backbone blocks; the head always trains.
pub fn set_trainable(spec: &ModelSpec, freeze_depth: usize) -> Result<FreezeMask> {
    if freeze_depth > spec.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "freeze depth {freeze_depth} exceeds the {} backbone blocks",
            spec.blocks.len()
        )));
    }
    Ok(FreezeMask {
        frozen_blocks: freeze_depth,
    })
}
