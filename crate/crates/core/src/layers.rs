//! Layer and model definitions: declarative specs, parameter storage,
//! shape validation, forward passes recorded on the autodiff tape, and
//! exact trainable-parameter counting.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// One layer of a model, as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        channels: usize,
        /// Filter extent as (height, width).
        filter: [usize; 2],
        #[serde(default)]
        pad: usize,
    },
    /// Renamed so the config spelling matches the reported kind name.
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Relu,
    Linear {
        units: usize,
    },
    Batchnorm2d,
    Dropout {
        rate: f64,
    },
    Softmax,
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Relu => "relu",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Batchnorm2d => "batchnorm2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Model input shape, excluding the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    /// (channels, height, width)
    Image([usize; 3]),
    Flat(usize),
}

/// Intermediate per-sample shape while walking the layer chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Per-sample shape after each layer; errors name the offending layer.
    pub fn shape_chain(&self) -> Result<Vec<FeatShape>> {
        let mut cur = match self.input {
            InputShape::Image([c, h, w]) => FeatShape::Image { c, h, w },
            InputShape::Flat(n) => FeatShape::Flat(n),
        };
        let mut chain = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| {
                Error::Shape(format!("layer {} ({}): {}", idx, layer.kind_name(), msg))
            };
            cur = match (layer, cur) {
                (
                    LayerSpec::Conv2d {
                        channels,
                        filter,
                        pad,
                    },
                    FeatShape::Image { c: _, h, w },
                ) => {
                    if *channels == 0 {
                        return Err(fail("channels must be >= 1".into()));
                    }
                    let [kh, kw] = *filter;
                    if kh == 0 || kw == 0 {
                        return Err(fail("filter extents must be >= 1".into()));
                    }
                    if h + 2 * pad < kh || w + 2 * pad < kw {
                        return Err(fail(format!(
                            "{}x{} input with pad {} is smaller than the {}x{} filter",
                            h, w, pad, kh, kw
                        )));
                    }
                    FeatShape::Image {
                        c: *channels,
                        h: h + 2 * pad - kh + 1,
                        w: w + 2 * pad - kw + 1,
                    }
                }
                (LayerSpec::Conv2d { .. }, FeatShape::Flat(_)) => {
                    return Err(fail("needs image input; got flat features".into()))
                }
                (LayerSpec::MaxPool2x2, FeatShape::Image { c, h, w }) => {
                    if h < 2 || w < 2 {
                        return Err(fail(format!("needs H,W >= 2, got {}x{}", h, w)));
                    }
                    FeatShape::Image {
                        c,
                        h: h / 2,
                        w: w / 2,
                    }
                }
                (LayerSpec::MaxPool2x2, FeatShape::Flat(_)) => {
                    return Err(fail("needs image input; got flat features".into()))
                }
                (LayerSpec::Batchnorm2d, FeatShape::Image { c, h, w }) => {
                    FeatShape::Image { c, h, w }
                }
                (LayerSpec::Batchnorm2d, FeatShape::Flat(_)) => {
                    return Err(fail("needs image input; got flat features".into()))
                }
                (LayerSpec::Relu, shape) => shape,
                (LayerSpec::Dropout { rate }, shape) => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(fail(format!("rate must be in [0,1), got {}", rate)));
                    }
                    shape
                }
                (LayerSpec::Flatten, FeatShape::Image { c, h, w }) => FeatShape::Flat(c * h * w),
                (LayerSpec::Flatten, FeatShape::Flat(_)) => {
                    return Err(fail("input is already flat".into()))
                }
                (LayerSpec::Linear { units }, FeatShape::Flat(_)) => {
                    if *units == 0 {
                        return Err(fail("units must be >= 1".into()));
                    }
                    FeatShape::Flat(*units)
                }
                (LayerSpec::Linear { .. }, FeatShape::Image { .. }) => {
                    return Err(fail("needs flat input; add a flatten layer first".into()))
                }
                (LayerSpec::Softmax, FeatShape::Flat(n)) => FeatShape::Flat(n),
                (LayerSpec::Softmax, FeatShape::Image { .. }) => {
                    return Err(fail("needs flat input".into()))
                }
            };
            chain.push(cur);
        }
        match chain.last().copied().or(Some(match self.input {
            InputShape::Image([c, h, w]) => FeatShape::Image { c, h, w },
            InputShape::Flat(n) => FeatShape::Flat(n),
        })) {
            Some(FeatShape::Flat(n)) if n == self.classes => Ok(chain),
            Some(final_shape) => Err(Error::Shape(format!(
                "model output shape {:?} does not match class count {}",
                final_shape, self.classes
            ))),
            None => unreachable!(),
        }
    }

    /// Exact trainable-parameter count; batchnorm contributes 2C, running
    /// statistics are state, not parameters.
    pub fn count_params(&self) -> Result<u64> {
        let chain = self.shape_chain()?;
        let mut total: u64 = 0;
        let mut prev = match self.input {
            InputShape::Image([c, h, w]) => FeatShape::Image { c, h, w },
            InputShape::Flat(n) => FeatShape::Flat(n),
        };
        for (layer, &after) in self.layers.iter().zip(chain.iter()) {
            match (layer, prev) {
                (
                    LayerSpec::Conv2d {
                        channels, filter, ..
                    },
                    FeatShape::Image { c, .. },
                ) => {
                    let [kh, kw] = *filter;
                    total += (*channels as u64) * (c as u64) * (kh as u64) * (kw as u64)
                        + *channels as u64;
                }
                (LayerSpec::Linear { units }, FeatShape::Flat(f)) => {
                    total += (*units as u64) * (f as u64) + *units as u64;
                }
                (LayerSpec::Batchnorm2d, FeatShape::Image { c, .. }) => {
                    total += 2 * c as u64;
                }
                _ => {}
            }
            prev = after;
        }
        Ok(total)
    }
}

/// A named tensor owned by a model: trainable parameter or running state.
#[derive(Debug, Clone)]
pub struct ParamItem {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Weight decay applies only to conv/linear weights.
    pub decay: bool,
}

/// All tensors of one model, in a stable layer order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    items: Vec<ParamItem>,
}

impl ParamStore {
    pub fn items(&self) -> &[ParamItem] {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut [ParamItem] {
        &mut self.items
    }

    pub fn push(&mut self, item: ParamItem) {
        self.items.push(item);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.items.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.items.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn trainable_count(&self) -> u64 {
        self.items
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel() as u64)
            .sum()
    }
}

/// Fresh parameters for `spec`: conv/linear weights uniform in
/// ±sqrt(6/(fan_in+fan_out)), biases zero, batchnorm γ=1 β=0 with zeroed
/// running mean and unit running variance. Draw order is fixed, so a seed
/// pins every value.
pub fn init_params(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let chain = spec.shape_chain()?;
    let mut store = ParamStore::default();
    let mut prev = match spec.input {
        InputShape::Image([c, h, w]) => FeatShape::Image { c, h, w },
        InputShape::Flat(n) => FeatShape::Flat(n),
    };
    for (idx, (layer, &after)) in spec.layers.iter().zip(chain.iter()).enumerate() {
        match (layer, prev) {
            (
                LayerSpec::Conv2d {
                    channels, filter, ..
                },
                FeatShape::Image { c, .. },
            ) => {
                let [kh, kw] = *filter;
                let fan_in = (c * kh * kw) as f64;
                let fan_out = (*channels * kh * kw) as f64;
                let bound = (6.0 / (fan_in + fan_out)).sqrt();
                store.push(ParamItem {
                    name: format!("l{}.weight", idx),
                    value: Tensor::rand_uniform(vec![*channels, c, kh, kw], -bound, bound, rng),
                    trainable: true,
                    decay: true,
                });
                store.push(ParamItem {
                    name: format!("l{}.bias", idx),
                    value: Tensor::zeros(vec![*channels]),
                    trainable: true,
                    decay: false,
                });
            }
            (LayerSpec::Linear { units }, FeatShape::Flat(f)) => {
                let bound = (6.0 / (f as f64 + *units as f64)).sqrt();
                store.push(ParamItem {
                    name: format!("l{}.weight", idx),
                    value: Tensor::rand_uniform(vec![*units, f], -bound, bound, rng),
                    trainable: true,
                    decay: true,
                });
                store.push(ParamItem {
                    name: format!("l{}.bias", idx),
                    value: Tensor::zeros(vec![*units]),
                    trainable: true,
                    decay: false,
                });
            }
            (LayerSpec::Batchnorm2d, FeatShape::Image { c, .. }) => {
                store.push(ParamItem {
                    name: format!("l{}.gamma", idx),
                    value: Tensor::full(vec![c], 1.0),
                    trainable: true,
                    decay: false,
                });
                store.push(ParamItem {
                    name: format!("l{}.beta", idx),
                    value: Tensor::zeros(vec![c]),
                    trainable: true,
                    decay: false,
                });
                store.push(ParamItem {
                    name: format!("l{}.running_mean", idx),
                    value: Tensor::zeros(vec![c]),
                    trainable: false,
                    decay: false,
                });
                store.push(ParamItem {
                    name: format!("l{}.running_var", idx),
                    value: Tensor::full(vec![c], 1.0),
                    trainable: false,
                    decay: false,
                });
            }
            _ => {}
        }
        prev = after;
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of recording a forward pass: the logits node plus, for training
/// passes, which store item each differentiable graph leaf came from.
pub struct ForwardPass {
    pub output: NodeId,
    pub params: Vec<(usize, NodeId)>,
}

/// Multiplicative dropout mask: 0 with probability `rate`, else 1/(1−rate).
pub fn dropout_mask(shape: Vec<usize>, rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Training-mode forward: parameters enter the graph as differentiable
/// leaves, batchnorm uses batch statistics and updates running state,
/// dropout draws masks from `rng`.
pub fn forward_train(
    g: &mut Graph,
    spec: &ModelSpec,
    store: &mut ParamStore,
    batch: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardPass> {
    let (pass, updates) = run_forward(g, spec, store, batch, Mode::Train, Some(rng))?;
    for (idx, new_value) in updates {
        store.items[idx]
            .value
            .data_mut()
            .copy_from_slice(&new_value);
    }
    Ok(pass)
}

/// Inference-mode forward recorded as constants: batchnorm uses running
/// statistics, dropout is identity, no gradients flow.
pub fn forward_eval(
    g: &mut Graph,
    spec: &ModelSpec,
    store: &ParamStore,
    batch: &Tensor,
) -> Result<NodeId> {
    let (pass, _) = run_forward(g, spec, store, batch, Mode::Eval, None)?;
    Ok(pass.output)
}

/// Forward to plain logits on a throwaway graph.
pub fn predict(spec: &ModelSpec, store: &ParamStore, batch: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = forward_eval(&mut g, spec, store, batch)?;
    Ok(g.value(out).clone())
}

fn expected_batch_shape(input: InputShape, n: usize) -> Vec<usize> {
    match input {
        InputShape::Image([c, h, w]) => vec![n, c, h, w],
        InputShape::Flat(f) => vec![n, f],
    }
}

type RunningUpdates = Vec<(usize, Vec<f64>)>;

fn run_forward(
    g: &mut Graph,
    spec: &ModelSpec,
    store: &ParamStore,
    batch: &Tensor,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(ForwardPass, RunningUpdates)> {
    spec.shape_chain()?;
    let n = *batch
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("batch tensor must have a leading batch dimension".into()))?;
    let want = expected_batch_shape(spec.input, n);
    if batch.shape() != want.as_slice() {
        return Err(Error::Shape(format!(
            "batch shape {:?} does not match model input {:?}",
            batch.shape(),
            want
        )));
    }

    let differentiable = mode == Mode::Train;
    let mut updates: RunningUpdates = Vec::new();
    let mut params = Vec::new();
    let mut param_node = |g: &mut Graph, store: &ParamStore, name: &str| -> Result<NodeId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter tensor '{}'", name)))?;
        let value = store.items[idx].value.clone();
        let node = if differentiable {
            g.param(value)
        } else {
            g.leaf(value)
        };
        params.push((idx, node));
        Ok(node)
    };

    let mut cur = g.leaf(batch.clone());
    for (idx, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv2d { pad, .. } => {
                let w = param_node(g, store, &format!("l{}.weight", idx))?;
                let b = param_node(g, store, &format!("l{}.bias", idx))?;
                cur = g.conv2d(cur, w, b, *pad);
            }
            LayerSpec::MaxPool2x2 => {
                cur = g.maxpool2x2(cur);
            }
            LayerSpec::Relu => {
                cur = g.relu(cur);
            }
            LayerSpec::Linear { .. } => {
                let w = param_node(g, store, &format!("l{}.weight", idx))?;
                let b = param_node(g, store, &format!("l{}.bias", idx))?;
                cur = g.linear(cur, w, b);
            }
            LayerSpec::Batchnorm2d => {
                let gamma = param_node(g, store, &format!("l{}.gamma", idx))?;
                let beta = param_node(g, store, &format!("l{}.beta", idx))?;
                let rm_idx = store
                    .index_of(&format!("l{}.running_mean", idx))
                    .ok_or_else(|| Error::Contract(format!("missing l{}.running_mean", idx)))?;
                let rv_idx = store
                    .index_of(&format!("l{}.running_var", idx))
                    .ok_or_else(|| Error::Contract(format!("missing l{}.running_var", idx)))?;
                if mode == Mode::Train {
                    let (out, moments) = g.batchnorm2d_train(cur, gamma, beta, BATCHNORM_EPS)?;
                    cur = out;
                    let m = BATCHNORM_MOMENTUM;
                    for (slot, batch_stat) in [(rm_idx, &moments.mean), (rv_idx, &moments.var)] {
                        let new_running: Vec<f64> = store.items[slot]
                            .value
                            .data()
                            .iter()
                            .zip(batch_stat.iter())
                            .map(|(&r, &b)| (1.0 - m) * r + m * b)
                            .collect();
                        updates.push((slot, new_running));
                    }
                } else {
                    let rm = store.items[rm_idx].value.data().to_vec();
                    let rv = store.items[rv_idx].value.data().to_vec();
                    cur = g.batchnorm2d_infer(cur, gamma, beta, &rm, &rv, BATCHNORM_EPS);
                }
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Train && *rate > 0.0 {
                    let rng = rng.as_deref_mut().ok_or_else(|| {
                        Error::Contract("training forward with dropout needs an RNG".into())
                    })?;
                    let mask = dropout_mask(g.value(cur).shape().to_vec(), *rate, rng);
                    let mask = g.leaf(mask);
                    cur = g.mul(cur, mask);
                }
            }
            LayerSpec::Softmax => {
                cur = g.softmax(cur);
            }
            LayerSpec::Flatten => {
                let shape = g.value(cur).shape();
                let flat: usize = shape[1..].iter().product();
                cur = g.reshape(cur, vec![shape[0], flat]);
            }
        }
    }
    Ok((
        ForwardPass {
            output: cur,
            params,
        },
        updates,
    ))
}
