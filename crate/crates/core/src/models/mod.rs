//! Config-defined CNN/MLP classifiers, initialization and checkpoints.

mod checkpoint;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::{Padding, Scalar, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    /// 3×3 same-padded convolution with bias.
    Conv {
        channels: usize,
        stride: usize,
    },
    Dense {
        width: usize,
    },
    Relu,
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<Layer>,
    pub input_resolution: usize,
    pub input_channels: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl ModelConfig {
    /// conv 32/64/64/128 → pool → dense.
    pub fn reference_teacher(resolution: usize, channels: usize, classes: usize) -> Self {
        use Layer::*;
        ModelConfig {
            layers: vec![
                Conv {
                    channels: 32,
                    stride: 2,
                },
                Relu,
                Conv {
                    channels: 64,
                    stride: 2,
                },
                Relu,
                Conv {
                    channels: 64,
                    stride: 1,
                },
                Relu,
                Conv {
                    channels: 128,
                    stride: 2,
                },
                Relu,
                GlobalAvgPool,
                Dense { width: classes },
            ],
            input_resolution: resolution,
            input_channels: channels,
            num_classes: classes,
        }
    }

    /// conv 16/32 → pool → dense.
    pub fn reference_student(resolution: usize, channels: usize, classes: usize) -> Self {
        use Layer::*;
        ModelConfig {
            layers: vec![
                Conv {
                    channels: 16,
                    stride: 2,
                },
                Relu,
                Conv {
                    channels: 32,
                    stride: 2,
                },
                Relu,
                GlobalAvgPool,
                Dense { width: classes },
            ],
            input_resolution: resolution,
            input_channels: channels,
            num_classes: classes,
        }
    }

    /// Whether inputs of any resolution are accepted (no flatten of a spatial map).
    pub fn resolution_agnostic(&self) -> bool {
        let mut spatial = true;
        for layer in &self.layers {
            match layer {
                Layer::Flatten if spatial => return false,
                Layer::GlobalAvgPool => spatial = false,
                _ => {}
            }
        }
        true
    }

    /// Parameter names and shapes, in layer order, for inputs at `resolution`.
    pub fn param_shapes_at(&self, resolution: usize) -> Result<Vec<(String, Vec<usize>)>> {
        if self.layers.is_empty() {
            return Err(Error::ModelConfig("model has no layers".into()));
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::ModelConfig(
                "class count and input channels must be positive".into(),
            ));
        }
        let mut act = Activation::Spatial {
            h: resolution,
            w: resolution,
            c: self.input_channels,
        };
        let mut shapes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |what: &str| Error::ModelConfig(format!("layer {i} ({layer:?}): {what}"));
            act = match (*layer, act) {
                (Layer::Conv { channels, stride }, Activation::Spatial { h, w, c }) => {
                    if channels == 0 || !(stride == 1 || stride == 2) {
                        return Err(bad("channels must be positive and stride 1 or 2"));
                    }
                    shapes.push((param_name(i, "conv", "kernel"), vec![3, 3, c, channels]));
                    shapes.push((param_name(i, "conv", "bias"), vec![channels]));
                    Activation::Spatial {
                        h: h.div_ceil(stride),
                        w: w.div_ceil(stride),
                        c: channels,
                    }
                }
                (Layer::Conv { .. }, Activation::Flat(_)) => {
                    return Err(bad("convolution after the spatial dimensions were removed"))
                }
                (Layer::Dense { width }, Activation::Flat(d)) => {
                    if width == 0 {
                        return Err(bad("dense width must be positive"));
                    }
                    shapes.push((param_name(i, "dense", "weight"), vec![d, width]));
                    shapes.push((param_name(i, "dense", "bias"), vec![width]));
                    Activation::Flat(width)
                }
                (Layer::Dense { .. }, Activation::Spatial { .. }) => {
                    return Err(bad("dense layer needs flatten or global_avg_pool first"))
                }
                (Layer::Relu, a) => a,
                (Layer::GlobalAvgPool, Activation::Spatial { c, .. }) => Activation::Flat(c),
                (Layer::GlobalAvgPool, Activation::Flat(_)) => {
                    return Err(bad("global_avg_pool needs a spatial input"))
                }
                (Layer::Flatten, Activation::Spatial { h, w, c }) => Activation::Flat(h * w * c),
                (Layer::Flatten, a) => a,
            };
        }
        match act {
            Activation::Flat(d) if d == self.num_classes => Ok(shapes),
            other => Err(Error::ModelConfig(format!(
                "final activation {other:?} is not a logits vector of length {}",
                self.num_classes
            ))),
        }
    }

    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.param_shapes_at(self.input_resolution)
    }

    pub fn validate(&self) -> Result<()> {
        self.param_shapes().map(|_| ())
    }

    pub fn num_params(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }
}

fn param_name(layer: usize, kind: &str, role: &str) -> String {
    format!("l{layer:02}.{kind}.{role}")
}

/// Named parameter tensors, ordered by name (which is layer order).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters<S: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Parameters<S> {
    pub fn new() -> Self {
        Parameters {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Sum of squares of every element; also used as a cheap fingerprint.
    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sq_norm).sum()
    }

    /// Check names and shapes against `config`.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.param_shapes()?;
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => {
                    return Err(Error::TensorShape {
                        name: name.clone(),
                        found: vec![],
                        expected: shape.clone(),
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::TensorShape {
                        name: name.clone(),
                        found: t.shape().to_vec(),
                        expected: shape.clone(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !expected.iter().any(|(n, _)| n == *k))
        {
            return Err(Error::TensorShape {
                name: extra.clone(),
                found: self.tensors[extra].shape().to_vec(),
                expected: vec![],
            });
        }
        Ok(())
    }
}

/// He-normal weights (std √(2/fan_in)), zero biases; a pure function of
/// `(config, seed)`.
pub fn build<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Parameters<S>> {
    let shapes = config.param_shapes()?;
    let mut params = Parameters::new();
    for (i, (name, shape)) in shapes.into_iter().enumerate() {
        let t = if name.ends_with("bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::ModelConfig(e.to_string()))?;
            let mut r = rng::stream(seed, domain::INIT, i as u64, 0);
            Tensor::from_fn(&shape, |_| S::from_f64_lossy(normal.sample(&mut r)))
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// A model config together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar = f32> {
    pub config: ModelConfig,
    pub params: Parameters<S>,
}

/// Parameter handles on a tape, by name.
pub type BoundParams = BTreeMap<String, Var>;

impl<S: Scalar> Model<S> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = build(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters<S>) -> Result<Self> {
        params.check_against(&config)?;
        Ok(Model { config, params })
    }

    /// Record parameters on `tape`, as leaves when `trainable`, else constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundParams {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    /// Logits `[b, classes]` for input `x: [b,h,w,c]` already on `tape`.
    pub fn forward(&self, tape: &mut Tape<S>, bound: &BoundParams, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[3] != self.config.input_channels {
            return Err(Error::InvalidArgument(format!(
                "model expects [b,h,w,{}] input, got {shape:?}",
                self.config.input_channels
            )));
        }
        let p = |name: String| {
            bound
                .get(&name)
                .copied()
                .ok_or_else(|| Error::ModelConfig(format!("missing parameter {name}")))
        };
        let mut h = x;
        for (i, layer) in self.config.layers.iter().enumerate() {
            h = match *layer {
                Layer::Conv { stride, .. } => {
                    let y = tape.conv2d(
                        h,
                        p(param_name(i, "conv", "kernel"))?,
                        stride,
                        Padding::Same,
                    )?;
                    tape.add_bias(y, p(param_name(i, "conv", "bias"))?)?
                }
                Layer::Dense { .. } => {
                    let y = tape.matmul(h, p(param_name(i, "dense", "weight"))?)?;
                    tape.add_bias(y, p(param_name(i, "dense", "bias"))?)?
                }
                Layer::Relu => tape.relu(h),
                Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
                Layer::Flatten => tape.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }
}
