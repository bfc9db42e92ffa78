//! Layered networks with named parameters.
//!
//! A [`Network`] is an ordered list of [`Layer`] descriptors plus a map from
//! stable parameter names (`<layer>.weight`, `<layer>.bias`) to tensors. The
//! layer list alone determines every parameter shape, which is what lets a
//! checkpoint rebuild the network from its descriptor text.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::ops::Activation;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("layer {layer}: {message}")]
    Layer { layer: String, message: String },
    #[error("input shape {got:?} does not match network input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("invalid network descriptor: {0}")]
    Descriptor(String),
    #[error("parameter `{0}` missing")]
    MissingParam(String),
    #[error("{0}")]
    Invalid(String),
}

impl From<TensorError> for NetworkError {
    fn from(e: TensorError) -> Self {
        NetworkError::Graph(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    FeatureExtractor,
    Generator,
    Discriminator,
    Classifier,
    Composite,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::FeatureExtractor => "feature_extractor",
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
            Role::Classifier => "classifier",
            Role::Composite => "composite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "feature_extractor" => Role::FeatureExtractor,
            "generator" => Role::Generator,
            "discriminator" => Role::Discriminator,
            "classifier" => Role::Classifier,
            "composite" => Role::Composite,
            _ => return None,
        })
    }

    /// Layer-name prefix used by the builders.
    pub fn prefix(self) -> &'static str {
        match self {
            Role::FeatureExtractor => "fe",
            Role::Generator => "gen",
            Role::Discriminator => "disc",
            Role::Classifier => "cls",
            Role::Composite => "net",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Flatten,
    /// Reshape each sample to the given per-sample shape.
    Reshape(Vec<usize>),
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Upsample2x,
    Dropout(f64),
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => Some(vec![inputs, outputs]),
            LayerKind::Conv {
                in_channels,
                filters,
                kernel,
                ..
            } => Some(vec![filters, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerKind::Dense { outputs, .. } => Some(outputs),
            LayerKind::Conv { filters, .. } => Some(filters),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Reshape(shape) => {
                if shape.iter().product::<usize>() == input.iter().product::<usize>() {
                    Ok(shape.clone())
                } else {
                    Err(format!("cannot reshape {input:?} to {shape:?}"))
                }
            }
            LayerKind::Dense { inputs, outputs } => {
                if input.len() == 1 && input[0] == *inputs {
                    Ok(vec![*outputs])
                } else {
                    Err(format!("dense layer expects [{inputs}], got {input:?}"))
                }
            }
            LayerKind::Conv {
                in_channels,
                filters,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(format!("conv expects [{in_channels}, H, W], got {input:?}"));
                }
                let h = crate::ops::window_out(input[1], *kernel, *stride, *padding);
                let w = crate::ops::window_out(input[2], *kernel, *stride, *padding);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![*filters, h, w]),
                    _ => Err(format!("kernel {kernel} does not fit input {input:?}")),
                }
            }
            LayerKind::MaxPool { kernel, stride } => {
                if input.len() != 3 {
                    return Err(format!("maxpool expects [C, H, W], got {input:?}"));
                }
                let h = crate::ops::window_out(input[1], *kernel, *stride, 0);
                let w = crate::ops::window_out(input[2], *kernel, *stride, 0);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![input[0], h, w]),
                    _ => Err(format!("pool window {kernel} does not fit input {input:?}")),
                }
            }
            LayerKind::Upsample2x => {
                if input.len() != 3 {
                    return Err(format!("upsample expects [C, H, W], got {input:?}"));
                }
                Ok(vec![input[0], 2 * input[1], 2 * input[2]])
            }
            LayerKind::Dropout(rate) => {
                if (0.0..1.0).contains(rate) {
                    Ok(input.to_vec())
                } else {
                    Err(format!("dropout rate {rate} outside [0, 1)"))
                }
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            LayerKind::Flatten => "flatten".into(),
            LayerKind::Reshape(s) => format!("reshape {}", join(s)),
            LayerKind::Dense { inputs, outputs } => format!("dense {inputs} {outputs}"),
            LayerKind::Conv {
                in_channels,
                filters,
                kernel,
                stride,
                padding,
            } => format!("conv {in_channels} {filters} {kernel} {stride} {padding}"),
            LayerKind::MaxPool { kernel, stride } => format!("maxpool {kernel} {stride}"),
            LayerKind::Upsample2x => "upsample2x".into(),
            LayerKind::Dropout(rate) => format!("dropout {rate}"),
        }
    }

    fn parse(words: &[&str]) -> Result<Self, String> {
        let nums = |n: usize| -> Result<Vec<usize>, String> {
            let v: Vec<usize> = words[1..]
                .iter()
                .map(|w| w.parse::<usize>().map_err(|e| format!("`{w}`: {e}")))
                .collect::<Result<_, _>>()?;
            if n != usize::MAX && v.len() != n {
                return Err(format!("`{}` takes {n} arguments", words[0]));
            }
            Ok(v)
        };
        Ok(match words.first().copied() {
            Some("flatten") => LayerKind::Flatten,
            Some("reshape") => LayerKind::Reshape(nums(usize::MAX)?),
            Some("dense") => {
                let v = nums(2)?;
                LayerKind::Dense {
                    inputs: v[0],
                    outputs: v[1],
                }
            }
            Some("conv") => {
                let v = nums(5)?;
                LayerKind::Conv {
                    in_channels: v[0],
                    filters: v[1],
                    kernel: v[2],
                    stride: v[3],
                    padding: v[4],
                }
            }
            Some("maxpool") => {
                let v = nums(2)?;
                LayerKind::MaxPool {
                    kernel: v[0],
                    stride: v[1],
                }
            }
            Some("upsample2x") => LayerKind::Upsample2x,
            Some("dropout") if words.len() == 2 => {
                LayerKind::Dropout(words[1].parse().map_err(|e| format!("dropout rate: {e}"))?)
            }
            other => return Err(format!("unknown layer kind {other:?}")),
        })
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub activation: Activation,
}

impl Layer {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// Runtime switches for one forward pass.
pub struct ForwardOptions<'a, T: Scalar> {
    /// Register parameters as trainable graph leaves (otherwise constants).
    pub trainable: bool,
    /// Source of dropout masks; dropout layers are identity when `None`.
    pub dropout: Option<&'a mut ChaCha8Rng>,
    /// Per-layer multiplicative masks applied to post-activation outputs,
    /// one row broadcast over the batch.
    pub node_masks: Option<&'a BTreeMap<String, Tensor<T>>>,
    /// Parameters whose names start with this prefix stay constant even when
    /// `trainable` is set.
    pub frozen_prefix: Option<&'a str>,
}

impl<T: Scalar> ForwardOptions<'_, T> {
    pub fn train() -> Self {
        Self {
            trainable: true,
            dropout: None,
            node_masks: None,
            frozen_prefix: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            trainable: false,
            dropout: None,
            node_masks: None,
            frozen_prefix: None,
        }
    }
}

pub struct Forward {
    pub output: NodeId,
    /// Graph leaves of every parameter, by name.
    pub params: BTreeMap<String, NodeId>,
}

#[derive(Clone, PartialEq)]
pub struct Network<T: Scalar = f32> {
    role: Role,
    arch: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("role", &self.role)
            .field("arch", &self.arch)
            .field("input_shape", &self.input_shape)
            .field("layers", &self.layers.len())
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl<T: Scalar> Network<T> {
    /// Assembles a network from descriptors and parameters, checking every shape.
    pub fn from_parts(
        role: Role,
        arch: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        params: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self, NetworkError> {
        let net = Self {
            role,
            arch: arch.into(),
            input_shape,
            layers,
            params,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let shapes = self.layer_shapes()?;
        let mut names = std::collections::BTreeSet::new();
        let mut expected = 0;
        for (layer, _) in self.layers.iter().zip(&shapes) {
            if !names.insert(layer.name.as_str()) {
                return Err(NetworkError::Layer {
                    layer: layer.name.clone(),
                    message: "duplicate layer name".into(),
                });
            }
            if let (Some(ws), Some(bl)) = (layer.kind.weight_shape(), layer.kind.bias_len()) {
                expected += 2;
                for (name, shape) in [(layer.weight_name(), ws), (layer.bias_name(), vec![bl])] {
                    let t = self
                        .params
                        .get(&name)
                        .ok_or_else(|| NetworkError::MissingParam(name.clone()))?;
                    if t.shape() != shape.as_slice() {
                        return Err(NetworkError::Layer {
                            layer: layer.name.clone(),
                            message: format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()),
                        });
                    }
                }
            }
        }
        if expected != self.params.len() {
            return Err(NetworkError::Invalid(format!(
                "{} parameter tensors present, layers declare {expected}",
                self.params.len()
            )));
        }
        Ok(())
    }

    /// Per-sample output shape of every layer, in order.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>, NetworkError> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.kind.output_shape(&shape).map_err(|message| NetworkError::Layer {
                layer: layer.name.clone(),
                message,
            })?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layer_shapes()
            .ok()
            .and_then(|s| s.last().cloned())
            .unwrap_or_else(|| self.input_shape.clone())
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Names of weight and filter tensors (biases excluded).
    pub fn weight_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.kind.has_params())
            .map(Layer::weight_name)
            .collect()
    }

    pub fn has_conv(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.kind, LayerKind::Conv { .. }))
    }

    /// Widths of a fully connected stack: input size followed by each dense output.
    pub fn dense_widths(&self) -> Vec<usize> {
        let mut widths = Vec::new();
        for l in &self.layers {
            if let LayerKind::Dense { inputs, outputs } = l.kind {
                if widths.is_empty() {
                    widths.push(inputs);
                }
                widths.push(outputs);
            }
        }
        widths
    }

    pub fn with_arch(mut self, arch: impl Into<String>) -> Self {
        self.arch = arch.into();
        self
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            role: self.role,
            arch: self.arch.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records a forward pass of `input` (batch-leading) into `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        opts: &mut ForwardOptions<'_, T>,
    ) -> Result<Forward, NetworkError> {
        let got = g.value(input).shape();
        if got.len() < 2 || got[1..].iter().product::<usize>() != self.input_shape.iter().product::<usize>() {
            return Err(NetworkError::InputShape {
                expected: self.input_shape.clone(),
                got: got.to_vec(),
            });
        }
        let batch = got[0];
        let mut x = if got[1..] == self.input_shape[..] {
            input
        } else {
            let mut s = vec![batch];
            s.extend_from_slice(&self.input_shape);
            g.reshape(input, s)?
        };
        let mut params = BTreeMap::new();
        for layer in &self.layers {
            x = match &layer.kind {
                LayerKind::Flatten => g.flatten(x)?,
                LayerKind::Reshape(shape) => {
                    let mut s = vec![batch];
                    s.extend_from_slice(shape);
                    g.reshape(x, s)?
                }
                LayerKind::Dense { .. } => {
                    let (w, b) = self.leaves(g, layer, opts, &mut params)?;
                    let y = g.matmul(x, w)?;
                    g.add_row_bias(y, b)?
                }
                LayerKind::Conv { stride, padding, .. } => {
                    let (w, b) = self.leaves(g, layer, opts, &mut params)?;
                    g.conv2d(x, w, b, *stride, *padding)?
                }
                LayerKind::MaxPool { kernel, stride } => g.maxpool2d(x, *kernel, *stride)?,
                LayerKind::Upsample2x => g.upsample_bilinear2x(x)?,
                LayerKind::Dropout(rate) => match opts.dropout.as_deref_mut() {
                    Some(rng) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let scale = T::from_f64_lossy(1.0 / keep);
                        let n = g.value(x).numel();
                        let mask = Tensor::from_fn([n], |_| {
                            if rng.gen::<f64>() < keep {
                                scale
                            } else {
                                T::zero()
                            }
                        });
                        g.mul_const(x, mask)?
                    }
                    _ => x,
                },
            };
            x = g.activation(x, layer.activation);
            if let Some(mask) = opts.node_masks.and_then(|m| m.get(&layer.name)) {
                x = g.mul_const(x, mask.clone())?;
            }
        }
        Ok(Forward { output: x, params })
    }

    fn leaves(
        &self,
        g: &mut Graph<T>,
        layer: &Layer,
        opts: &ForwardOptions<'_, T>,
        params: &mut BTreeMap<String, NodeId>,
    ) -> Result<(NodeId, NodeId), NetworkError> {
        let trainable = opts.trainable && !opts.frozen_prefix.is_some_and(|p| layer.name.starts_with(p));
        let mut leaf = |name: String| -> Result<NodeId, NetworkError> {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| NetworkError::MissingParam(name.clone()))?
                .clone();
            let id = if trainable { g.param(t) } else { g.constant(t) };
            params.insert(name, id);
            Ok(id)
        };
        Ok((leaf(layer.weight_name())?, leaf(layer.bias_name())?))
    }

    /// Inference over a batch-leading tensor, evaluated in chunks.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.predict_masked(x, None)
    }

    pub fn predict_masked(
        &self,
        x: &Tensor<T>,
        node_masks: Option<&BTreeMap<String, Tensor<T>>>,
    ) -> Result<Tensor<T>, NetworkError> {
        const CHUNK: usize = 1000;
        let n = x.batch();
        let mut outs = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = if start == 0 && end == n { x.clone() } else { x.gather_rows(&idx) };
            let mut g = Graph::new();
            let input = g.constant(chunk);
            let mut opts = ForwardOptions {
                node_masks,
                ..ForwardOptions::eval()
            };
            let out = self.forward(&mut g, input, &mut opts)?.output;
            outs.push(g.value(out).clone());
            start = end;
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        Ok(Tensor::concat_rows(&refs)?)
    }

    /// Applies `param <- param - lr * grad` for every supplied gradient.
    pub fn apply_gradients(&mut self, grads: &BTreeMap<String, Tensor<T>>, lr: T) -> Result<(), NetworkError> {
        for (name, grad) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| NetworkError::MissingParam(name.clone()))?;
            crate::graph::sgd_step(p, grad, lr)?;
        }
        Ok(())
    }

    /// Text descriptor: role, architecture label, input shape and layers.
    pub fn descriptor(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "role {}", self.role.name());
        let _ = writeln!(s, "arch {}", self.arch);
        let _ = writeln!(s, "input {}", join(&self.input_shape));
        for l in &self.layers {
            let _ = writeln!(s, "layer {} {} {}", l.name, l.activation.name(), l.kind.describe());
        }
        s
    }

    /// Parses a descriptor into `(role, arch, input_shape, layers)`.
    pub fn parse_descriptor(text: &str) -> Result<(Role, String, Vec<usize>, Vec<Layer>), NetworkError> {
        let err = |m: String| NetworkError::Descriptor(m);
        let mut role = None;
        let mut arch = None;
        let mut input = None;
        let mut layers = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let words: Vec<&str> = line.split_whitespace().collect();
            match words[0] {
                "role" if words.len() == 2 => {
                    role = Some(Role::parse(words[1]).ok_or_else(|| err(format!("role `{}`", words[1])))?)
                }
                "arch" if words.len() == 2 => arch = Some(words[1].to_string()),
                "input" => {
                    input = Some(
                        words[1..]
                            .iter()
                            .map(|w| w.parse::<usize>().map_err(|e| err(format!("input: {e}"))))
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                }
                "layer" if words.len() >= 4 => {
                    let activation = Activation::parse(words[2])
                        .ok_or_else(|| err(format!("activation `{}`", words[2])))?;
                    let kind = LayerKind::parse(&words[3..]).map_err(err)?;
                    layers.push(Layer {
                        name: words[1].to_string(),
                        kind,
                        activation,
                    });
                }
                _ => return Err(err(format!("unrecognized line `{line}`"))),
            }
        }
        Ok((
            role.ok_or_else(|| err("missing role".into()))?,
            arch.ok_or_else(|| err("missing arch".into()))?,
            input.ok_or_else(|| err("missing input".into()))?,
            layers,
        ))
    }
}

/// Incremental constructor that tracks shapes and draws initial weights.
///
/// Weights are uniform in `±sqrt(6 / fan_in)`, biases zero.
pub struct NetworkBuilder {
    role: Role,
    prefix: String,
    input_shape: Vec<usize>,
    shape: Vec<usize>,
    layers: Vec<Layer>,
    error: Option<NetworkError>,
}

impl NetworkBuilder {
    pub fn new(role: Role, input_shape: impl Into<Vec<usize>>) -> Self {
        let input_shape = input_shape.into();
        Self {
            role,
            prefix: role.prefix().to_string(),
            shape: input_shape.clone(),
            input_shape,
            layers: Vec::new(),
            error: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn push(mut self, tag: &str, kind: LayerKind, activation: Activation) -> Self {
        if self.error.is_some() {
            return self;
        }
        let name = format!("{}.{}{}", self.prefix, tag, self.layers.len());
        match kind.output_shape(&self.shape) {
            Ok(s) => {
                self.shape = s;
                self.layers.push(Layer {
                    name,
                    kind,
                    activation,
                });
            }
            Err(message) => self.error = Some(NetworkError::Layer { layer: name, message }),
        }
        self
    }

    pub fn flatten(self) -> Self {
        self.push("flatten", LayerKind::Flatten, Activation::Identity)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        self.push("reshape", LayerKind::Reshape(shape.into()), Activation::Identity)
    }

    pub fn dense(self, outputs: usize, activation: Activation) -> Self {
        let inputs = self.shape.iter().product();
        self.push("dense", LayerKind::Dense { inputs, outputs }, activation)
    }

    pub fn conv(self, filters: usize, kernel: usize, stride: usize, padding: usize, activation: Activation) -> Self {
        let in_channels = self.shape.first().copied().unwrap_or(0);
        self.push(
            "conv",
            LayerKind::Conv {
                in_channels,
                filters,
                kernel,
                stride,
                padding,
            },
            activation,
        )
    }

    pub fn maxpool(self, kernel: usize, stride: usize) -> Self {
        self.push("pool", LayerKind::MaxPool { kernel, stride }, Activation::Identity)
    }

    pub fn upsample2x(self) -> Self {
        self.push("up", LayerKind::Upsample2x, Activation::Identity)
    }

    pub fn dropout(self, rate: f64) -> Self {
        self.push("drop", LayerKind::Dropout(rate), Activation::Identity)
    }

    pub fn build<T: Scalar>(self, arch: impl Into<String>, seed: u64) -> Result<Network<T>, NetworkError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for layer in &self.layers {
            if let (Some(ws), Some(bl)) = (layer.kind.weight_shape(), layer.kind.bias_len()) {
                let bound = (6.0 / layer.kind.fan_in() as f64).sqrt();
                let w = Tensor::from_fn(ws, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)));
                params.insert(layer.weight_name(), w);
                params.insert(layer.bias_name(), Tensor::zeros([bl]));
            }
        }
        Network::from_parts(self.role, arch, self.input_shape, self.layers, params)
    }
}

/// Chains a feature extractor and a classifier head into one network.
pub fn compose<T: Scalar>(fe: &Network<T>, head: &Network<T>) -> Result<Network<T>, NetworkError> {
    let fe_out: usize = fe.output_shape().iter().product();
    let head_in: usize = head.input_shape().iter().product();
    if fe_out != head_in {
        return Err(NetworkError::Invalid(format!(
            "feature extractor emits {fe_out} values, head expects {head_in}"
        )));
    }
    let mut layers = fe.layers.clone();
    if head.input_shape.len() != fe.output_shape().len() {
        layers.push(Layer {
            name: format!("{}.bridge", head.role.prefix()),
            kind: LayerKind::Reshape(head.input_shape.clone()),
            activation: Activation::Identity,
        });
    }
    layers.extend(head.layers.iter().cloned());
    let mut params = fe.params.clone();
    params.extend(head.params.iter().map(|(k, v)| (k.clone(), v.clone())));
    Network::from_parts(Role::Composite, fe.arch.clone(), fe.input_shape.clone(), layers, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_parameter_count() {
        let net: Network<f32> = NetworkBuilder::new(Role::Classifier, [2])
            .dense(3, Activation::Identity)
            .build("t", 0)
            .unwrap();
        assert_eq!(net.parameter_count(), 9);
    }

    #[test]
    fn init_is_bounded_and_deterministic() {
        let build = || -> Network<f32> {
            NetworkBuilder::new(Role::FeatureExtractor, [1, 6, 6])
                .conv(2, 3, 1, 0, Activation::Relu)
                .flatten()
                .dense(4, Activation::Identity)
                .build("t", 42)
                .unwrap()
        };
        let a = build();
        assert_eq!(a, build());
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(a.param("fe.conv0.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(a.param("fe.conv0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn builder_reports_bad_shapes() {
        let err = NetworkBuilder::new(Role::FeatureExtractor, [1, 2, 2])
            .conv(4, 3, 1, 0, Activation::Relu)
            .build::<f32>("t", 0)
            .unwrap_err();
        assert!(matches!(err, NetworkError::Layer { .. }));
    }

    #[test]
    fn descriptor_round_trip() {
        let net: Network<f32> = NetworkBuilder::new(Role::Generator, [4])
            .dense(8, Activation::LeakyRelu)
            .reshape([2, 2, 2])
            .conv(3, 1, 1, 0, Activation::Sigmoid)
            .upsample2x()
            .dropout(0.3)
            .build("t", 1)
            .unwrap();
        let (role, arch, input, layers) = Network::<f32>::parse_descriptor(&net.descriptor()).unwrap();
        assert_eq!(role, Role::Generator);
        assert_eq!(arch, "t");
        assert_eq!(input, vec![4]);
        assert_eq!(layers, net.layers());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mut net: Network<f32> = NetworkBuilder::new(Role::Classifier, [3])
            .dense(5, Activation::Relu)
            .dense(2, Activation::Identity)
            .build("t", 3)
            .unwrap();
        for name in net.params().keys().cloned().collect::<Vec<_>>() {
            net.param_mut(&name).unwrap().data_mut().fill(0.0);
        }
        let out = net.predict(&Tensor::ones([4, 3])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_rate_dropout_is_deterministic() {
        let net: Network<f32> = NetworkBuilder::new(Role::Discriminator, [3])
            .dense(5, Activation::Relu)
            .dropout(0.0)
            .dense(1, Activation::Sigmoid)
            .build("t", 3)
            .unwrap();
        let x = Tensor::from_fn([4, 3], |i| i as f32 * 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let mut opts = ForwardOptions {
            dropout: Some(&mut rng),
            ..ForwardOptions::eval()
        };
        let out = net.forward(&mut g, input, &mut opts).unwrap().output;
        assert_eq!(g.value(out), &net.predict(&x).unwrap());
    }
}
