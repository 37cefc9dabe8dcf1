//! Declarative layer graph shared by the forward executor and the cost model.
//!
//! A [`Node`] tree describes *what* a network computes; the weights live in a
//! separate [`WeightStore`] keyed by node name. The executor walks the tree
//! over real tensors and counts work from the tensors it actually touches,
//! while [`crate::cost`] walks the same tree symbolically.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{mix_conv, se_block, SeWeights};
use crate::error::{shape_err, Error, Result};
use crate::ops::{
    self, activation, batchnorm_infer, conv2d, resample, Activation, BatchNormParams, ConvWeights,
    Matrix, Resample, BN_EPS,
};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1, same-padded dense convolution.
    pub fn same(c_in: usize, c_out: usize, k: usize, bias: bool) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride: 1,
            padding: k / 2,
            groups: 1,
            bias,
        }
    }

    pub fn depthwise(channels: usize, k: usize) -> Self {
        Self {
            groups: channels,
            ..Self::same(channels, channels, k, false)
        }
    }

    pub fn pointwise(c_in: usize, c_out: usize, bias: bool) -> Self {
        Self::same(c_in, c_out, 1, bias)
    }

    pub fn kernel_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in / self.groups, self.k, self.k)
    }
}

/// One depthwise group of a mixed-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixGroup {
    pub channels: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv(ConvSpec),
    BatchNorm {
        channels: usize,
    },
    Relu,
    Sigmoid,
    MaxPool2,
    UpNearest2,
    Seq(Vec<Node>),
    /// `body(x) + shortcut(x)`; a missing shortcut is the identity.
    Residual {
        body: Box<Node>,
        shortcut: Option<Box<Node>>,
    },
    SqueezeExcite {
        channels: usize,
        reduced: usize,
    },
    MixDepthwise {
        groups: Vec<MixGroup>,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv(_) => "conv",
            Op::BatchNorm { .. } => "bn",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::MaxPool2 => "maxpool2",
            Op::UpNearest2 => "upnearest2",
            Op::Seq(_) => "seq",
            Op::Residual { .. } => "residual",
            Op::SqueezeExcite { .. } => "se",
            Op::MixDepthwise { .. } => "mixdw",
        }
    }
}

/// Parses compact single-layer descriptions such as `conv:128:128:3`,
/// `dwconv:128:3`, `dsconv:128:128:3`, `bn:128`, `relu`, `se:128:16`,
/// `mixdw:64x3,64x5` or `fc:128:8`.
impl FromStr for Node {
    type Err = Error;

    fn from_str(desc: &str) -> Result<Self> {
        let mut parts = desc.trim().split(':');
        let kind = parts.next().unwrap_or_default().to_ascii_lowercase();
        let args: Vec<&str> = parts.collect();
        let num = |i: usize| -> Result<usize> {
            args.get(i)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("`{desc}`: missing argument {}", i + 1))
                })?
                .parse::<usize>()
                .map_err(|e| Error::InvalidArgument(format!("`{desc}`: {e}")))
        };
        let name = desc.to_string();
        let node = match kind.as_str() {
            "conv" => Node::conv(name, ConvSpec::same(num(0)?, num(1)?, num(2)?, false)),
            "dwconv" => Node::conv(name, ConvSpec::depthwise(num(0)?, num(1)?)),
            "dsconv" => separable_conv(&name, num(0)?, num(1)?, num(2)?),
            "bn" => Node::new(name, Op::BatchNorm { channels: num(0)? }),
            "relu" => Node::new(name, Op::Relu),
            "sigmoid" => Node::new(name, Op::Sigmoid),
            "maxpool2" => Node::new(name, Op::MaxPool2),
            "upnearest2" => Node::new(name, Op::UpNearest2),
            "se" => {
                let c = num(0)?;
                let ratio = num(1)?;
                if ratio == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "`{desc}`: ratio must be positive"
                    )));
                }
                Node::new(
                    name,
                    Op::SqueezeExcite {
                        channels: c,
                        reduced: (c / ratio).max(1),
                    },
                )
            }
            "mixdw" => {
                let spec = args.first().ok_or_else(|| {
                    Error::InvalidArgument(format!("`{desc}`: expected groups like 64x3,64x5"))
                })?;
                let groups = spec
                    .split(',')
                    .map(|g| {
                        let (c, k) = g.split_once('x').ok_or_else(|| {
                            Error::InvalidArgument(format!("`{desc}`: bad group `{g}`"))
                        })?;
                        let parse = |s: &str| {
                            s.parse::<usize>()
                                .map_err(|e| Error::InvalidArgument(format!("`{desc}`: {e}")))
                        };
                        Ok(MixGroup {
                            channels: parse(c)?,
                            k: parse(k)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Node::new(name, Op::MixDepthwise { groups })
            }
            other => return Err(Error::UnknownLayer(other.to_string())),
        };
        Ok(node)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
}

impl Node {
    pub fn new(name: impl Into<String>, op: Op) -> Self {
        Self {
            name: name.into(),
            op,
        }
    }

    pub fn conv(name: impl Into<String>, spec: ConvSpec) -> Self {
        Self::new(name, Op::Conv(spec))
    }

    pub fn seq(name: impl Into<String>, nodes: Vec<Node>) -> Self {
        Self::new(name, Op::Seq(nodes))
    }

    pub fn residual(name: impl Into<String>, body: Node, shortcut: Option<Node>) -> Self {
        Self::new(
            name,
            Op::Residual {
                body: Box::new(body),
                shortcut: shortcut.map(Box::new),
            },
        )
    }

    /// Direct children in execution order.
    pub fn children(&self) -> Vec<&Node> {
        match &self.op {
            Op::Seq(nodes) => nodes.iter().collect(),
            Op::Residual { body, shortcut } => {
                let mut v = vec![body.as_ref()];
                if let Some(s) = shortcut {
                    v.push(s.as_ref());
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Visits every node depth-first, parents before children.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Node)) {
        f(self);
        for c in self.children() {
            c.visit(f);
        }
    }

    /// Names and shapes of the learnable tensors this node (not its children) owns.
    pub fn param_shapes(&self) -> Vec<(String, Shape)> {
        let n = &self.name;
        match &self.op {
            Op::Conv(spec) => {
                let mut v = vec![(format!("{n}.weight"), spec.kernel_shape())];
                if spec.bias {
                    v.push((format!("{n}.bias"), Shape::new(1, spec.c_out, 1, 1)));
                }
                v
            }
            Op::BatchNorm { channels } => vec![
                (format!("{n}.gamma"), Shape::new(1, *channels, 1, 1)),
                (format!("{n}.beta"), Shape::new(1, *channels, 1, 1)),
            ],
            Op::SqueezeExcite { channels, reduced } => vec![
                (
                    format!("{n}.fc1.weight"),
                    Shape::new(1, 1, *reduced, *channels),
                ),
                (format!("{n}.fc1.bias"), Shape::new(1, *reduced, 1, 1)),
                (
                    format!("{n}.fc2.weight"),
                    Shape::new(1, 1, *channels, *reduced),
                ),
                (format!("{n}.fc2.bias"), Shape::new(1, *channels, 1, 1)),
            ],
            Op::MixDepthwise { groups } => groups
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    (
                        format!("{n}.g{i}.weight"),
                        Shape::new(g.channels, 1, g.k, g.k),
                    )
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Non-learnable state (batch-norm running statistics).
    pub fn buffer_shapes(&self) -> Vec<(String, Shape)> {
        match &self.op {
            Op::BatchNorm { channels } => vec![
                (
                    format!("{}.running_mean", self.name),
                    Shape::new(1, *channels, 1, 1),
                ),
                (
                    format!("{}.running_var", self.name),
                    Shape::new(1, *channels, 1, 1),
                ),
            ],
            _ => Vec::new(),
        }
    }
}

/// `depthwise(k)` followed by a `1x1` pointwise convolution, without
/// normalisation: the bare factorised convolution.
pub fn separable_conv(name: &str, c_in: usize, c_out: usize, k: usize) -> Node {
    Node::seq(
        name,
        vec![
            Node::conv(format!("{name}.dw"), ConvSpec::depthwise(c_in, k)),
            Node::conv(
                format!("{name}.pw"),
                ConvSpec::pointwise(c_in, c_out, false),
            ),
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Every weight and bias zero; batch norms pass-through.
    Zeros,
    /// Weights and biases uniform in `±1/sqrt(fan_in)`; batch norms pass-through.
    Uniform { seed: u64 },
}

/// Named tensors backing a graph. Batch-norm running statistics are stored
/// alongside the parameters but are not counted as parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

pub fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of stored learnable scalars.
    pub fn param_count(&self) -> u64 {
        self.tensors
            .iter()
            .filter(|(k, _)| !is_buffer_name(k))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    /// Learnable scalars stored under `prefix.` (or exactly `prefix`).
    pub fn param_count_under(&self, prefix: &str) -> u64 {
        let dotted = format!("{prefix}.");
        self.tensors
            .iter()
            .filter(|(k, _)| !is_buffer_name(k) && (k.starts_with(&dotted) || *k == prefix))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    /// Allocates and initialises every tensor `root` needs, in graph order.
    pub fn init_for(&mut self, root: &Node, init: Init) {
        let mut rng = match init {
            Init::Uniform { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Init::Zeros => None,
        };
        root.visit(&mut |node| {
            for (name, shape) in node.buffer_shapes() {
                let fill = if name.ends_with(".running_var") {
                    1.0
                } else {
                    0.0
                };
                self.tensors.insert(name, Tensor::full(shape, fill));
            }
            for (name, shape) in node.param_shapes() {
                let t = if name.ends_with(".gamma") {
                    Tensor::full(shape, 1.0)
                } else if name.ends_with(".beta") {
                    Tensor::zeros(shape)
                } else if let Some(rng) = rng.as_mut() {
                    let bound = 1.0 / (fan_in(node, &name) as f32).sqrt();
                    let data = (0..shape.numel())
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect();
                    Tensor::from_vec(shape, data).expect("shape matches length")
                } else {
                    Tensor::zeros(shape)
                };
                self.tensors.insert(name, t);
            }
        });
    }

    pub fn for_graph(root: &Node, init: Init) -> Self {
        let mut s = Self::new();
        s.init_for(root, init);
        s
    }

    pub fn conv_weights(&self, name: &str, spec: &ConvSpec) -> Result<ConvWeights> {
        let kernel = self.get(&format!("{name}.weight"))?.clone();
        if kernel.shape() != spec.kernel_shape() {
            return shape_err(format!(
                "`{name}.weight` has shape {} but the layer needs {}",
                kernel.shape(),
                spec.kernel_shape()
            ));
        }
        let bias = if spec.bias {
            Some(self.get(&format!("{name}.bias"))?.data().to_vec())
        } else {
            None
        };
        ConvWeights::new(kernel, bias, spec.stride, spec.padding, spec.groups)
    }

    pub fn batchnorm(&self, name: &str) -> Result<BatchNormParams> {
        let v =
            |s: &str| -> Result<Vec<f32>> { Ok(self.get(&format!("{name}.{s}"))?.data().to_vec()) };
        Ok(BatchNormParams {
            mean: v("running_mean")?,
            var: v("running_var")?,
            gamma: v("gamma")?,
            beta: v("beta")?,
            eps: BN_EPS,
        })
    }

    pub fn se_weights(&self, name: &str, channels: usize, reduced: usize) -> Result<SeWeights> {
        let m = |s: &str, rows, cols| -> Result<Matrix> {
            Matrix::new(
                rows,
                cols,
                self.get(&format!("{name}.{s}"))?.data().to_vec(),
            )
        };
        Ok(SeWeights {
            fc1: m("fc1.weight", reduced, channels)?,
            fc1_bias: self.get(&format!("{name}.fc1.bias"))?.data().to_vec(),
            fc2: m("fc2.weight", channels, reduced)?,
            fc2_bias: self.get(&format!("{name}.fc2.bias"))?.data().to_vec(),
        })
    }
}

fn fan_in(node: &Node, tensor_name: &str) -> usize {
    match &node.op {
        Op::Conv(s) => (s.c_in / s.groups) * s.k * s.k,
        Op::SqueezeExcite { channels, reduced } => {
            if tensor_name.contains(".fc1.") {
                *channels
            } else {
                *reduced
            }
        }
        Op::MixDepthwise { groups } => {
            let idx: usize = tensor_name
                .rsplit_once(".g")
                .and_then(|(_, rest)| rest.split('.').next()?.parse().ok())
                .unwrap_or(0);
            groups.get(idx).map_or(1, |g| g.k * g.k)
        }
        _ => 1,
    }
    .max(1)
}

/// Work counted while executing a graph: multiply–accumulates and
/// elementwise operations (normalisation, activation, pooling, resampling,
/// additions, gating).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub macs: u64,
    pub elementwise: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.macs + self.elementwise
    }
}

impl fmt::Display for FlopCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} MACs + {} elementwise", self.macs, self.elementwise)
    }
}

/// Runs `node` on `input`, adding the work performed to `counter`.
pub fn execute(
    node: &Node,
    input: &Tensor,
    store: &WeightStore,
    counter: &mut FlopCounter,
) -> Result<Tensor> {
    let out = match &node.op {
        Op::Conv(spec) => {
            let w = store.conv_weights(&node.name, spec)?;
            let out = conv2d(input, &w)?;
            counter.macs +=
                (out.len() * w.in_channels_per_group() * w.kernel_size() * w.kernel_size()) as u64;
            out
        }
        Op::BatchNorm { .. } => {
            let out = batchnorm_infer(input, &store.batchnorm(&node.name)?)?;
            counter.elementwise += out.len() as u64;
            out
        }
        Op::Relu | Op::Sigmoid => {
            let kind = if node.op == Op::Relu {
                Activation::Relu
            } else {
                Activation::Sigmoid
            };
            let out = activation(input, kind);
            counter.elementwise += out.len() as u64;
            out
        }
        Op::MaxPool2 | Op::UpNearest2 => {
            let mode = if node.op == Op::MaxPool2 {
                Resample::MaxPool2
            } else {
                Resample::UpNearest2
            };
            let out = resample(input, mode)?;
            counter.elementwise += out.len() as u64;
            out
        }
        Op::Seq(nodes) => {
            let mut x = input.clone();
            for n in nodes {
                x = execute(n, &x, store, counter)?;
            }
            x
        }
        Op::Residual { body, shortcut } => {
            let b = execute(body, input, store, counter)?;
            let s = match shortcut {
                Some(s) => execute(s, input, store, counter)?,
                None => input.clone(),
            };
            let out = ops::add(&b, &s)?;
            counter.elementwise += out.len() as u64;
            out
        }
        Op::SqueezeExcite { channels, reduced } => {
            let w = store.se_weights(&node.name, *channels, *reduced)?;
            let out = se_block(input, &w)?;
            let s = input.shape();
            // pool + scale over the map, gate nonlinearities over the squeezed vector
            counter.elementwise += (2 * input.len() + s.n * (w.fc1.rows + w.fc2.rows)) as u64;
            counter.macs += (s.n * (w.fc1.data.len() + w.fc2.data.len())) as u64;
            out
        }
        Op::MixDepthwise { groups } => {
            let kernels = groups
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let spec = ConvSpec::depthwise(g.channels, g.k);
                    store.conv_weights(&format!("{}.g{i}", node.name), &spec)
                })
                .collect::<Result<Vec<_>>>()?;
            let split: Vec<usize> = groups.iter().map(|g| g.channels).collect();
            let out = mix_conv(input, &kernels, &split)?;
            let plane = (out.shape().n * out.shape().plane()) as u64;
            counter.macs += kernels
                .iter()
                .map(|k| plane * (k.out_channels() * k.kernel_size() * k.kernel_size()) as u64)
                .sum::<u64>();
            out
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_known_and_unknown_layers() {
        let n: Node = "conv:128:64:3".parse().unwrap();
        assert_eq!(n.op, Op::Conv(ConvSpec::same(128, 64, 3, false)));
        let n: Node = "mixdw:64x3,64x5".parse().unwrap();
        assert_eq!(
            n.op,
            Op::MixDepthwise {
                groups: vec![
                    MixGroup { channels: 64, k: 3 },
                    MixGroup { channels: 64, k: 5 }
                ]
            }
        );
        assert!(matches!("lstm:3".parse::<Node>(), Err(Error::UnknownLayer(k)) if k == "lstm"));
        assert!("conv:1:x:3".parse::<Node>().is_err());
    }

    #[test]
    fn uniform_init_is_seeded_and_bounded() {
        let node = Node::conv("c", ConvSpec::same(4, 2, 3, true));
        let a = WeightStore::for_graph(&node, Init::Uniform { seed: 7 });
        let b = WeightStore::for_graph(&node, Init::Uniform { seed: 7 });
        let c = WeightStore::for_graph(&node, Init::Uniform { seed: 8 });
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / 36f32.sqrt();
        assert!(a
            .get("c.weight")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
        assert_eq!(a.param_count(), 2 * 4 * 9 + 2);
    }

    #[test]
    fn buffers_are_not_parameters() {
        let node = Node::new("bn", Op::BatchNorm { channels: 5 });
        let s = WeightStore::for_graph(&node, Init::Zeros);
        assert_eq!(s.len(), 4);
        assert_eq!(s.param_count(), 10);
    }

    #[test]
    fn executor_counts_conv_work() {
        let node = Node::conv("c", ConvSpec::same(3, 4, 3, true));
        let store = WeightStore::for_graph(&node, Init::Uniform { seed: 1 });
        let mut counter = FlopCounter::default();
        let out = execute(
            &node,
            &Tensor::zeros(Shape::new(1, 3, 5, 6)),
            &store,
            &mut counter,
        )
        .unwrap();
        assert_eq!(out.shape(), Shape::new(1, 4, 5, 6));
        assert_eq!(counter.macs, 5 * 6 * 4 * 3 * 9);
        assert_eq!(counter.elementwise, 0);
    }

    #[test]
    fn missing_weight_is_reported() {
        let node = Node::conv("c", ConvSpec::same(3, 4, 3, false));
        let err = execute(
            &node,
            &Tensor::zeros(Shape::new(1, 3, 5, 5)),
            &WeightStore::new(),
            &mut FlopCounter::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingWeight(n) if n == "c.weight"));
    }
}
