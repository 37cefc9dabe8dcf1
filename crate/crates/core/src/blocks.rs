//! Residual blocks: the original bottleneck, the two-conv basic block, the
//! depthwise-separable block with squeeze-and-excitation, and its
//! mixed-kernel variant.

use crate::error::{shape_err, Result};
use crate::graph::{ConvSpec, MixGroup, Node, Op};
use crate::ops::{
    activation, batchnorm_infer, conv2d, fully_connected, global_avg_pool, scale_channels, sigmoid,
    Activation, BatchNormParams, ConvWeights, Matrix,
};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// 1x1 reduce, 3x3, 1x1 expand at 256 channels.
    BottleneckA,
    /// Two dense 3x3 convolutions.
    BasicB,
    /// Two depthwise-separable units followed by SE.
    DsC,
    /// Like `DsC` with mixed-kernel depthwise convolutions and an inner skip
    /// around the second unit.
    MixD,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels: usize,
    pub se_ratio: usize,
    pub mix_kernels: Vec<usize>,
    /// Explicit channel partition for the mixed convolution; `None` splits
    /// the channels into equal contiguous groups.
    pub mix_split: Option<Vec<usize>>,
    /// SE gate on `DsC`/`MixD`. Disabling it is an ablation.
    pub use_se: bool,
    /// Number of separable units in `DsC`/`MixD` (2 normally, 1 for the
    /// single-unit ablation).
    pub units: usize,
    /// Identity skip around the second unit of `MixD`.
    pub inner_skip: bool,
}

pub const DEFAULT_SE_RATIO: usize = 16;

impl BlockSpec {
    pub fn new(kind: BlockKind) -> Self {
        Self {
            kind,
            channels: if kind == BlockKind::BottleneckA {
                256
            } else {
                128
            },
            se_ratio: DEFAULT_SE_RATIO,
            mix_kernels: vec![3, 5],
            mix_split: None,
            use_se: true,
            units: 2,
            inner_skip: true,
        }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.se_ratio == 0 {
            return shape_err("block channels and SE ratio must be positive");
        }
        if !(1..=2).contains(&self.units) {
            return shape_err(format!(
                "separable blocks take 1 or 2 units, got {}",
                self.units
            ));
        }
        if self.kind == BlockKind::MixD {
            if self.mix_kernels.is_empty() || self.mix_kernels.iter().any(|k| k % 2 == 0) {
                return shape_err(format!(
                    "mix kernels must be odd, got {:?}",
                    self.mix_kernels
                ));
            }
            if let Some(split) = &self.mix_split {
                if split.len() != self.mix_kernels.len() {
                    return shape_err(format!(
                        "mix split {:?} and kernels {:?} differ in length",
                        split, self.mix_kernels
                    ));
                }
                if split.iter().sum::<usize>() != self.channels {
                    return shape_err(format!(
                        "mix split {:?} does not sum to {} channels",
                        split, self.channels
                    ));
                }
            }
        }
        Ok(())
    }

    fn mix_groups(&self, channels: usize) -> Vec<MixGroup> {
        let split = match &self.mix_split {
            Some(s) if channels == self.channels => s.clone(),
            _ => equal_split(channels, self.mix_kernels.len()),
        };
        split
            .into_iter()
            .zip(&self.mix_kernels)
            .map(|(c, &k)| MixGroup { channels: c, k })
            .collect()
    }
}

/// Contiguous partition of `channels` into `parts` groups; earlier groups
/// absorb the remainder.
pub fn equal_split(channels: usize, parts: usize) -> Vec<usize> {
    let base = channels / parts;
    let extra = channels % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

pub fn se_reduced(channels: usize, ratio: usize) -> usize {
    (channels / ratio).max(1)
}

// ---------------------------------------------------------------------------
// Functional forms over explicit weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SeWeights {
    pub fc1: Matrix,
    pub fc1_bias: Vec<f32>,
    pub fc2: Matrix,
    pub fc2_bias: Vec<f32>,
}

impl SeWeights {
    pub fn zeros(channels: usize, ratio: usize) -> Self {
        let r = se_reduced(channels, ratio);
        Self {
            fc1: Matrix::zeros(r, channels),
            fc1_bias: vec![0.0; r],
            fc2: Matrix::zeros(channels, r),
            fc2_bias: vec![0.0; channels],
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.data.len() + self.fc1_bias.len() + self.fc2.data.len() + self.fc2_bias.len()
    }
}

/// Per-channel gates `sigmoid(fc2(relu(fc1(gap(x)))))`, laid out `n * c + c`.
pub fn se_gates(input: &Tensor, w: &SeWeights) -> Result<Vec<f32>> {
    let s = input.shape();
    let pooled = global_avg_pool(input);
    let mut gates = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        let v = &pooled.data()[n * s.c..(n + 1) * s.c];
        let hidden: Vec<f32> = fully_connected(v, &w.fc1, &w.fc1_bias)?
            .into_iter()
            .map(|h| h.max(0.0))
            .collect();
        gates.extend(
            fully_connected(&hidden, &w.fc2, &w.fc2_bias)?
                .into_iter()
                .map(sigmoid),
        );
    }
    Ok(gates)
}

/// Squeeze-and-excitation: rescales each channel by its learned gate.
pub fn se_block(input: &Tensor, w: &SeWeights) -> Result<Tensor> {
    scale_channels(input, &se_gates(input, w)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsUnitWeights {
    pub depthwise: ConvWeights,
    pub bn1: BatchNormParams,
    pub pointwise: ConvWeights,
    pub bn2: BatchNormParams,
}

/// depthwise(k) -> BN -> relu -> pointwise -> BN -> relu.
pub fn ds_sep_unit(input: &Tensor, w: &DsUnitWeights) -> Result<Tensor> {
    let x = crate::ops::depthwise_conv2d(input, &w.depthwise)?;
    let x = activation(&batchnorm_infer(&x, &w.bn1)?, Activation::Relu);
    let x = conv2d(&x, &w.pointwise)?;
    Ok(activation(&batchnorm_infer(&x, &w.bn2)?, Activation::Relu))
}

/// Depthwise convolution with a different kernel per contiguous channel group.
/// `kernels[g]` must be a depthwise kernel over `split[g]` channels.
pub fn mix_conv(input: &Tensor, kernels: &[ConvWeights], split: &[usize]) -> Result<Tensor> {
    if kernels.len() != split.len() {
        return shape_err(format!(
            "{} kernels for a {}-way channel split",
            kernels.len(),
            split.len()
        ));
    }
    let c = input.shape().c;
    if split.iter().sum::<usize>() != c {
        return shape_err(format!("split {split:?} does not cover {c} input channels"));
    }
    let mut outputs = Vec::with_capacity(split.len());
    let mut start = 0;
    for (w, &count) in kernels.iter().zip(split) {
        let part = input.slice_channels(start, count)?;
        outputs.push(crate::ops::depthwise_conv2d(&part, w)?);
        start += count;
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    Tensor::concat_channels(&refs)
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

fn conv_bn(name: &str, spec: ConvSpec, relu: bool) -> Vec<Node> {
    let mut v = vec![
        Node::conv(format!("{name}.conv"), spec),
        Node::new(
            format!("{name}.bn"),
            Op::BatchNorm {
                channels: spec.c_out,
            },
        ),
    ];
    if relu {
        v.push(Node::new(format!("{name}.relu"), Op::Relu));
    }
    v
}

/// Graph of one separable unit. `mix` replaces the depthwise convolution by
/// a mixed-kernel one.
pub fn ds_unit_node(
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    mix: Option<Vec<MixGroup>>,
) -> Node {
    let spatial = match mix {
        Some(groups) => Node::new(format!("{name}.dw"), Op::MixDepthwise { groups }),
        None => Node::conv(format!("{name}.dw"), ConvSpec::depthwise(c_in, k)),
    };
    Node::seq(
        name,
        vec![
            spatial,
            Node::new(format!("{name}.bn1"), Op::BatchNorm { channels: c_in }),
            Node::new(format!("{name}.relu1"), Op::Relu),
            Node::conv(
                format!("{name}.pw"),
                ConvSpec::pointwise(c_in, c_out, false),
            ),
            Node::new(format!("{name}.bn2"), Op::BatchNorm { channels: c_out }),
            Node::new(format!("{name}.relu2"), Op::Relu),
        ],
    )
}

/// Block at `spec.channels` in and out.
pub fn build_block(name: &str, spec: &BlockSpec) -> Result<Node> {
    build_block_io(name, spec, spec.channels, spec.channels)
}

/// Block mapping `c_in` to `c_out` channels; a biased 1x1 projection
/// replaces the identity shortcut when they differ.
pub fn build_block_io(name: &str, spec: &BlockSpec, c_in: usize, c_out: usize) -> Result<Node> {
    spec.validate()?;
    let body_name = format!("{name}.body");
    let body = match spec.kind {
        BlockKind::BottleneckA => {
            let mid = (c_out / 2).max(1);
            let mut v = conv_bn(
                &format!("{name}.reduce"),
                ConvSpec::pointwise(c_in, mid, false),
                true,
            );
            v.extend(conv_bn(
                &format!("{name}.spatial"),
                ConvSpec::same(mid, mid, 3, false),
                true,
            ));
            v.extend(conv_bn(
                &format!("{name}.expand"),
                ConvSpec::pointwise(mid, c_out, false),
                false,
            ));
            Node::seq(body_name, v)
        }
        BlockKind::BasicB => {
            let mut v = conv_bn(
                &format!("{name}.conv1"),
                ConvSpec::same(c_in, c_out, 3, false),
                true,
            );
            v.extend(conv_bn(
                &format!("{name}.conv2"),
                ConvSpec::same(c_out, c_out, 3, false),
                false,
            ));
            Node::seq(body_name, v)
        }
        BlockKind::DsC | BlockKind::MixD => {
            let mix = spec.kind == BlockKind::MixD;
            let groups = |c: usize| mix.then(|| spec.mix_groups(c));
            let mut v = vec![ds_unit_node(
                &format!("{name}.unit1"),
                c_in,
                c_out,
                3,
                groups(c_in),
            )];
            if spec.units == 2 {
                let unit2 = ds_unit_node(&format!("{name}.unit2"), c_out, c_out, 3, groups(c_out));
                if mix && spec.inner_skip {
                    v.push(Node::residual(format!("{name}.inner"), unit2, None));
                } else {
                    v.push(unit2);
                }
            }
            if spec.use_se {
                v.push(Node::new(
                    format!("{name}.se"),
                    Op::SqueezeExcite {
                        channels: c_out,
                        reduced: se_reduced(c_out, spec.se_ratio),
                    },
                ));
            }
            Node::seq(body_name, v)
        }
    };
    let shortcut = (c_in != c_out).then(|| {
        Node::conv(
            format!("{name}.proj"),
            ConvSpec::pointwise(c_in, c_out, true),
        )
    });
    Ok(Node::residual(name, body, shortcut))
}

/// Output shape of a block (every block is shape-preserving apart from the
/// channel count).
pub fn block_output_shape(input: Shape, c_out: usize) -> Shape {
    Shape::new(input.n, c_out, input.h, input.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{execute, FlopCounter, Init, WeightStore};

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn identity_depthwise(c: usize, k: usize) -> ConvWeights {
        let mut kernel = Tensor::zeros(Shape::new(c, 1, k, k));
        for ch in 0..c {
            kernel.set(ch, 0, k / 2, k / 2, 1.0);
        }
        ConvWeights::same(kernel, None, c).unwrap()
    }

    fn identity_pointwise(c: usize) -> ConvWeights {
        let mut kernel = Tensor::zeros(Shape::new(c, c, 1, 1));
        for ch in 0..c {
            kernel.set(ch, ch, 0, 0, 1.0);
        }
        ConvWeights::same(kernel, None, 1).unwrap()
    }

    #[test]
    fn se_with_zero_weights_halves_input() {
        let x = rand_tensor(Shape::new(2, 8, 3, 3), 1);
        let out = se_block(&x, &SeWeights::zeros(8, 4)).unwrap();
        for (o, i) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn se_gates_are_in_open_unit_interval() {
        let x = rand_tensor(Shape::new(1, 16, 4, 4), 2);
        let node = Node::new(
            "se",
            Op::SqueezeExcite {
                channels: 16,
                reduced: 4,
            },
        );
        let store = WeightStore::for_graph(&node, Init::Uniform { seed: 3 });
        let gates = se_gates(&x, &store.se_weights("se", 16, 4).unwrap()).unwrap();
        assert!(gates.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn se_param_count_at_128_over_16() {
        assert_eq!(
            SeWeights::zeros(128, 16).param_count(),
            128 * 8 + 8 + 8 * 128 + 128
        );
        assert_eq!(SeWeights::zeros(128, 16).param_count(), 2184);
        // width never collapses to zero
        assert_eq!(se_reduced(8, 16), 1);
    }

    #[test]
    fn ds_unit_with_identity_kernels_is_relu() {
        let x = rand_tensor(Shape::new(1, 6, 5, 5), 4);
        let w = DsUnitWeights {
            depthwise: identity_depthwise(6, 3),
            bn1: BatchNormParams::pass_through(6),
            pointwise: identity_pointwise(6),
            bn2: BatchNormParams::pass_through(6),
        };
        let out = ds_sep_unit(&x, &w).unwrap();
        assert_eq!(out, activation(&x, Activation::Relu));
    }

    #[test]
    fn ds_unit_graph_matches_functional_form() {
        let node = ds_unit_node("u", 4, 6, 3, None);
        let store = WeightStore::for_graph(&node, Init::Uniform { seed: 5 });
        let x = rand_tensor(Shape::new(1, 4, 6, 6), 6);
        let via_graph = execute(&node, &x, &store, &mut FlopCounter::default()).unwrap();
        let w = DsUnitWeights {
            depthwise: store
                .conv_weights("u.dw", &ConvSpec::depthwise(4, 3))
                .unwrap(),
            bn1: store.batchnorm("u.bn1").unwrap(),
            pointwise: store
                .conv_weights("u.pw", &ConvSpec::pointwise(4, 6, false))
                .unwrap(),
            bn2: store.batchnorm("u.bn2").unwrap(),
        };
        assert_eq!(ds_sep_unit(&x, &w).unwrap(), via_graph);
    }

    #[test]
    fn mix_conv_single_group_is_depthwise() {
        let x = rand_tensor(Shape::new(1, 5, 6, 6), 7);
        let node = Node::conv("d", ConvSpec::depthwise(5, 3));
        let store = WeightStore::for_graph(&node, Init::Uniform { seed: 8 });
        let w = store.conv_weights("d", &ConvSpec::depthwise(5, 3)).unwrap();
        assert_eq!(
            mix_conv(&x, std::slice::from_ref(&w), &[5]).unwrap(),
            crate::ops::depthwise_conv2d(&x, &w).unwrap()
        );
    }

    #[test]
    fn mix_conv_identity_kernels() {
        let x = rand_tensor(Shape::new(1, 6, 7, 7), 9);
        let ks = [identity_depthwise(2, 3), identity_depthwise(4, 5)];
        assert_eq!(mix_conv(&x, &ks, &[2, 4]).unwrap(), x);
    }

    #[test]
    fn mix_conv_rejects_mismatched_split() {
        let x = rand_tensor(Shape::new(1, 6, 4, 4), 9);
        let ks = [identity_depthwise(3, 3)];
        assert!(mix_conv(&x, &ks, &[3, 3]).is_err());
        assert!(mix_conv(&x, &ks, &[3]).is_err());
    }

    #[test]
    fn equal_split_is_contiguous_halves() {
        assert_eq!(equal_split(128, 2), vec![64, 64]);
        assert_eq!(equal_split(7, 2), vec![4, 3]);
    }

    #[test]
    fn spec_validation() {
        let mut s = BlockSpec::new(BlockKind::MixD);
        s.mix_split = Some(vec![64, 32]);
        assert!(s.validate().is_err());
        s.mix_split = Some(vec![64]);
        assert!(s.validate().is_err());
        s.mix_split = Some(vec![32, 96]);
        assert!(s.validate().is_ok());
        s.mix_kernels = vec![3, 4];
        assert!(s.validate().is_err());
    }
}
