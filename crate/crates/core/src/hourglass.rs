//! Stacked hourglass networks built from any [`BlockKind`], with a heatmap
//! head and an offset head after every stage.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::blocks::{build_block, build_block_io, BlockKind, BlockSpec};
use crate::error::{shape_err, Error, Result};
use crate::graph::{execute, ConvSpec, FlopCounter, Init, Node, Op, WeightStore};
use crate::ops;
use crate::tensor::{Shape, Tensor};
use crate::{dshg, NUM_JOINTS};

/// Input-to-output spatial ratio of every network built here.
pub const OUTPUT_STRIDE: usize = 4;

/// Named network configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    /// Original bottleneck blocks at 256 channels.
    Orig,
    /// Two dense 3x3 convolutions at 128 channels.
    Basic,
    /// Depthwise-separable block with SE.
    Ds,
    /// Single separable unit per block.
    DsStar,
    /// Separable block without SE.
    DsNoSe,
    /// Mixed-kernel separable block.
    Mix,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Orig,
        Arch::Basic,
        Arch::Ds,
        Arch::DsStar,
        Arch::DsNoSe,
        Arch::Mix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Orig => "orig",
            Arch::Basic => "basic",
            Arch::Ds => "ds",
            Arch::DsStar => "ds-star",
            Arch::DsNoSe => "ds-nose",
            Arch::Mix => "mix",
        }
    }

    pub fn block_spec(self) -> BlockSpec {
        match self {
            Arch::Orig => BlockSpec::new(BlockKind::BottleneckA),
            Arch::Basic => BlockSpec::new(BlockKind::BasicB),
            Arch::Ds => BlockSpec::new(BlockKind::DsC),
            Arch::DsStar => BlockSpec {
                units: 1,
                ..BlockSpec::new(BlockKind::DsC)
            },
            Arch::DsNoSe => BlockSpec {
                use_se: false,
                ..BlockSpec::new(BlockKind::DsC)
            },
            Arch::Mix => BlockSpec::new(BlockKind::MixD),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPlan {
    pub stages: usize,
    /// Down/up-sampling pairs per hourglass module.
    pub levels: usize,
    pub block: BlockSpec,
    pub joints: usize,
    pub input_size: usize,
    /// Width of the 7x7 stem convolution.
    pub stem_channels: usize,
}

impl NetworkPlan {
    pub fn new(arch: Arch, stages: usize, input_size: usize) -> Self {
        Self {
            stages,
            levels: 4,
            block: arch.block_spec(),
            joints: NUM_JOINTS,
            input_size,
            stem_channels: 64,
        }
    }

    pub fn channels(&self) -> usize {
        self.block.channels
    }

    pub fn output_size(&self) -> usize {
        self.input_size / OUTPUT_STRIDE
    }

    /// Joints plus the centroid pseudo-joint.
    pub fn heatmap_channels(&self) -> usize {
        self.joints + 1
    }

    pub fn offset_channels(&self) -> usize {
        2 * (self.joints + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return shape_err("a network needs at least one stage");
        }
        if self.levels == 0 {
            return shape_err("an hourglass needs at least one level");
        }
        if !self.input_size.is_multiple_of(OUTPUT_STRIDE) {
            return shape_err(format!(
                "input size {} is not a multiple of the output stride {OUTPUT_STRIDE}",
                self.input_size
            ));
        }
        check_hourglass_size(self.output_size(), self.levels)?;
        self.block.validate()
    }
}

fn check_hourglass_size(size: usize, levels: usize) -> Result<()> {
    let step = 1usize << levels;
    if size == 0 || !size.is_multiple_of(step) {
        return shape_err(format!(
            "hourglass input size {size} is not divisible by 2^{levels} = {step}"
        ));
    }
    Ok(())
}

/// Hourglass module for a `size x size` input: at each level a skip block
/// in parallel with pool -> block -> (deeper level | bottom block) -> block
/// -> upsample, summed.
pub fn build_hourglass_module(name: &str, plan: &NetworkPlan, size: usize) -> Result<Node> {
    if plan.levels == 0 {
        return shape_err("an hourglass needs at least one level");
    }
    check_hourglass_size(size, plan.levels)?;
    hourglass_level(name, plan, 0)
}

fn hourglass_level(name: &str, plan: &NetworkPlan, depth: usize) -> Result<Node> {
    let block = |suffix: &str| build_block(&format!("{name}.{suffix}"), &plan.block);
    let inner = if depth + 1 == plan.levels {
        block("bottom")?
    } else {
        hourglass_level(&format!("{name}.inner"), plan, depth + 1)?
    };
    let body = Node::seq(
        format!("{name}.main"),
        vec![
            Node::new(format!("{name}.pool"), Op::MaxPool2),
            block("down")?,
            inner,
            block("up")?,
            Node::new(format!("{name}.upsample"), Op::UpNearest2),
        ],
    );
    Ok(Node::residual(name, body, Some(block("skip")?)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeGraph {
    pub feature_remap: Node,
    /// Maps the concatenated heatmaps and offsets back to the trunk width.
    pub prediction_remap: Node,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageGraph {
    pub hourglass: Node,
    pub feature: Node,
    pub heatmap_head: Node,
    pub offset_head: Node,
    /// Absent on the last stage.
    pub merge: Option<MergeGraph>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub stem: Node,
    pub stages: Vec<StageGraph>,
}

impl NetworkGraph {
    /// Every top-level node in execution order.
    pub fn nodes(&self) -> Vec<&Node> {
        let mut v = vec![&self.stem];
        for s in &self.stages {
            v.extend([&s.hourglass, &s.feature, &s.heatmap_head, &s.offset_head]);
            if let Some(m) = &s.merge {
                v.extend([&m.feature_remap, &m.prediction_remap]);
            }
        }
        v
    }
}

/// Stem (7x7/2 conv, block, max-pool, two blocks) followed by `plan.stages`
/// hourglass stages.
pub fn build_network_graph(plan: &NetworkPlan) -> Result<NetworkGraph> {
    plan.validate()?;
    let c = plan.channels();
    let sc = plan.stem_channels;
    let stem = Node::seq(
        "stem",
        vec![
            Node::conv(
                "stem.conv",
                ConvSpec {
                    c_in: 3,
                    c_out: sc,
                    k: 7,
                    stride: 2,
                    padding: 3,
                    groups: 1,
                    bias: true,
                },
            ),
            Node::new("stem.bn", Op::BatchNorm { channels: sc }),
            Node::new("stem.relu", Op::Relu),
            build_block_io("stem.block1", &plan.block, sc, sc)?,
            Node::new("stem.pool", Op::MaxPool2),
            build_block_io("stem.block2", &plan.block, sc, 128)?,
            build_block_io("stem.block3", &plan.block, 128, c)?,
        ],
    );
    let preds = plan.heatmap_channels() + plan.offset_channels();
    let stages = (0..plan.stages)
        .map(|s| {
            let p = format!("stage{s}");
            Ok(StageGraph {
                hourglass: build_hourglass_module(&format!("{p}.hg"), plan, plan.output_size())?,
                feature: build_block(&format!("{p}.feature"), &plan.block)?,
                heatmap_head: Node::conv(
                    format!("{p}.heatmap"),
                    ConvSpec::pointwise(c, plan.heatmap_channels(), true),
                ),
                offset_head: Node::conv(
                    format!("{p}.offset"),
                    ConvSpec::pointwise(c, plan.offset_channels(), true),
                ),
                merge: (s + 1 < plan.stages).then(|| MergeGraph {
                    feature_remap: Node::conv(
                        format!("{p}.remap_feature"),
                        ConvSpec::pointwise(c, c, true),
                    ),
                    prediction_remap: Node::conv(
                        format!("{p}.remap_pred"),
                        ConvSpec::pointwise(preds, c, true),
                    ),
                }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkGraph { stem, stages })
}

/// Heatmaps `(n, J+1, H', W')` and offsets `(n, 2(J+1), H', W')` of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub heatmaps: Tensor,
    pub offsets: Tensor,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub plan: NetworkPlan,
    pub graph: NetworkGraph,
    pub weights: WeightStore,
}

impl Network {
    pub fn build(plan: NetworkPlan, init: Init) -> Result<Self> {
        let graph = build_network_graph(&plan)?;
        let mut weights = WeightStore::new();
        for node in graph.nodes() {
            weights.init_for(node, init);
        }
        Ok(Self {
            plan,
            graph,
            weights,
        })
    }

    /// Uses `weights` as-is after checking every tensor the graph needs is
    /// present with the right shape.
    pub fn with_weights(plan: NetworkPlan, weights: WeightStore) -> Result<Self> {
        let graph = build_network_graph(&plan)?;
        for node in graph.nodes() {
            let mut missing = Ok(());
            node.visit(&mut |n| {
                for (name, shape) in n.param_shapes().into_iter().chain(n.buffer_shapes()) {
                    if missing.is_err() {
                        return;
                    }
                    match weights.get(&name) {
                        Ok(t) if t.shape() == shape => {}
                        Ok(t) => {
                            missing = shape_err(format!(
                                "`{name}` has shape {} but the plan needs {shape}",
                                t.shape()
                            ))
                        }
                        Err(e) => missing = Err(e),
                    }
                }
            });
            missing?;
        }
        Ok(Self {
            plan,
            graph,
            weights,
        })
    }

    pub fn load(plan: NetworkPlan, path: impl AsRef<Path>) -> Result<Self> {
        let mut store = WeightStore::new();
        for (name, t) in dshg::read_file(path)? {
            store.insert(name, t);
        }
        Self::with_weights(plan, store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let entries: Vec<(String, Tensor)> = self
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        dshg::write_file(path, &entries)
    }

    pub fn param_count(&self) -> u64 {
        self.weights.param_count()
    }

    pub fn forward(&self, image: &Tensor) -> Result<Vec<StageOutput>> {
        self.forward_counted(image, &mut FlopCounter::default())
    }

    /// Forward pass that also tallies the work performed.
    pub fn forward_counted(
        &self,
        image: &Tensor,
        counter: &mut FlopCounter,
    ) -> Result<Vec<StageOutput>> {
        let s = image.shape();
        let size = self.plan.input_size;
        if s.c != 3 || s.h != size || s.w != size || s.n == 0 {
            return shape_err(format!(
                "expected an image of shape (n, 3, {size}, {size}), got {s}"
            ));
        }
        let w = &self.weights;
        let mut x = execute(&self.graph.stem, image, w, counter)?;
        let mut outputs = Vec::with_capacity(self.graph.stages.len());
        for stage in &self.graph.stages {
            let y = execute(&stage.hourglass, &x, w, counter)?;
            let f = execute(&stage.feature, &y, w, counter)?;
            let heatmaps = execute(&stage.heatmap_head, &f, w, counter)?;
            let offsets = execute(&stage.offset_head, &f, w, counter)?;
            if let Some(m) = &stage.merge {
                let rf = execute(&m.feature_remap, &f, w, counter)?;
                let preds = Tensor::concat_channels(&[&heatmaps, &offsets])?;
                let rp = execute(&m.prediction_remap, &preds, w, counter)?;
                x = ops::add(&ops::add(&x, &rf)?, &rp)?;
                counter.elementwise += 2 * x.len() as u64;
            }
            outputs.push(StageOutput { heatmaps, offsets });
        }
        Ok(outputs)
    }
}

/// Shape after the stem for a `(1, 3, size, size)` input.
pub fn trunk_shape(plan: &NetworkPlan) -> Shape {
    let o = plan.output_size();
    Shape::new(1, plan.channels(), o, o)
}
