//! Analytic parameter and FLOP accounting over layer graphs.
//!
//! FLOP convention: one multiply–accumulate counts as **one** FLOP, so a
//! standard convolution costs `h'·w'·c_in·c_out·k²` and a depthwise-separable
//! one `h'·w'·c_in·(k² + c_out)`. Counts quoted elsewhere as "2 FLOPs per
//! MAC" are exactly twice these. Normalisation, activations, pooling,
//! resampling, additions and SE gating add one FLOP per element touched;
//! [`CostOptions::include_elementwise`] turns that part off.

use std::fmt::{self, Write as _};

use crate::error::{shape_err, Result};
use crate::graph::{Node, Op};
use crate::hourglass::{build_network_graph, trunk_shape, NetworkPlan};
use crate::ops::conv_output_hw;
use crate::tensor::Shape;

/// Exact integer cost of a layer or subgraph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

impl LayerCost {
    pub fn flops(&self, opts: CostOptions) -> u64 {
        if opts.include_elementwise {
            self.macs + self.elementwise
        } else {
            self.macs
        }
    }
}

impl std::ops::Add for LayerCost {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            params: self.params + o.params,
            macs: self.macs + o.macs,
            elementwise: self.elementwise + o.elementwise,
        }
    }
}

impl std::ops::AddAssign for LayerCost {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for LayerCost {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostOptions {
    pub include_elementwise: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            include_elementwise: true,
        }
    }
}

fn elems(s: Shape) -> u64 {
    s.numel() as u64
}

fn expect_channels(node: &Node, input: Shape, c: usize) -> Result<()> {
    if input.c != c {
        return shape_err(format!(
            "`{}` expects {c} channels but receives {input}",
            node.name
        ));
    }
    Ok(())
}

/// Cost of `node` applied to an input of shape `input`, and its output shape.
pub fn layer_cost(node: &Node, input: Shape) -> Result<(LayerCost, Shape)> {
    let hw = |s: Shape| (s.n * s.h * s.w) as u64;
    Ok(match &node.op {
        Op::Conv(spec) => {
            expect_channels(node, input, spec.c_in)?;
            if spec.groups == 0 || spec.c_in % spec.groups != 0 || spec.c_out % spec.groups != 0 {
                return shape_err(format!("`{}`: channels not divisible by groups", node.name));
            }
            let (h, w) = conv_output_hw(input.h, input.w, spec.k, spec.stride, spec.padding)?;
            let out = Shape::new(input.n, spec.c_out, h, w);
            let taps = ((spec.c_in / spec.groups) * spec.k * spec.k) as u64;
            let weights = spec.c_out as u64 * taps;
            let cost = LayerCost {
                params: weights + if spec.bias { spec.c_out as u64 } else { 0 },
                macs: hw(out) * weights,
                elementwise: 0,
            };
            (cost, out)
        }
        Op::BatchNorm { channels } => {
            expect_channels(node, input, *channels)?;
            let cost = LayerCost {
                params: 2 * *channels as u64,
                macs: 0,
                elementwise: elems(input),
            };
            (cost, input)
        }
        Op::Relu | Op::Sigmoid => (
            LayerCost {
                elementwise: elems(input),
                ..LayerCost::default()
            },
            input,
        ),
        Op::MaxPool2 => {
            if !input.h.is_multiple_of(2) || !input.w.is_multiple_of(2) {
                return shape_err(format!("`{}`: max-pool of odd size {input}", node.name));
            }
            let out = Shape::new(input.n, input.c, input.h / 2, input.w / 2);
            (
                LayerCost {
                    elementwise: elems(out),
                    ..LayerCost::default()
                },
                out,
            )
        }
        Op::UpNearest2 => {
            let out = Shape::new(input.n, input.c, input.h * 2, input.w * 2);
            (
                LayerCost {
                    elementwise: elems(out),
                    ..LayerCost::default()
                },
                out,
            )
        }
        Op::Seq(nodes) => {
            let mut total = LayerCost::default();
            let mut shape = input;
            for n in nodes {
                let (c, s) = layer_cost(n, shape)?;
                total += c;
                shape = s;
            }
            (total, shape)
        }
        Op::Residual { body, shortcut } => {
            let (mut total, out) = layer_cost(body, input)?;
            let skip_shape = match shortcut {
                Some(s) => {
                    let (c, sh) = layer_cost(s, input)?;
                    total += c;
                    sh
                }
                None => input,
            };
            if skip_shape != out {
                return shape_err(format!(
                    "`{}`: residual branches disagree ({out} vs {skip_shape})",
                    node.name
                ));
            }
            total.elementwise += elems(out);
            (total, out)
        }
        Op::SqueezeExcite { channels, reduced } => {
            expect_channels(node, input, *channels)?;
            let (c, r, n) = (*channels as u64, *reduced as u64, input.n as u64);
            let cost = LayerCost {
                params: c * r + r + r * c + c,
                macs: n * 2 * c * r,
                elementwise: 2 * elems(input) + n * (r + c),
            };
            (cost, input)
        }
        Op::MixDepthwise { groups } => {
            let total: usize = groups.iter().map(|g| g.channels).sum();
            expect_channels(node, input, total)?;
            if let Some(g) = groups.iter().find(|g| g.k % 2 == 0) {
                return shape_err(format!("`{}`: even kernel {}", node.name, g.k));
            }
            let params: u64 = groups.iter().map(|g| (g.channels * g.k * g.k) as u64).sum();
            (
                LayerCost {
                    params,
                    macs: hw(input) * params,
                    elementwise: 0,
                },
                input,
            )
        }
    })
}

/// Leaf-level trace: `(name, output shape)` of every non-container node in
/// execution order.
pub fn trace_shapes(node: &Node, input: Shape) -> Result<(Vec<(String, Shape)>, Shape)> {
    let mut out = Vec::new();
    let shape = trace_into(node, input, &mut out)?;
    Ok((out, shape))
}

fn trace_into(node: &Node, input: Shape, out: &mut Vec<(String, Shape)>) -> Result<Shape> {
    match &node.op {
        Op::Seq(nodes) => {
            let mut s = input;
            for n in nodes {
                s = trace_into(n, s, out)?;
            }
            Ok(s)
        }
        Op::Residual { body, shortcut } => {
            let s = trace_into(body, input, out)?;
            if let Some(sc) = shortcut {
                trace_into(sc, input, out)?;
            }
            Ok(s)
        }
        _ => {
            let (_, s) = layer_cost(node, input)?;
            out.push((node.name.clone(), s));
            Ok(s)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn from_rows(rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_flops = rows.iter().map(|r| r.flops).sum();
        Self {
            rows,
            total_params,
            total_flops,
        }
    }

    /// Parameters in millions, one decimal (`4.6M`).
    pub fn params_display(&self) -> String {
        format!("{:.1}M", self.total_params as f64 / 1e6)
    }

    /// FLOPs in billions, one decimal (`5.1G`).
    pub fn flops_display(&self) -> String {
        format!("{:.1}G", self.total_flops as f64 / 1e9)
    }

    /// `layer,params,flops` rows with the totals last.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.params, r.flops);
        }
        let _ = writeln!(s, "total,{},{}", self.total_params, self.total_flops);
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["layer".len(), "total".len()])
            .max()
            .unwrap_or(5);
        writeln!(f, "{:<width$}  {:>12}  {:>16}", "layer", "params", "flops")?;
        writeln!(f, "{}", "-".repeat(width + 32))?;
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>12}  {:>16}", r.name, r.params, r.flops)?;
        }
        writeln!(f, "{}", "-".repeat(width + 32))?;
        writeln!(
            f,
            "{:<width$}  {:>12}  {:>16}",
            "total", self.total_params, self.total_flops
        )?;
        write!(
            f,
            "{:<width$}  {:>12}  {:>16}",
            "",
            self.params_display(),
            self.flops_display()
        )
    }
}

/// Cost of the whole network described by `plan` for one input image.
pub fn network_cost(plan: &NetworkPlan, opts: CostOptions) -> Result<CostReport> {
    let graph = build_network_graph(plan)?;
    let mut rows = Vec::new();
    let mut push = |name: String, c: LayerCost| {
        rows.push(CostRow {
            name,
            params: c.params,
            flops: c.flops(opts),
        })
    };
    let image = Shape::new(1, 3, plan.input_size, plan.input_size);
    let (stem, trunk) = layer_cost(&graph.stem, image)?;
    if trunk != trunk_shape(plan) {
        return shape_err(format!(
            "stem produces {trunk}, expected {}",
            trunk_shape(plan)
        ));
    }
    push("stem".into(), stem);
    for (i, stage) in graph.stages.iter().enumerate() {
        let (hg, y) = layer_cost(&stage.hourglass, trunk)?;
        push(format!("stage{i}.hourglass"), hg);
        let (feat, f) = layer_cost(&stage.feature, y)?;
        push(format!("stage{i}.feature"), feat);
        let (hm, hm_shape) = layer_cost(&stage.heatmap_head, f)?;
        let (off, off_shape) = layer_cost(&stage.offset_head, f)?;
        push(format!("stage{i}.heads"), hm + off);
        if let Some(m) = &stage.merge {
            let (rf, _) = layer_cost(&m.feature_remap, f)?;
            let preds = Shape::new(f.n, hm_shape.c + off_shape.c, f.h, f.w);
            let (rp, _) = layer_cost(&m.prediction_remap, preds)?;
            let adds = LayerCost {
                elementwise: 2 * elems(trunk),
                ..LayerCost::default()
            };
            push(format!("stage{i}.merge"), rf + rp + adds);
        }
    }
    Ok(CostReport::from_rows(rows))
}

/// Cost of a one-off layer description such as `dsconv:128:128:3` at
/// `(c, h, w)`.
pub fn describe_layer_cost(desc: &str, c: usize, h: usize, w: usize) -> Result<LayerCost> {
    let node: Node = desc.parse()?;
    Ok(layer_cost(&node, Shape::new(1, c, h, w))?.0)
}
