use poseforge::blocks::{build_block, BlockKind, BlockSpec};
use poseforge::cost::{describe_layer_cost, layer_cost, network_cost, CostOptions, LayerCost};
use poseforge::graph::{Init, Node, Op, WeightStore};
use poseforge::hourglass::{Arch, Network, NetworkPlan};
use poseforge::{Error, Shape};

const MACS: CostOptions = CostOptions {
    include_elementwise: false,
};

#[test]
fn standard_and_separable_conv_golden() {
    let std = describe_layer_cost("conv:128:128:3", 128, 64, 64).unwrap();
    assert_eq!((std.params, std.flops(MACS)), (147_456, 603_979_776));
    let ds = describe_layer_cost("dsconv:128:128:3", 128, 64, 64).unwrap();
    assert_eq!((ds.params, ds.flops(MACS)), (17_536, 71_827_456));
}

#[test]
fn separable_ratio_formula() {
    for k in [3u64, 5] {
        for c2 in [64u64, 128, 256] {
            let std = describe_layer_cost(&format!("conv:64:{c2}:{k}"), 64, 16, 16).unwrap();
            let ds = describe_layer_cost(&format!("dsconv:64:{c2}:{k}"), 64, 16, 16).unwrap();
            // ds / std == (k^2 + c2) / (k^2 c2)
            assert_eq!(
                ds.params * k * k * c2,
                std.params * (k * k + c2),
                "params k={k} c2={c2}"
            );
            assert_eq!(
                ds.flops(MACS) * k * k * c2,
                std.flops(MACS) * (k * k + c2),
                "flops k={k} c2={c2}"
            );
        }
    }
}

#[test]
fn se_and_mixed_depthwise_params() {
    assert_eq!(
        describe_layer_cost("se:128:16", 128, 8, 8).unwrap().params,
        2184
    );
    assert_eq!(
        describe_layer_cost("mixdw:64x3,64x5", 128, 8, 8)
            .unwrap()
            .params,
        2176
    );
}

#[test]
fn elementwise_ops_count_output_elements() {
    for desc in ["bn:8", "relu", "sigmoid"] {
        let c = describe_layer_cost(desc, 8, 4, 4).unwrap();
        assert_eq!(c.elementwise, 8 * 16, "{desc}");
        assert_eq!(c.flops(MACS), 0);
    }
    assert_eq!(
        describe_layer_cost("maxpool2", 8, 4, 4)
            .unwrap()
            .elementwise,
        8 * 4
    );
    assert_eq!(
        describe_layer_cost("upnearest2", 8, 4, 4)
            .unwrap()
            .elementwise,
        8 * 64
    );
    assert_eq!(describe_layer_cost("bn:8", 8, 4, 4).unwrap().params, 16);
}

#[test]
fn unknown_layer_kind_rejected() {
    assert!(matches!(
        describe_layer_cost("lstm:4", 4, 4, 4),
        Err(Error::UnknownLayer(_))
    ));
}

#[test]
fn sequence_cost_is_sum_of_parts() {
    let parts: Vec<Node> = [
        "conv:8:16:3",
        "bn:16",
        "relu",
        "dwconv:16:5",
        "maxpool2",
        "se:16:4",
    ]
    .iter()
    .map(|d| d.parse().unwrap())
    .collect();
    let mut shape = Shape::new(1, 8, 16, 16);
    let mut sum = LayerCost::default();
    for p in &parts {
        let (c, s) = layer_cost(p, shape).unwrap();
        sum += c;
        shape = s;
    }
    let mut reversed_sum = LayerCost::default();
    let mut shapes = vec![Shape::new(1, 8, 16, 16)];
    for p in &parts {
        shapes.push(layer_cost(p, *shapes.last().unwrap()).unwrap().1);
    }
    for (i, p) in parts.iter().enumerate().rev() {
        reversed_sum += layer_cost(p, shapes[i]).unwrap().0;
    }
    let seq = Node::new("s", Op::Seq(parts));
    let (total, out) = layer_cost(&seq, Shape::new(1, 8, 16, 16)).unwrap();
    assert_eq!(total, sum);
    assert_eq!(total, reversed_sum);
    assert_eq!(out, shape);
}

fn block_variants() -> Vec<BlockSpec> {
    let mut v = vec![
        BlockSpec::new(BlockKind::BottleneckA),
        BlockSpec::new(BlockKind::BasicB),
        BlockSpec::new(BlockKind::DsC),
        BlockSpec::new(BlockKind::MixD),
    ];
    for arch in Arch::ALL {
        v.push(arch.block_spec());
    }
    v.push(BlockSpec {
        inner_skip: false,
        ..BlockSpec::new(BlockKind::MixD)
    });
    v.push(BlockSpec {
        mix_kernels: vec![3, 5, 7],
        ..BlockSpec::new(BlockKind::MixD)
    });
    v
}

#[test]
fn block_params_match_stored_scalars() {
    for spec in block_variants() {
        let node = build_block("b", &spec).unwrap();
        let store = WeightStore::for_graph(&node, Init::Zeros);
        let shape = Shape::new(1, spec.channels, 16, 16);
        let (cost, out) = layer_cost(&node, shape).unwrap();
        assert_eq!(cost.params, store.param_count(), "{spec:?}");
        assert_eq!(out, shape, "{spec:?}");
    }
}

#[test]
fn network_params_match_stored_scalars() {
    for arch in Arch::ALL {
        let plan = NetworkPlan::new(arch, 2, 64);
        let net = Network::build(plan.clone(), Init::Zeros).unwrap();
        let report = network_cost(&plan, CostOptions::default()).unwrap();
        assert_eq!(net.param_count(), report.total_params, "{arch}");
    }
}

#[test]
fn report_totals_are_column_sums() {
    let r = network_cost(&NetworkPlan::new(Arch::Mix, 3, 128), CostOptions::default()).unwrap();
    assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
    assert_eq!(r.total_flops, r.rows.iter().map(|x| x.flops).sum::<u64>());
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,params,flops");
    assert_eq!(
        *lines.last().unwrap(),
        format!("total,{},{}", r.total_params, r.total_flops)
    );
    assert_eq!(lines.len(), r.rows.len() + 2);
    let table = r.to_string();
    assert!(table.contains(&r.params_display()) && table.contains(&r.flops_display()));
}

#[test]
fn stage_count_is_affine() {
    for arch in [Arch::Ds, Arch::Mix, Arch::Orig] {
        let cost =
            |s| network_cost(&NetworkPlan::new(arch, s, 256), CostOptions::default()).unwrap();
        let (c1, c2) = (cost(1), cost(2));
        for s in [4u64, 8] {
            let cs = cost(s as usize);
            assert_eq!(
                cs.total_params - c1.total_params,
                (s - 1) * (c2.total_params - c1.total_params)
            );
            assert_eq!(
                cs.total_flops - c1.total_flops,
                (s - 1) * (c2.total_flops - c1.total_flops)
            );
        }
    }
}

#[test]
fn single_stage_is_about_an_eighth() {
    let one = network_cost(&NetworkPlan::new(Arch::Ds, 1, 256), CostOptions::default()).unwrap();
    let eight = network_cost(&NetworkPlan::new(Arch::Ds, 8, 256), CostOptions::default()).unwrap();
    let r = one.total_params as f64 / (eight.total_params as f64 / 8.0);
    // the stem is amortized over eight stages in the larger network
    assert!((1.0..1.25).contains(&r), "ratio {r}");
}

#[test]
fn elementwise_flag_only_removes_elementwise_work() {
    let plan = NetworkPlan::new(Arch::Ds, 8, 256);
    let all = network_cost(&plan, CostOptions::default()).unwrap();
    let macs = network_cost(&plan, MACS).unwrap();
    assert_eq!(all.total_params, macs.total_params);
    let share = 1.0 - macs.total_flops as f64 / all.total_flops as f64;
    assert!(share > 0.0 && share < 0.1, "elementwise share {share}");
}

#[test]
fn ablation_ordering() {
    let p = |a| network_cost(&NetworkPlan::new(a, 8, 256), CostOptions::default()).unwrap();
    let (ds, mix, orig, star, nose) = (
        p(Arch::Ds),
        p(Arch::Mix),
        p(Arch::Orig),
        p(Arch::DsStar),
        p(Arch::DsNoSe),
    );
    assert!(ds.total_params < mix.total_params && 4 * mix.total_params < orig.total_params);
    assert!(star.total_params < nose.total_params && nose.total_params < ds.total_params);
    assert!(star.total_flops < ds.total_flops && nose.total_flops < ds.total_flops);
}
