use proptest::prelude::*;

use poseforge::annotation::{Joint, PersonAnnotation, PoseAnnotation};
use poseforge::codec::{
    encode, render_offsets_with_mask, to_grid, EncodeConfig, Grid, HEATMAP_CHANNELS,
};
use poseforge::decode::{predict_parent, Candidate};
use poseforge::skeleton::PoseTree;
use poseforge::{TreeVariant, CENTROID, NUM_JOINTS};

const W: u32 = 96;
const H: u32 = 80;

fn person_strategy(w: u32, h: u32) -> impl Strategy<Value = PersonAnnotation> {
    prop::collection::vec(
        (
            0.0..f64::from(w),
            0.0..f64::from(h),
            prop::bool::weighted(0.8),
        ),
        NUM_JOINTS,
    )
    .prop_map(|js| PersonAnnotation {
        joints: js
            .into_iter()
            .map(|(x, y, v)| Joint::new(x, y, v))
            .collect(),
        headbox: None,
    })
}

fn scene_strategy() -> impl Strategy<Value = PoseAnnotation> {
    prop::collection::vec(person_strategy(W, H), 1..4).prop_map(|persons| PoseAnnotation {
        id: "p".into(),
        width: W,
        height: H,
        persons,
    })
}

fn cfg(tree: TreeVariant) -> EncodeConfig {
    EncodeConfig {
        tree,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heatmaps_stay_in_unit_interval(ann in scene_strategy()) {
        let maps = encode(&ann, &cfg(TreeVariant::Flat)).unwrap();
        prop_assert!(maps.heatmaps.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn offsets_are_bounded_and_local(ann in scene_strategy(), hier in any::<bool>()) {
        let tree = if hier { TreeVariant::Hierarchical } else { TreeVariant::Flat };
        let maps = encode(&ann, &cfg(tree)).unwrap();
        let g = maps.grid();
        let z = g.z();
        let tau = maps.meta.tau;
        let diag = (g.w as f64).hypot(g.h as f64);
        let o = &maps.offsets;
        for j in 0..HEATMAP_CHANNELS {
            let joints: Vec<(f64, f64)> = ann
                .persons
                .iter()
                .filter_map(|p| p.joints.get(j).filter(|q| q.visible).map(|q| (to_grid(q.x, 4), to_grid(q.y, 4))))
                .collect();
            for y in 0..g.h {
                for x in 0..g.w {
                    let (ox, oy) = (f64::from(o.at(0, 2 * j, y, x)), f64::from(o.at(0, 2 * j + 1, y, x)));
                    let norm = ox.hypot(oy) * z;
                    if j == CENTROID {
                        prop_assert_eq!(norm, 0.0);
                        continue;
                    }
                    // the parent lies inside the grid's hull, which extends half a cell past the centers
                    prop_assert!(norm <= diag + 1e-3, "norm {} diag {}", norm, diag);
                    let near = joints.iter().any(|&(px, py)| (x as f64 - px).hypot(y as f64 - py) <= tau);
                    if !near {
                        prop_assert_eq!(norm, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn trees_agree_on_level_one(ann in scene_strategy()) {
        let flat = encode(&ann, &cfg(TreeVariant::Flat)).unwrap();
        let hier = encode(&ann, &cfg(TreeVariant::Hierarchical)).unwrap();
        prop_assert_eq!(&flat.heatmaps, &hier.heatmaps);
        for j in PoseTree::hierarchical().joints_at_level(1) {
            for c in [2 * j, 2 * j + 1] {
                prop_assert_eq!(flat.offsets.plane(0, c), hier.offsets.plane(0, c));
            }
        }
    }

    #[test]
    fn whole_cell_shifts_shift_the_maps(
        person in person_strategy(48, 40),
        dx in 0usize..8,
        dy in 0usize..8,
        hier in any::<bool>(),
    ) {
        let tree = if hier { TreeVariant::Hierarchical } else { TreeVariant::Flat };
        let base = PoseAnnotation { id: "a".into(), width: W, height: H, persons: vec![person.clone()] };
        let mut moved = base.clone();
        for j in &mut moved.persons[0].joints {
            j.x += 4.0 * dx as f64;
            j.y += 4.0 * dy as f64;
        }
        let a = encode(&base, &cfg(tree)).unwrap();
        let b = encode(&moved, &cfg(tree)).unwrap();
        let g = a.grid();
        for c in 0..HEATMAP_CHANNELS {
            for y in 0..g.h - dy {
                for x in 0..g.w - dx {
                    let d = (a.heatmaps.at(0, c, y, x) - b.heatmaps.at(0, c, y + dy, x + dx)).abs();
                    prop_assert!(d < 1e-5, "heatmap {} at ({}, {}): {}", c, x, y, d);
                }
            }
        }
        for c in 0..2 * HEATMAP_CHANNELS {
            for y in 0..g.h - dy {
                for x in 0..g.w - dx {
                    let d = (a.offsets.at(0, c, y, x) - b.offsets.at(0, c, y + dy, x + dx)).abs();
                    prop_assert!(d < 1e-5, "offset {} at ({}, {}): {}", c, x, y, d);
                }
            }
        }
    }

    #[test]
    fn stored_offsets_point_at_the_parent(person in person_strategy(W, H), hier in any::<bool>()) {
        let tree = PoseTree::new(if hier { TreeVariant::Hierarchical } else { TreeVariant::Flat });
        let ann = PoseAnnotation { id: "a".into(), width: W, height: H, persons: vec![person.clone()] };
        let grid = Grid::for_image(W, H, 4);
        let (offsets, mask) = render_offsets_with_mask(&ann, &tree, grid, 3.0, grid.z(), 4).unwrap();
        let Some((cx, cy)) = poseforge::codec::compute_centroid(&person) else { return Ok(()) };
        let pt = |x: f64, y: f64| (to_grid(x, 4), to_grid(y, 4));
        for j in 0..NUM_JOINTS {
            let joint = person.joints[j];
            if !joint.visible {
                continue;
            }
            let (jx, jy) = pt(joint.x, joint.y);
            let cell = (jx.round(), jy.round());
            if cell.0 < 0.0 || cell.1 < 0.0 || cell.0 >= grid.w as f64 || cell.1 >= grid.h as f64 {
                continue;
            }
            prop_assert_eq!(mask.at(0, 2 * j, cell.1 as usize, cell.0 as usize), 1.0);
            let mut a = tree.parent(j);
            while a != CENTROID && !person.joints[a].visible {
                a = tree.parent(a);
            }
            let expect = if a == CENTROID { pt(cx, cy) } else { pt(person.joints[a].x, person.joints[a].y) };
            let cand = Candidate { joint: j, x: cell.0, y: cell.1, score: 1.0 };
            let got = predict_parent(&cand, &offsets, grid.z());
            prop_assert!((got.0 - expect.0).abs() < 1e-4 && (got.1 - expect.1).abs() < 1e-4,
                "joint {} predicted {:?} expected {:?}", j, got, expect);
        }
    }
}

#[test]
fn encode_rejects_bad_parameters() {
    let ann = PoseAnnotation::empty("e", 32, 32);
    for c in [
        EncodeConfig {
            sigma: 0.0,
            ..Default::default()
        },
        EncodeConfig {
            tau: -1.0,
            ..Default::default()
        },
        EncodeConfig {
            stride: 0,
            ..Default::default()
        },
    ] {
        assert!(encode(&ann, &c).is_err());
    }
}

#[test]
fn person_without_visible_joints_is_skipped() {
    let hidden = PersonAnnotation {
        joints: vec![Joint::new(10.0, 10.0, false); NUM_JOINTS],
        headbox: None,
    };
    let ann = PoseAnnotation {
        id: "h".into(),
        width: 32,
        height: 32,
        persons: vec![hidden],
    };
    let maps = encode(&ann, &EncodeConfig::default()).unwrap();
    assert!(maps.heatmaps.data().iter().all(|&v| v == 0.0));
    assert!(maps.offsets.data().iter().all(|&v| v == 0.0));
}
