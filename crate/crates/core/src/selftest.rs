//! Invariant suite exposed as `poseforge selftest`.

use std::fmt;

use rayon::prelude::*;

use crate::annotation::PoseAnnotation;
use crate::codec::{encode, to_grid, EncodeConfig, GroundTruthMaps, HEATMAP_CHANNELS};
use crate::decode::{decode_poses, extract_peaks, DecodeConfig, PersonInstance};
use crate::error::Result;
use crate::skeleton::{TreeVariant, CENTROID};
use crate::synth::{generate_scene, perturb_maps, Noise, SceneConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<24} {}", self.name, self.detail)
    }
}

fn check(name: &'static str, failures: Vec<String>, ok_detail: String) -> Check {
    match failures.first() {
        None => Check {
            name,
            passed: true,
            detail: ok_detail,
        },
        Some(first) => Check {
            name,
            passed: false,
            detail: format!("{} failure(s), first: {first}", failures.len()),
        },
    }
}

fn crowded(seed: u64) -> Result<PoseAnnotation> {
    generate_scene(&SceneConfig {
        persons: 8,
        width: 128,
        height: 128,
        min_separation: 0.0,
        seed,
        ..Default::default()
    })
}

fn heatmap_clamp(trials: u64) -> Result<Check> {
    let mut failures = Vec::new();
    let mut peak = 0.0f32;
    for seed in 0..trials {
        let mut ann = crowded(seed)?;
        // stack exact duplicates on top
        let dup = ann.persons.clone();
        ann.persons.extend(dup);
        let m = encode(&ann, &EncodeConfig::default())?;
        let max = m.heatmaps.data().iter().copied().fold(0.0, f32::max);
        peak = peak.max(max);
        if max > 1.0 || m.heatmaps.data().iter().any(|v| *v < 0.0) {
            failures.push(format!("seed {seed}: max {max}"));
        }
    }
    Ok(check(
        "heatmap-clamp",
        failures,
        format!("{trials} crowded scenes, max {peak}"),
    ))
}

fn offsets_outside_tau(trials: u64) -> Result<Check> {
    let mut failures = Vec::new();
    for tree in [TreeVariant::Flat, TreeVariant::Hierarchical] {
        for seed in 0..trials {
            let ann = crowded(seed)?;
            let cfg = EncodeConfig {
                tree,
                ..Default::default()
            };
            let m = encode(&ann, &cfg)?;
            let g = m.grid();
            let bound = (g.w as f64).hypot(g.h as f64) / m.meta.z;
            for j in 0..HEATMAP_CHANNELS {
                for y in 0..g.h {
                    for x in 0..g.w {
                        let (ox, oy) = (
                            m.offsets.at(0, 2 * j, y, x),
                            m.offsets.at(0, 2 * j + 1, y, x),
                        );
                        let inside = j != CENTROID
                            && ann.persons.iter().any(|p| {
                                let q = p.joints[j];
                                q.visible
                                    && (x as f64 - to_grid(q.x, cfg.stride))
                                        .hypot(y as f64 - to_grid(q.y, cfg.stride))
                                        <= cfg.tau
                            });
                        if !inside && (ox != 0.0 || oy != 0.0) {
                            failures.push(format!(
                                "{tree:?} seed {seed}: channel {j} cell ({x},{y}) = ({ox},{oy})"
                            ));
                        }
                        if f64::from(ox).hypot(f64::from(oy)) > bound + 1e-6 {
                            failures.push(format!("{tree:?} seed {seed}: |offset| above {bound}"));
                        }
                    }
                }
            }
        }
    }
    Ok(check(
        "offset-zero-outside-tau",
        failures,
        format!("{} encodings", 2 * trials),
    ))
}

fn unique_slots(persons: &[PersonInstance]) -> Option<String> {
    let mut seen = Vec::new();
    for (i, p) in persons.iter().enumerate() {
        for (j, c) in p.joints.iter().enumerate() {
            let Some(c) = c else { continue };
            if c.joint != j {
                return Some(format!("person {i} slot {j} holds joint {}", c.joint));
            }
            let key = (c.joint, c.x.to_bits(), c.y.to_bits());
            if seen.contains(&key) {
                return Some(format!(
                    "joint {} at ({}, {}) assigned twice",
                    c.joint, c.x, c.y
                ));
            }
            seen.push(key);
        }
    }
    None
}

fn noisy_maps(seed: u64, tree: TreeVariant) -> Result<GroundTruthMaps> {
    let m = encode(
        &crowded(seed)?,
        &EncodeConfig {
            tree,
            ..Default::default()
        },
    )?;
    perturb_maps(
        &m,
        &Noise {
            peak_sigma: 1.0,
            offset_rho: 1.0,
            offset_rel: 0.0,
        },
        seed,
    )
}

fn joint_uniqueness(trials: u64) -> Result<Check> {
    let mut failures = Vec::new();
    let mut decoded = 0usize;
    for tree in [TreeVariant::Flat, TreeVariant::Hierarchical] {
        for spawn_unassigned in [false, true] {
            for seed in 0..trials {
                let m = noisy_maps(seed, tree)?;
                let cfg = DecodeConfig {
                    tree,
                    spawn_unassigned,
                    ..Default::default()
                };
                let persons = decode_poses(&m.heatmaps, &m.offsets, &cfg)?;
                decoded += persons.len();
                if let Some(e) = unique_slots(&persons) {
                    failures.push(format!("{tree:?} seed {seed}: {e}"));
                }
            }
        }
    }
    Ok(check(
        "joint-uniqueness",
        failures,
        format!("{decoded} decoded persons"),
    ))
}

fn nms_determinism(trials: u64) -> Result<Check> {
    let maps: Vec<GroundTruthMaps> = (0..trials)
        .map(|s| noisy_maps(s, TreeVariant::Hierarchical))
        .collect::<Result<_>>()?;
    let run = |threads: usize| -> Result<Vec<_>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
        pool.install(|| {
            maps.par_iter()
                .map(|m| {
                    let peaks = extract_peaks(&m.heatmaps, 3, 0.1)?;
                    let cfg = DecodeConfig {
                        tree: TreeVariant::Hierarchical,
                        ..Default::default()
                    };
                    Ok((peaks, decode_poses(&m.heatmaps, &m.offsets, &cfg)?))
                })
                .collect()
        })
    };
    let one = run(1)?;
    let mut failures = Vec::new();
    for threads in [1, 2, 4] {
        if run(threads)? != one {
            failures.push(format!("{threads} threads differ from a single thread"));
        }
    }
    Ok(check(
        "nms-determinism",
        failures,
        format!("{trials} maps, 1/2/4 threads"),
    ))
}

fn translation_equivariance(trials: u64) -> Result<Check> {
    let mut failures = Vec::new();
    let (dx, dy) = (3usize, 2usize);
    for seed in 0..trials {
        let ann = generate_scene(&SceneConfig {
            persons: 2,
            seed,
            ..Default::default()
        })?;
        let cfg = EncodeConfig {
            tree: TreeVariant::Hierarchical,
            ..Default::default()
        };
        let mut shifted = ann.clone();
        let (px, py) = ((dx * cfg.stride) as f64, (dy * cfg.stride) as f64);
        for p in &mut shifted.persons {
            for j in &mut p.joints {
                j.x += px;
                j.y += py;
            }
        }
        let a = encode(&ann, &cfg)?;
        let b = encode(&shifted, &cfg)?;
        let g = a.grid();
        let mut worst = 0.0f32;
        for (ta, tb) in [(&a.heatmaps, &b.heatmaps), (&a.offsets, &b.offsets)] {
            for c in 0..ta.shape().c {
                for y in 0..g.h - dy {
                    for x in 0..g.w - dx {
                        worst = worst.max((ta.at(0, c, y, x) - tb.at(0, c, y + dy, x + dx)).abs());
                    }
                }
            }
        }
        if worst > 1e-5 {
            failures.push(format!("seed {seed}: max deviation {worst}"));
        }
    }
    Ok(check(
        "translation-equivariance",
        failures,
        format!("{trials} scenes shifted by ({dx},{dy}) cells"),
    ))
}

/// Runs every invariant check with `trials` seeded scenes each.
pub fn run(trials: u64) -> Result<Vec<Check>> {
    Ok(vec![
        heatmap_clamp(trials)?,
        offsets_outside_tau(trials)?,
        joint_uniqueness(trials)?,
        nms_determinism(trials)?,
        translation_equivariance(trials)?,
    ])
}
