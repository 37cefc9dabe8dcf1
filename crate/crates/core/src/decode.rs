//! Peak extraction and centroid-rooted grouping.
//!
//! Candidates live in grid coordinates until [`decode_poses`] scales them
//! back to image pixels.

use crate::codec::{check_map_shapes, to_image, Grid, HEATMAP_CHANNELS};
use crate::error::{Error, Result};
use crate::hourglass::OUTPUT_STRIDE;
use crate::skeleton::{PoseTree, TreeVariant, CENTROID, NUM_JOINTS};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub joint: usize,
    pub x: f64,
    pub y: f64,
    pub score: f32,
}

impl Candidate {
    fn dist2(&self, p: (f64, f64)) -> f64 {
        (self.x - p.0).powi(2) + (self.y - p.1).powi(2)
    }
}

/// One decoded person. Each joint slot holds at most one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonInstance {
    pub centroid: Candidate,
    pub joints: [Option<Candidate>; NUM_JOINTS],
}

impl PersonInstance {
    fn new(centroid: Candidate) -> Self {
        Self {
            centroid,
            joints: [None; NUM_JOINTS],
        }
    }

    pub fn score(&self) -> f32 {
        self.centroid.score
    }

    /// Location of `joint`, or of the centroid when `joint == CENTROID`.
    pub fn point(&self, joint: usize) -> Option<(f64, f64)> {
        let c = if joint == CENTROID {
            Some(self.centroid)
        } else {
            self.joints[joint]
        };
        c.map(|c| (c.x, c.y))
    }

    pub fn joint_count(&self) -> usize {
        self.joints.iter().flatten().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub threshold: f32,
    pub window: usize,
    pub tree: TreeVariant,
    /// Shift peaks a quarter cell toward the higher neighbor on each axis.
    pub refine_peaks: bool,
    /// Start a new person for candidates with no free slot instead of dropping them.
    pub spawn_unassigned: bool,
    pub stride: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            window: 3,
            tree: TreeVariant::Flat,
            refine_peaks: false,
            spawn_unassigned: false,
            stride: OUTPUT_STRIDE,
        }
    }
}

/// Local maxima per channel of `heatmaps` `(1, C, H, W)`, each list sorted
/// by descending score (ties in scan order).
///
/// A cell is a peak when its value is at least `thresh`, no smaller than any
/// cell in the `window`×`window` neighborhood, and strictly greater than the
/// neighbors that precede it in scan order. A flat plateau therefore yields
/// only its first cell.
pub fn extract_peaks(heatmaps: &Tensor, window: usize, thresh: f32) -> Result<Vec<Vec<Candidate>>> {
    extract_peaks_refined(heatmaps, window, thresh, false)
}

pub fn extract_peaks_refined(
    heatmaps: &Tensor,
    window: usize,
    thresh: f32,
    refine: bool,
) -> Result<Vec<Vec<Candidate>>> {
    if window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "NMS window must be odd, got {window}"
        )));
    }
    if !(thresh > 0.0 && thresh < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0,1), got {thresh}"
        )));
    }
    let s = heatmaps.shape();
    if s.n != 1 {
        return Err(Error::Shape(format!("expected a single image, got {s}")));
    }
    let r = (window / 2) as isize;
    let (h, w) = (s.h as isize, s.w as isize);
    let mut out = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let plane = heatmaps.plane(0, c);
        let at = |y: isize, x: isize| plane[(y * w + x) as usize];
        let mut cands = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = at(y, x);
                if v < thresh {
                    continue;
                }
                let mut peak = true;
                'win: for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y + dy, x + dx);
                        if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h || nx >= w {
                            continue;
                        }
                        let n = at(ny, nx);
                        let earlier = (ny, nx) < (y, x);
                        if n > v || (earlier && n == v) {
                            peak = false;
                            break 'win;
                        }
                    }
                }
                if !peak {
                    continue;
                }
                let (mut fx, mut fy) = (x as f64, y as f64);
                if refine {
                    let get = |yy: isize, xx: isize| {
                        if yy < 0 || xx < 0 || yy >= h || xx >= w {
                            f32::NEG_INFINITY
                        } else {
                            at(yy, xx)
                        }
                    };
                    fx += quarter_step(get(y, x - 1), get(y, x + 1));
                    fy += quarter_step(get(y - 1, x), get(y + 1, x));
                }
                cands.push(Candidate {
                    joint: c,
                    x: fx,
                    y: fy,
                    score: v,
                });
            }
        }
        // stable: equal scores keep scan order
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.push(cands);
    }
    Ok(out)
}

fn quarter_step(lo: f32, hi: f32) -> f64 {
    if hi > lo {
        0.25
    } else if lo > hi {
        -0.25
    } else {
        0.0
    }
}

fn rounded_cell(x: f64, y: f64, grid: Grid) -> (usize, usize) {
    let cx = x.round().clamp(0.0, grid.w as f64 - 1.0) as usize;
    let cy = y.round().clamp(0.0, grid.h as f64 - 1.0) as usize;
    (cx, cy)
}

/// Reads the offset pair of `joint` at the cell nearest `(x, y)`.
fn follow(offsets: &Tensor, joint: usize, x: f64, y: f64, z: f64) -> (f64, f64) {
    let s = offsets.shape();
    let (cx, cy) = rounded_cell(x, y, Grid::new(s.w, s.h));
    let ox = f64::from(offsets.at(0, 2 * joint, cy, cx));
    let oy = f64::from(offsets.at(0, 2 * joint + 1, cy, cx));
    (x + z * ox, y + z * oy)
}

/// Parent location predicted from the candidate's own offset channel pair.
pub fn predict_parent(cand: &Candidate, offsets: &Tensor, z: f64) -> (f64, f64) {
    follow(offsets, cand.joint, cand.x, cand.y, z)
}

fn persons_from_centroids(centroids: &[Candidate]) -> Vec<PersonInstance> {
    centroids.iter().map(|&c| PersonInstance::new(c)).collect()
}

/// Index of the closest person with a free `joint` slot; ties go to the
/// lower index.
fn nearest_free(
    persons: &[PersonInstance],
    joint: usize,
    dist2: impl Fn(&PersonInstance) -> f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in persons.iter().enumerate() {
        if p.joints[joint].is_some() {
            continue;
        }
        let d = dist2(p);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

fn place(
    persons: &mut Vec<PersonInstance>,
    slot: Option<usize>,
    cand: Candidate,
    parent: (f64, f64),
    spawn: bool,
) {
    match slot {
        Some(i) => persons[i].joints[cand.joint] = Some(cand),
        None if spawn => {
            let mut p = PersonInstance::new(Candidate {
                joint: CENTROID,
                x: parent.0,
                y: parent.1,
                score: 0.0,
            });
            p.joints[cand.joint] = Some(cand);
            persons.push(p);
        }
        None => {}
    }
}

fn group_level_one(
    persons: &mut Vec<PersonInstance>,
    candidates: &[Vec<Candidate>],
    joints: &[usize],
    offsets: &Tensor,
    z: f64,
    spawn: bool,
) {
    for &j in joints {
        for cand in candidates.get(j).into_iter().flatten() {
            let target = predict_parent(cand, offsets, z);
            let slot = nearest_free(persons, j, |p| p.centroid.dist2(target));
            place(persons, slot, *cand, target, spawn);
        }
    }
}

/// Every joint category is matched against the centroids independently:
/// candidates in descending score go to the nearest centroid whose slot is
/// still empty, and are dropped when none is.
pub fn group_flat(
    candidates: &[Vec<Candidate>],
    centroids: &[Candidate],
    offsets: &Tensor,
    z: f64,
    spawn_unassigned: bool,
) -> Vec<PersonInstance> {
    let mut persons = persons_from_centroids(centroids);
    let joints: Vec<usize> = (0..NUM_JOINTS).collect();
    group_level_one(
        &mut persons,
        candidates,
        &joints,
        offsets,
        z,
        spawn_unassigned,
    );
    persons
}

/// Level-by-level grouping along `tree`.
///
/// Level-1 joints are allocated to centroids exactly as in [`group_flat`].
/// A deeper joint predicts its parent's location and is compared with each
/// person's parent joint. When a person has no parent joint, the prediction
/// is followed further up through the ancestors' offset channels until it
/// reaches an ancestor that person does hold, ending at the centroid.
pub fn group_hierarchical(
    candidates: &[Vec<Candidate>],
    centroids: &[Candidate],
    offsets: &Tensor,
    z: f64,
    tree: &PoseTree,
    spawn_unassigned: bool,
) -> Vec<PersonInstance> {
    let mut persons = persons_from_centroids(centroids);
    group_level_one(
        &mut persons,
        candidates,
        &tree.joints_at_level(1),
        offsets,
        z,
        spawn_unassigned,
    );
    for level in 2..=tree.max_level() {
        for j in tree.joints_at_level(level) {
            let ancestors = tree.ancestors(j);
            for cand in candidates.get(j).into_iter().flatten() {
                // traced[k] predicts the location of ancestors[k]
                let mut traced = Vec::with_capacity(ancestors.len());
                let mut pt = predict_parent(cand, offsets, z);
                traced.push(pt);
                for &a in &ancestors[..ancestors.len() - 1] {
                    pt = follow(offsets, a, pt.0, pt.1, z);
                    traced.push(pt);
                }
                let slot = nearest_free(&persons, j, |p| {
                    let (k, anchor) = ancestors
                        .iter()
                        .enumerate()
                        .find_map(|(k, &a)| p.point(a).map(|pt| (k, pt)))
                        .expect("centroid is always held");
                    let t = traced[k];
                    (t.0 - anchor.0).powi(2) + (t.1 - anchor.1).powi(2)
                });
                place(&mut persons, slot, *cand, traced[0], spawn_unassigned);
            }
        }
    }
    persons
}

/// Full decode of one image's maps. Output coordinates are image pixels.
pub fn decode_poses(
    heatmaps: &Tensor,
    offsets: &Tensor,
    cfg: &DecodeConfig,
) -> Result<Vec<PersonInstance>> {
    check_map_shapes(heatmaps, offsets)?;
    let s = heatmaps.shape();
    let z = Grid::new(s.w, s.h).z();
    let mut peaks = extract_peaks_refined(heatmaps, cfg.window, cfg.threshold, cfg.refine_peaks)?;
    debug_assert_eq!(peaks.len(), HEATMAP_CHANNELS);
    let centroids = std::mem::take(&mut peaks[CENTROID]);
    let mut persons = match cfg.tree {
        TreeVariant::Flat => group_flat(&peaks, &centroids, offsets, z, cfg.spawn_unassigned),
        TreeVariant::Hierarchical => group_hierarchical(
            &peaks,
            &centroids,
            offsets,
            z,
            &PoseTree::hierarchical(),
            cfg.spawn_unassigned,
        ),
    };
    for p in &mut persons {
        for c in std::iter::once(&mut p.centroid).chain(p.joints.iter_mut().flatten()) {
            c.x = to_image(c.x, cfg.stride);
            c.y = to_image(c.y, cfg.stride);
        }
    }
    Ok(persons)
}
