//! PCKh / PCK scoring with greedy multi-person matching.
//!
//! This is a per-person stand-in for the official MPII multi-person protocol:
//! predictions are matched one-to-one to ground-truth persons, unmatched
//! ground-truth persons score zero, and accuracy is averaged per joint.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::annotation::{AnnotationFile, PersonAnnotation, PoseAnnotation, PoseFile};
use crate::codec::compute_centroid;
use crate::decode::PersonInstance;
use crate::error::{Error, Result};
use crate::skeleton::{JOINT_NAMES, L_HIP, NUM_JOINTS, R_SHOULDER};

/// MPII head size as a fraction of the head box diagonal.
pub const HEAD_SIZE_FACTOR: f64 = 0.6;

pub type PredJoints = [Option<(f64, f64)>; NUM_JOINTS];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    /// Threshold `alpha * 0.6 * headbox diagonal`.
    Pckh { alpha: f64 },
    /// Threshold `alpha * |r_shoulder - l_hip|`.
    Pck { alpha: f64 },
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Pckh { alpha: 0.5 }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad =
            || Error::InvalidArgument(format!("unknown metric `{s}` (expected pckh@A or pck@A)"));
        let (kind, alpha) = s.split_once('@').ok_or_else(bad)?;
        let alpha: f64 = alpha.parse().map_err(|_| bad())?;
        if !(alpha > 0.0) {
            return Err(bad());
        }
        match kind {
            "pckh" => Ok(Metric::Pckh { alpha }),
            "pck" => Ok(Metric::Pck { alpha }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Pckh { alpha } => write!(f, "pckh@{alpha}"),
            Metric::Pck { alpha } => write!(f, "pck@{alpha}"),
        }
    }
}

impl Metric {
    /// Correctness radius for `gt`, or `None` when it cannot be scored.
    pub fn threshold(&self, gt: &PersonAnnotation) -> Option<f64> {
        match *self {
            Metric::Pckh { alpha } => gt.headbox.map(|b| alpha * HEAD_SIZE_FACTOR * b.diagonal()),
            Metric::Pck { alpha } => {
                let (a, b) = (gt.joints.get(R_SHOULDER)?, gt.joints.get(L_HIP)?);
                (a.visible && b.visible).then(|| alpha * (a.x - b.x).hypot(a.y - b.y))
            }
        }
    }
}

/// Per-joint correctness: `None` for joints not visible in `gt`, a missing
/// prediction counts as incorrect. `None` overall if `gt` has no threshold.
pub fn score_person(
    pred: &PredJoints,
    gt: &PersonAnnotation,
    metric: Metric,
) -> Option<[Option<bool>; NUM_JOINTS]> {
    let thr = metric.threshold(gt)?;
    let mut out = [None; NUM_JOINTS];
    for (j, slot) in out.iter_mut().enumerate() {
        let g = gt.joints[j];
        if !g.visible {
            continue;
        }
        *slot = Some(pred[j].is_some_and(|(x, y)| (x - g.x).hypot(y - g.y) <= thr));
    }
    Some(out)
}

/// PCKh for one matched pair.
pub fn pckh_single(
    pred: &PredJoints,
    gt: &PersonAnnotation,
    alpha: f64,
) -> Option<[Option<bool>; NUM_JOINTS]> {
    score_person(pred, gt, Metric::Pckh { alpha })
}

fn mean_distance(pred: &PredJoints, gt: &PersonAnnotation) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (j, g) in gt.joints.iter().enumerate().take(NUM_JOINTS) {
        if let (true, Some((x, y))) = (g.visible, pred[j]) {
            sum += (x - g.x).hypot(y - g.y);
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / f64::from(n)
    }
}

/// Greedy one-to-one matching. Pairs are taken by descending count of
/// correct joints, then ascending mean joint distance, then index order.
/// Returns the matched prediction index for each ground-truth person.
pub fn match_persons(
    preds: &[PredJoints],
    gts: &[PersonAnnotation],
    metric: Metric,
) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        for (p, pred) in preds.iter().enumerate() {
            let correct = score_person(pred, gt, metric)
                .map(|s| s.iter().filter(|v| **v == Some(true)).count())
                .unwrap_or(0);
            pairs.push((correct, mean_distance(pred, gt), g, p));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut gt_match = vec![None; gts.len()];
    let mut pred_used = vec![false; preds.len()];
    for (_, _, g, p) in pairs {
        if gt_match[g].is_none() && !pred_used[p] {
            gt_match[g] = Some(p);
            pred_used[p] = true;
        }
    }
    gt_match
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: Metric,
    /// Accuracy per joint; `None` when no ground truth of that joint was scored.
    pub per_joint: [Option<f64>; NUM_JOINTS],
    /// Unweighted mean over joints with a defined accuracy (0 if none).
    pub mean: f64,
    pub matched: usize,
    pub unmatched_gt: usize,
    pub unmatched_pred: usize,
    /// Ground-truth persons skipped for lacking a normalizer.
    pub excluded: usize,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("joint,accuracy\n");
        for (j, acc) in self.per_joint.iter().enumerate() {
            match acc {
                Some(a) => s.push_str(&format!("{},{a:.6}\n", JOINT_NAMES[j])),
                None => s.push_str(&format!("{},\n", JOINT_NAMES[j])),
            }
        }
        s.push_str(&format!("mean,{:.6}\n", self.mean));
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8}", "joint", self.metric.to_string())?;
        for (j, acc) in self.per_joint.iter().enumerate() {
            match acc {
                Some(a) => writeln!(f, "{:<12} {:>8.2}", JOINT_NAMES[j], 100.0 * a)?,
                None => writeln!(f, "{:<12} {:>8}", JOINT_NAMES[j], "-")?,
            }
        }
        writeln!(f, "{:<12} {:>8.2}", "mean", 100.0 * self.mean)?;
        write!(
            f,
            "matched {}  unmatched gt {}  unmatched pred {}  excluded {}",
            self.matched, self.unmatched_gt, self.unmatched_pred, self.excluded
        )
    }
}

fn pred_joints(p: &crate::annotation::PosePerson) -> PredJoints {
    let mut out = [None; NUM_JOINTS];
    for (j, v) in p.joints.iter().enumerate().take(NUM_JOINTS) {
        out[j] = v.map(|v| (v[0], v[1]));
    }
    out
}

/// Scores every ground-truth image against the prediction with the same id.
/// Images absent from `pred` count as having no detections.
pub fn evaluate(pred: &PoseFile, gt: &AnnotationFile, metric: Metric) -> MetricReport {
    let by_id: HashMap<&str, &crate::annotation::ImagePoses> =
        pred.images.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut hits = [0usize; NUM_JOINTS];
    let mut totals = [0usize; NUM_JOINTS];
    let (mut matched, mut unmatched_gt, mut unmatched_pred, mut excluded) = (0, 0, 0, 0);
    for image in &gt.images {
        let preds: Vec<PredJoints> = by_id
            .get(image.id.as_str())
            .map(|i| i.persons.iter().map(pred_joints).collect())
            .unwrap_or_default();
        let scorable: Vec<&PersonAnnotation> = image
            .persons
            .iter()
            .filter(|p| metric.threshold(p).is_some())
            .collect();
        excluded += image.persons.len() - scorable.len();
        let owned: Vec<PersonAnnotation> = scorable.iter().map(|p| (*p).clone()).collect();
        let matching = match_persons(&preds, &owned, metric);
        unmatched_pred += preds.len() - matching.iter().flatten().count();
        for (gt_person, m) in owned.iter().zip(&matching) {
            let none = [None; NUM_JOINTS];
            let p = match m {
                Some(i) => {
                    matched += 1;
                    &preds[*i]
                }
                None => {
                    unmatched_gt += 1;
                    &none
                }
            };
            let scores = score_person(p, gt_person, metric).expect("filtered to scorable");
            for (j, s) in scores.iter().enumerate() {
                if let Some(ok) = s {
                    totals[j] += 1;
                    hits[j] += usize::from(*ok);
                }
            }
        }
    }
    let mut per_joint = [None; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        if totals[j] > 0 {
            per_joint[j] = Some(hits[j] as f64 / totals[j] as f64);
        }
    }
    let defined: Vec<f64> = per_joint.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    MetricReport {
        metric,
        per_joint,
        mean,
        matched,
        unmatched_gt,
        unmatched_pred,
        excluded,
    }
}

/// Turns annotations into a prediction file with unit scores.
pub fn poses_from_annotations(gt: &AnnotationFile) -> PoseFile {
    use crate::annotation::{ImagePoses, PosePerson};
    PoseFile {
        images: gt
            .images
            .iter()
            .map(|img| ImagePoses {
                id: img.id.clone(),
                persons: img
                    .persons
                    .iter()
                    .filter_map(|p| {
                        let c = compute_centroid(p)?;
                        Some(PosePerson {
                            score: 1.0,
                            centroid: [c.0, c.1],
                            joints: p
                                .joints
                                .iter()
                                .map(|j| j.visible.then_some([j.x, j.y, 1.0]))
                                .collect(),
                        })
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Joint-assignment tally for one decoded image against its annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AssignmentTally {
    pub correct: usize,
    pub total: usize,
}

impl AssignmentTally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl std::ops::AddAssign for AssignmentTally {
    fn add_assign(&mut self, o: Self) {
        self.correct += o.correct;
        self.total += o.total;
    }
}

/// Counts ground-truth joints that ended up in the right person.
///
/// Decoded persons are paired with annotated persons greedily by centroid
/// distance. Each decoded joint is owned by the annotated person whose joint
/// of that category lies closest to it; the joint is correct when that owner
/// is the person its decoded person was paired with. Every visible
/// annotated joint contributes one to `total`. Coordinates are image pixels.
pub fn assignment_accuracy(gt: &PoseAnnotation, decoded: &[PersonInstance]) -> AssignmentTally {
    let centroids: Vec<Option<(f64, f64)>> = gt.persons.iter().map(compute_centroid).collect();
    let mut pairs = Vec::new();
    for (d, p) in decoded.iter().enumerate() {
        for (g, c) in centroids.iter().enumerate() {
            if let Some(c) = c {
                pairs.push(((p.centroid.x - c.0).hypot(p.centroid.y - c.1), d, g));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pair_of = vec![None; decoded.len()];
    let mut gt_used = vec![false; gt.persons.len()];
    for (_, d, g) in pairs {
        if pair_of[d].is_none() && !gt_used[g] {
            pair_of[d] = Some(g);
            gt_used[g] = true;
        }
    }
    let total = gt
        .persons
        .iter()
        .map(|p| p.visible_joints().filter(|(j, _)| *j < NUM_JOINTS).count())
        .sum();
    let mut correct = 0;
    // each annotated joint can be credited once
    let mut credited = vec![[false; NUM_JOINTS]; gt.persons.len()];
    for (d, p) in decoded.iter().enumerate() {
        let Some(g) = pair_of[d] else { continue };
        for (j, c) in p.joints.iter().enumerate() {
            let Some(c) = c else { continue };
            let owner = gt
                .persons
                .iter()
                .enumerate()
                .filter(|(_, q)| q.joints[j].visible)
                .min_by(|a, b| {
                    let da = (a.1.joints[j].x - c.x).hypot(a.1.joints[j].y - c.y);
                    let db = (b.1.joints[j].x - c.x).hypot(b.1.joints[j].y - c.y);
                    da.total_cmp(&db)
                })
                .map(|(i, _)| i);
            if owner == Some(g) && !credited[g][j] {
                credited[g][j] = true;
                correct += 1;
            }
        }
    }
    AssignmentTally { correct, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{HeadBox, Joint};

    fn gt_person(dx: f64) -> PersonAnnotation {
        PersonAnnotation {
            joints: (0..NUM_JOINTS)
                .map(|j| Joint::new(dx + j as f64, 2.0 * j as f64, true))
                .collect(),
            headbox: Some(HeadBox {
                x1: 0.0,
                y1: 0.0,
                x2: 6.0 / 0.6 / 2f64.sqrt(),
                y2: 6.0 / 0.6 / 2f64.sqrt(),
            }),
        }
    }

    fn exact(p: &PersonAnnotation) -> PredJoints {
        let mut out = [None; NUM_JOINTS];
        for (j, g) in p.joints.iter().enumerate() {
            out[j] = Some((g.x, g.y));
        }
        out
    }

    #[test]
    fn perfect_prediction_all_correct() {
        let g = gt_person(0.0);
        let s = pckh_single(&exact(&g), &g, 0.5).unwrap();
        assert!(s.iter().all(|v| *v == Some(true)));
    }

    #[test]
    fn threshold_arithmetic() {
        // head size 10 (up to rounding): radius 5 at alpha 0.5
        let mut g = gt_person(0.0);
        g.headbox = Some(HeadBox {
            x1: 0.0,
            y1: 0.0,
            x2: 10.0 / 0.6,
            y2: 0.0,
        });
        let mut p = exact(&g);
        p[0] = Some((g.joints[0].x + 4.0, g.joints[0].y));
        p[1] = Some((g.joints[1].x, g.joints[1].y + 6.0));
        let s = pckh_single(&p, &g, 0.5).unwrap();
        assert_eq!(s[0], Some(true));
        assert_eq!(s[1], Some(false));
    }

    #[test]
    fn invisible_and_missing_joints() {
        let mut g = gt_person(0.0);
        g.joints[4].visible = false;
        let mut p = exact(&g);
        p[5] = None;
        let s = pckh_single(&p, &g, 0.5).unwrap();
        assert_eq!(s[4], None);
        assert_eq!(s[5], Some(false));
        g.headbox = None;
        assert!(pckh_single(&p, &g, 0.5).is_none());
    }

    #[test]
    fn matching_recovers_swapped_pairs() {
        let gts = vec![gt_person(0.0), gt_person(100.0)];
        let preds = vec![exact(&gts[1]), exact(&gts[0]), exact(&gt_person(300.0))];
        assert_eq!(
            match_persons(&preds, &gts, Metric::default()),
            vec![Some(1), Some(0)]
        );
    }

    #[test]
    fn metric_parsing() {
        assert_eq!(
            "pckh@0.5".parse::<Metric>().unwrap(),
            Metric::Pckh { alpha: 0.5 }
        );
        assert_eq!(
            "pck@0.2".parse::<Metric>().unwrap(),
            Metric::Pck { alpha: 0.2 }
        );
        assert!("pckh".parse::<Metric>().is_err());
        assert!("map@0.5".parse::<Metric>().is_err());
    }
}
