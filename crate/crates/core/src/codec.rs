//! Ground-truth heatmap and offset encoding.
//!
//! Everything here works in output-grid units. Grid cell `i` covers image
//! pixels `[i * stride, (i + 1) * stride)` and its center sits at
//! `(i + 0.5) * stride`, so [`to_grid`] is `p / stride - 0.5`. Any point in
//! the image is then within half a cell of some cell center. The offset
//! normalizer is `Z = min(H', W') / 2` in grid cells, so decoding never
//! needs the stride.

use std::collections::BTreeMap;
use std::path::Path;

use crate::annotation::{PersonAnnotation, PoseAnnotation};
use crate::dshg;
use crate::error::{Error, Result};
use crate::hourglass::OUTPUT_STRIDE;
use crate::skeleton::{PoseTree, TreeVariant, CENTROID, NUM_JOINTS};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_TAU: f64 = 3.0;

/// Heatmap channels: 16 joints plus the centroid.
pub const HEATMAP_CHANNELS: usize = NUM_JOINTS + 1;
pub const OFFSET_CHANNELS: usize = 2 * HEATMAP_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub w: usize,
    pub h: usize,
}

impl Grid {
    pub fn new(w: usize, h: usize) -> Self {
        Self { w, h }
    }

    /// Output grid for an image, rounding partial cells up.
    pub fn for_image(width: u32, height: u32, stride: usize) -> Self {
        Self::new(
            (width as usize).div_ceil(stride),
            (height as usize).div_ceil(stride),
        )
    }

    pub fn z(&self) -> f64 {
        self.w.min(self.h) as f64 / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeConfig {
    pub sigma: f64,
    pub tau: f64,
    pub stride: usize,
    pub tree: TreeVariant,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            tau: DEFAULT_TAU,
            stride: OUTPUT_STRIDE,
            tree: TreeVariant::Flat,
        }
    }
}

impl EncodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapMeta {
    pub sigma: f64,
    pub tau: f64,
    pub z: f64,
    pub stride: usize,
    pub width: u32,
    pub height: u32,
}

impl MapMeta {
    fn to_tensor(self) -> Tensor {
        let v = vec![
            self.sigma as f32,
            self.tau as f32,
            self.z as f32,
            self.stride as f32,
            self.width as f32,
            self.height as f32,
        ];
        Tensor::from_vec(Shape::new(1, 1, 1, 6), v).expect("meta length")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 6 {
            return Err(Error::Format(format!(
                "map meta must hold 6 values, found {}",
                d.len()
            )));
        }
        Ok(Self {
            sigma: f64::from(d[0]),
            tau: f64::from(d[1]),
            z: f64::from(d[2]),
            stride: d[3] as usize,
            width: d[4] as u32,
            height: d[5] as u32,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMaps {
    /// `(1, J+1, H', W')`.
    pub heatmaps: Tensor,
    /// `(1, 2(J+1), H', W')`; channels `2j, 2j+1` hold the x, y components.
    pub offsets: Tensor,
    pub meta: MapMeta,
}

impl GroundTruthMaps {
    pub fn grid(&self) -> Grid {
        let s = self.heatmaps.shape();
        Grid::new(s.w, s.h)
    }
}

/// Image pixel coordinate to grid coordinate.
pub fn to_grid(p: f64, stride: usize) -> f64 {
    p / stride as f64 - 0.5
}

/// Grid coordinate to image pixel coordinate.
pub fn to_image(g: f64, stride: usize) -> f64 {
    (g + 0.5) * stride as f64
}

/// Mean of the visible joints, or `None` if there are none.
pub fn compute_centroid(person: &PersonAnnotation) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (_, j) in person.visible_joints() {
        sx += j.x;
        sy += j.y;
        n += 1;
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// A person in grid coordinates: 16 optional joints plus the centroid.
#[derive(Debug, Clone, Copy)]
struct GridPerson {
    points: [Option<(f64, f64)>; HEATMAP_CHANNELS],
}

impl GridPerson {
    fn centroid(&self) -> (f64, f64) {
        self.points[CENTROID].expect("centroid always present")
    }

    /// Nearest visible ancestor of `joint`, ending at the centroid.
    fn parent_point(&self, tree: &PoseTree, joint: usize) -> (f64, f64) {
        let mut p = tree.parent(joint);
        while p != CENTROID {
            if let Some(pt) = self.points[p] {
                return pt;
            }
            p = tree.parent(p);
        }
        self.centroid()
    }
}

fn grid_persons(ann: &PoseAnnotation, stride: usize) -> Vec<GridPerson> {
    let mut out = Vec::with_capacity(ann.persons.len());
    for (i, person) in ann.persons.iter().enumerate() {
        let Some((cx, cy)) = compute_centroid(person) else {
            log::warn!(
                "image {}: person {i} has no visible joints, skipped",
                ann.id
            );
            continue;
        };
        let mut points = [None; HEATMAP_CHANNELS];
        for (j, joint) in person.visible_joints().filter(|(j, _)| *j < NUM_JOINTS) {
            points[j] = Some((to_grid(joint.x, stride), to_grid(joint.y, stride)));
        }
        points[CENTROID] = Some((to_grid(cx, stride), to_grid(cy, stride)));
        out.push(GridPerson { points });
    }
    out
}

fn heatmaps_from(persons: &[GridPerson], grid: Grid, sigma: f64) -> Tensor {
    let mut t = Tensor::zeros(Shape::new(1, HEATMAP_CHANNELS, grid.h, grid.w));
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut acc = vec![0.0f64; grid.h * grid.w];
    for c in 0..HEATMAP_CHANNELS {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in persons {
            let Some((px, py)) = p.points[c] else {
                continue;
            };
            for y in 0..grid.h {
                let dy = y as f64 - py;
                for x in 0..grid.w {
                    let dx = x as f64 - px;
                    acc[y * grid.w + x] += (-(dx * dx + dy * dy) * inv).exp();
                }
            }
        }
        for (dst, &v) in t.plane_mut(0, c).iter_mut().zip(&acc) {
            *dst = v.min(1.0) as f32;
        }
    }
    t
}

/// Integer cells within Euclidean distance `tau` of `(px, py)`.
fn neighborhood(px: f64, py: f64, tau: f64, grid: Grid) -> impl Iterator<Item = (usize, usize)> {
    let y0 = (py - tau).ceil().max(0.0) as usize;
    let y1 = ((py + tau).floor()).min(grid.h as f64 - 1.0);
    let x0 = (px - tau).ceil().max(0.0) as usize;
    let x1 = ((px + tau).floor()).min(grid.w as f64 - 1.0);
    let (y1, x1) = (y1 as i64, x1 as i64);
    (y0 as i64..=y1).flat_map(move |y| {
        (x0 as i64..=x1).filter_map(move |x| {
            let (dx, dy) = (x as f64 - px, y as f64 - py);
            (dx * dx + dy * dy <= tau * tau).then_some((x as usize, y as usize))
        })
    })
}

fn offsets_from(
    persons: &[GridPerson],
    tree: &PoseTree,
    grid: Grid,
    tau: f64,
    z: f64,
) -> (Tensor, Tensor) {
    let shape = Shape::new(1, OFFSET_CHANNELS, grid.h, grid.w);
    let mut t = Tensor::zeros(shape);
    let mut mask = Tensor::zeros(shape);
    let cells = grid.h * grid.w;
    let mut sum = vec![(0.0f64, 0.0f64); cells];
    let mut count = vec![0u32; cells];
    for j in 0..NUM_JOINTS {
        sum.iter_mut().for_each(|v| *v = (0.0, 0.0));
        count.iter_mut().for_each(|v| *v = 0);
        for p in persons {
            let Some((jx, jy)) = p.points[j] else {
                continue;
            };
            let (px, py) = p.parent_point(tree, j);
            for (x, y) in neighborhood(jx, jy, tau, grid) {
                let i = y * grid.w + x;
                sum[i].0 += (px - x as f64) / z;
                sum[i].1 += (py - y as f64) / z;
                count[i] += 1;
            }
        }
        for i in 0..cells {
            if count[i] > 0 {
                let n = f64::from(count[i]);
                t.plane_mut(0, 2 * j)[i] = (sum[i].0 / n) as f32;
                t.plane_mut(0, 2 * j + 1)[i] = (sum[i].1 / n) as f32;
                mask.plane_mut(0, 2 * j)[i] = 1.0;
                mask.plane_mut(0, 2 * j + 1)[i] = 1.0;
            }
        }
    }
    (t, mask)
}

/// Heatmaps over `grid`; joints are given in image pixels.
pub fn render_heatmaps(
    ann: &PoseAnnotation,
    grid: Grid,
    sigma: f64,
    stride: usize,
) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    Ok(heatmaps_from(&grid_persons(ann, stride), grid, sigma))
}

/// Offsets toward each joint's parent. A hidden parent is replaced by its
/// nearest visible ancestor, falling back to the centroid.
pub fn render_offsets(
    ann: &PoseAnnotation,
    tree: &PoseTree,
    grid: Grid,
    tau: f64,
    z: f64,
    stride: usize,
) -> Result<Tensor> {
    Ok(render_offsets_with_mask(ann, tree, grid, tau, z, stride)?.0)
}

/// As [`render_offsets`], also returning a 0/1 mask of the written cells.
pub fn render_offsets_with_mask(
    ann: &PoseAnnotation,
    tree: &PoseTree,
    grid: Grid,
    tau: f64,
    z: f64,
    stride: usize,
) -> Result<(Tensor, Tensor)> {
    if !(tau > 0.0) || !(z > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau and Z must be positive, got {tau} and {z}"
        )));
    }
    Ok(offsets_from(&grid_persons(ann, stride), tree, grid, tau, z))
}

pub fn encode(ann: &PoseAnnotation, cfg: &EncodeConfig) -> Result<GroundTruthMaps> {
    cfg.validate()?;
    let grid = Grid::for_image(ann.width, ann.height, cfg.stride);
    let z = grid.z();
    let persons = grid_persons(ann, cfg.stride);
    let tree = PoseTree::new(cfg.tree);
    let heatmaps = heatmaps_from(&persons, grid, cfg.sigma);
    let (offsets, _) = offsets_from(&persons, &tree, grid, cfg.tau, z);
    Ok(GroundTruthMaps {
        heatmaps,
        offsets,
        meta: MapMeta {
            sigma: cfg.sigma,
            tau: cfg.tau,
            z,
            stride: cfg.stride,
            width: ann.width,
            height: ann.height,
        },
    })
}

/// Writes `{id}/heatmaps`, `{id}/offsets` and `{id}/meta` per image.
pub fn write_maps(path: impl AsRef<Path>, maps: &[(String, GroundTruthMaps)]) -> Result<()> {
    let mut tensors = Vec::with_capacity(maps.len() * 3);
    for (id, m) in maps {
        tensors.push((format!("{id}/heatmaps"), m.heatmaps.clone()));
        tensors.push((format!("{id}/offsets"), m.offsets.clone()));
        tensors.push((format!("{id}/meta"), m.meta.to_tensor()));
    }
    dshg::write_file(path, &tensors)
}

/// Reads maps written by [`write_maps`], in file order of first appearance.
pub fn read_maps(path: impl AsRef<Path>) -> Result<Vec<(String, GroundTruthMaps)>> {
    maps_from_tensors(dshg::read_file(path)?)
}

pub fn maps_from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Vec<(String, GroundTruthMaps)>> {
    let mut order = Vec::new();
    let mut parts: BTreeMap<String, [Option<Tensor>; 3]> = BTreeMap::new();
    for (name, t) in tensors {
        let (id, kind) = name
            .rsplit_once('/')
            .ok_or_else(|| Error::Format(format!("unexpected tensor name `{name}`")))?;
        let slot = match kind {
            "heatmaps" => 0,
            "offsets" => 1,
            "meta" => 2,
            _ => return Err(Error::Format(format!("unexpected tensor name `{name}`"))),
        };
        let entry = parts.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            [None, None, None]
        });
        entry[slot] = Some(t);
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let [h, o, m] = parts.remove(&id).expect("recorded id");
        let missing = |what: &str| Error::Format(format!("image `{id}` has no {what} tensor"));
        let heatmaps = h.ok_or_else(|| missing("heatmaps"))?;
        let offsets = o.ok_or_else(|| missing("offsets"))?;
        let meta = MapMeta::from_tensor(&m.ok_or_else(|| missing("meta"))?)?;
        check_map_shapes(&heatmaps, &offsets)?;
        out.push((
            id,
            GroundTruthMaps {
                heatmaps,
                offsets,
                meta,
            },
        ));
    }
    Ok(out)
}

pub(crate) fn check_map_shapes(heatmaps: &Tensor, offsets: &Tensor) -> Result<()> {
    let (h, o) = (heatmaps.shape(), offsets.shape());
    if h.n != 1
        || o.n != 1
        || h.c != HEATMAP_CHANNELS
        || o.c != OFFSET_CHANNELS
        || h.h != o.h
        || h.w != o.w
    {
        return Err(Error::Shape(format!(
            "expected heatmaps (1,{HEATMAP_CHANNELS},H,W) and offsets (1,{OFFSET_CHANNELS},H,W), got {h} and {o}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Joint;

    fn person(points: &[(usize, f64, f64)]) -> PersonAnnotation {
        let mut joints = vec![Joint::absent(); NUM_JOINTS];
        for &(j, x, y) in points {
            joints[j] = Joint::new(x, y, true);
        }
        PersonAnnotation {
            joints,
            headbox: None,
        }
    }

    fn ann(persons: Vec<PersonAnnotation>) -> PoseAnnotation {
        PoseAnnotation {
            id: "t".into(),
            width: 256,
            height: 256,
            persons,
        }
    }

    #[test]
    fn centroid_is_mean_of_visible() {
        assert_eq!(
            compute_centroid(&person(&[(3, 4.0, 7.0)])),
            Some((4.0, 7.0))
        );
        assert_eq!(
            compute_centroid(&person(&[(0, 0.0, 0.0), (5, 10.0, 10.0)])),
            Some((5.0, 5.0))
        );
        assert_eq!(compute_centroid(&person(&[])), None);
    }

    #[test]
    fn grid_mapping_is_cell_centered() {
        assert_eq!(to_grid(42.0, 4), 10.0);
        assert_eq!(to_image(10.0, 4), 42.0);
        assert_eq!(to_grid(0.0, 4), -0.5);
        assert_eq!(to_grid(256.0, 4), 63.5);
    }

    #[test]
    fn heatmap_peak_and_falloff() {
        let a = ann(vec![person(&[(0, 42.0, 42.0)])]);
        let h = render_heatmaps(&a, Grid::new(64, 64), 2.0, 4).unwrap();
        assert_eq!(h.at(0, 0, 10, 10), 1.0);
        assert!((h.at(0, 0, 10, 12) - (-0.5f32).exp()).abs() < 1e-6);
        // centroid of a single joint sits on it
        assert_eq!(h.at(0, CENTROID, 10, 10), 1.0);
    }

    #[test]
    fn coincident_peaks_clamp() {
        let p = person(&[(2, 42.0, 42.0)]);
        let h = render_heatmaps(&ann(vec![p.clone(), p]), Grid::new(64, 64), 2.0, 4).unwrap();
        assert_eq!(h.at(0, 2, 10, 10), 1.0);
        assert!(h.data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn empty_annotation_gives_zero_maps() {
        let m = encode(&ann(vec![]), &EncodeConfig::default()).unwrap();
        assert!(m.heatmaps.data().iter().all(|&v| v == 0.0));
        assert!(m.offsets.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn offset_at_joint_cell() {
        // joint (25,15), centroid (32.5,22.5) in grid units; the second
        // joint at (40,30) puts the mean there.
        let p = person(&[(0, 102.0, 62.0), (1, 162.0, 122.0)]);
        let o = render_offsets(
            &ann(vec![p]),
            &PoseTree::flat(),
            Grid::new(64, 64),
            3.0,
            32.0,
            4,
        )
        .unwrap();
        assert_eq!(o.at(0, 0, 15, 25), 0.234375);
        assert_eq!(o.at(0, 1, 15, 25), 0.234375);
        // outside tau
        assert_eq!(o.at(0, 0, 15, 29), 0.0);
        assert_eq!(o.at(0, 2 * CENTROID, 22, 32), 0.0);
    }

    #[test]
    fn opposite_parents_average() {
        // same joint location, parents on opposite sides
        let a = person(&[(0, 42.0, 42.0), (1, 82.0, 42.0)]);
        let b = person(&[(0, 42.0, 42.0), (1, 2.0, 42.0)]);
        let o = render_offsets(
            &ann(vec![a, b]),
            &PoseTree::flat(),
            Grid::new(64, 64),
            3.0,
            32.0,
            4,
        )
        .unwrap();
        // centroids at x = 15 and x = 5 (grid), joint at 10: vectors +5/32 and -5/32
        assert_eq!(o.at(0, 0, 10, 10), 0.0);
        assert_eq!(o.at(0, 1, 10, 10), 0.0);
        assert_eq!(
            o.at(0, 0, 10, 12),
            ((5.0 - 2.0) / 32.0 + (-5.0 - 2.0) / 32.0) as f32 / 2.0
        );
    }

    #[test]
    fn joint_on_parent_gives_zero_vectors() {
        let p = person(&[(4, 42.0, 42.0)]);
        let o = render_offsets(
            &ann(vec![p]),
            &PoseTree::flat(),
            Grid::new(64, 64),
            3.0,
            32.0,
            4,
        )
        .unwrap();
        assert_eq!(o.at(0, 8, 10, 10), 0.0);
        assert!(o.at(0, 8, 10, 12) != 0.0);
    }

    #[test]
    fn hidden_parent_falls_back_to_visible_ancestor() {
        use crate::skeleton::{L_ELBOW, L_SHOULDER, L_WRIST};
        let mut p = person(&[
            (L_WRIST, 42.0, 42.0),
            (L_SHOULDER, 42.0, 82.0),
            (L_ELBOW, 0.0, 0.0),
        ]);
        p.joints[L_ELBOW].visible = false;
        let o = render_offsets(
            &ann(vec![p]),
            &PoseTree::hierarchical(),
            Grid::new(64, 64),
            3.0,
            32.0,
            4,
        )
        .unwrap();
        assert_eq!(o.at(0, 2 * L_WRIST + 1, 10, 10), 10.0 / 32.0);
    }

    #[test]
    fn maps_round_trip_through_container() {
        let p = person(&[(0, 40.0, 40.0), (9, 60.0, 20.0)]);
        let m = encode(&ann(vec![p]), &EncodeConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dshg");
        write_maps(&path, &[("img/0".into(), m.clone())]).unwrap();
        let back = read_maps(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "img/0");
        assert_eq!(back[0].1, m);
    }
}
