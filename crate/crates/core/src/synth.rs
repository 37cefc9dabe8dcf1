//! Seeded synthetic multi-person scenes and map perturbation.
//!
//! Scenes are annotations only; there are no pixels. Each person is a
//! scaled, rotated copy of a fixed 16-joint template whose centroid lands on
//! the sampled placement point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::annotation::{HeadBox, Joint, PersonAnnotation, PoseAnnotation};
use crate::codec::GroundTruthMaps;
use crate::decode::extract_peaks;
use crate::error::{Error, Result};
use crate::skeleton::{HEAD_TOP, NUM_JOINTS, UPPER_NECK};

pub const PLACEMENT_RETRIES: usize = 1000;

/// Template joints in units of body height, head top at the origin, +y down.
/// The person's right side is at negative x (facing the camera).
pub const TEMPLATE: [(f64, f64); NUM_JOINTS] = [
    (-0.08, 0.98), // r_ankle
    (-0.08, 0.74), // r_knee
    (-0.07, 0.50), // r_hip
    (0.07, 0.50),  // l_hip
    (0.08, 0.74),  // l_knee
    (0.08, 0.98),  // l_ankle
    (0.0, 0.50),   // pelvis
    (0.0, 0.18),   // thorax
    (0.0, 0.13),   // upper_neck
    (0.0, 0.0),    // head_top
    (-0.17, 0.47), // r_wrist
    (-0.15, 0.34), // r_elbow
    (-0.11, 0.19), // r_shoulder
    (0.11, 0.19),  // l_shoulder
    (0.15, 0.34),  // l_elbow
    (0.17, 0.47),  // l_wrist
];

/// Template joints relative to their mean.
pub fn template_centered() -> [(f64, f64); NUM_JOINTS] {
    let n = NUM_JOINTS as f64;
    let mx = TEMPLATE.iter().map(|p| p.0).sum::<f64>() / n;
    let my = TEMPLATE.iter().map(|p| p.1).sum::<f64>() / n;
    TEMPLATE.map(|(x, y)| (x - mx, y - my))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Noise {
    /// Standard deviation of peak displacement, grid cells.
    pub peak_sigma: f64,
    /// Standard deviation of offset noise, grid cells (divided by Z when applied).
    pub offset_rho: f64,
    /// Extra offset noise proportional to the stored vector's length.
    pub offset_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub persons: usize,
    pub width: u32,
    pub height: u32,
    /// Body height in pixels at scale 1.
    pub base_height: f64,
    pub scale_range: (f64, f64),
    /// Rotation is drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Minimum distance between person centroids, pixels.
    pub min_separation: f64,
    /// Probability that a joint is marked invisible.
    pub occlusion: f64,
    pub noise: Noise,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            persons: 3,
            width: 256,
            height: 256,
            base_height: 64.0,
            scale_range: (0.9, 1.1),
            max_rotation_deg: 10.0,
            min_separation: 64.0,
            occlusion: 0.0,
            noise: Noise::default(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!(
                "image size {}x{} is empty",
                self.width, self.height
            ));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("scale range ({lo}, {hi}) is invalid"));
        }
        if !(self.base_height > 0.0)
            || !(self.min_separation >= 0.0)
            || !(self.max_rotation_deg >= 0.0)
        {
            return bad("base height, separation and rotation must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return bad(format!("occlusion {} is not a probability", self.occlusion));
        }
        if !(self.noise.peak_sigma >= 0.0 && self.noise.offset_rho >= 0.0) {
            return bad("noise parameters must be non-negative".into());
        }
        Ok(())
    }
}

fn headbox(joints: &[Joint]) -> HeadBox {
    let (a, b) = (joints[HEAD_TOP], joints[UPPER_NECK]);
    let (cx, cy) = ((a.x + b.x) / 2.0, (a.y + b.y) / 2.0);
    let half = (a.x - b.x).hypot(a.y - b.y) / 2.0;
    HeadBox {
        x1: cx - half,
        y1: cy - half,
        x2: cx + half,
        y2: cy + half,
    }
}

/// Places `cfg.persons` template copies by rejection sampling.
pub fn generate_scene(cfg: &SceneConfig) -> Result<PoseAnnotation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template = template_centered();
    let (w, h) = (f64::from(cfg.width), f64::from(cfg.height));
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(cfg.persons);
    let mut persons = Vec::with_capacity(cfg.persons);
    for _ in 0..cfg.persons {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let (lo, hi) = cfg.scale_range;
            let scale = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            let rot = if cfg.max_rotation_deg > 0.0 {
                rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
                    .to_radians()
            } else {
                0.0
            };
            let cx = rng.random_range(0.0..w);
            let cy = rng.random_range(0.0..h);
            if centers
                .iter()
                .any(|&(x, y)| (x - cx).hypot(y - cy) < cfg.min_separation)
            {
                continue;
            }
            let size = scale * cfg.base_height;
            let (sin, cos) = rot.sin_cos();
            let joints: Vec<Joint> = template
                .iter()
                .map(|&(tx, ty)| {
                    Joint::new(
                        cx + size * (cos * tx - sin * ty),
                        cy + size * (sin * tx + cos * ty),
                        true,
                    )
                })
                .collect();
            if joints
                .iter()
                .all(|j| j.x >= 0.0 && j.x < w && j.y >= 0.0 && j.y < h)
            {
                placed = Some(((cx, cy), joints));
                break;
            }
        }
        let Some((center, mut joints)) = placed else {
            return Err(Error::Placement {
                persons: cfg.persons,
                separation: cfg.min_separation,
                width: cfg.width,
                height: cfg.height,
                retries: PLACEMENT_RETRIES,
                seed: cfg.seed,
            });
        };
        let hb = headbox(&joints);
        if cfg.occlusion > 0.0 {
            for j in &mut joints {
                j.visible = !rng.random_bool(cfg.occlusion);
            }
        }
        centers.push(center);
        persons.push(PersonAnnotation {
            joints,
            headbox: Some(hb),
        });
    }
    Ok(PoseAnnotation {
        id: format!("synth-{}", cfg.seed),
        width: cfg.width,
        height: cfg.height,
        persons,
    })
}

fn bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let sample = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            f64::from(plane[yi as usize * w + xi as usize])
        }
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let top = sample(x0, y0) * (1.0 - fx) + sample(x0 + 1, y0) * fx;
    let bottom = sample(x0, y0 + 1) * (1.0 - fx) + sample(x0 + 1, y0 + 1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Moves each heatmap peak by a Gaussian displacement (every cell follows
/// its nearest peak) and adds Gaussian noise of `rho / Z` to the joint
/// offset channels. Heatmaps stay within `[0, 1]`.
pub fn perturb_maps(maps: &GroundTruthMaps, noise: &Noise, seed: u64) -> Result<GroundTruthMaps> {
    if !(noise.peak_sigma >= 0.0 && noise.offset_rho >= 0.0 && noise.offset_rel >= 0.0) {
        return Err(Error::InvalidArgument(
            "noise parameters must be non-negative".into(),
        ));
    }
    let mut out = maps.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = maps.heatmaps.shape();
    if noise.peak_sigma > 0.0 {
        let jitter = Normal::new(0.0, noise.peak_sigma).expect("finite sigma");
        let peaks = extract_peaks(&maps.heatmaps, 3, 1e-3)?;
        for (c, list) in peaks.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let moves: Vec<(f64, f64, f64, f64)> = list
                .iter()
                .map(|p| (p.x, p.y, jitter.sample(&mut rng), jitter.sample(&mut rng)))
                .collect();
            let src = maps.heatmaps.plane(0, c);
            let dst = out.heatmaps.plane_mut(0, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    let (fx, fy) = (x as f64, y as f64);
                    let m = moves
                        .iter()
                        .min_by(|a, b| {
                            let da = (a.0 - fx).powi(2) + (a.1 - fy).powi(2);
                            let db = (b.0 - fx).powi(2) + (b.1 - fy).powi(2);
                            da.total_cmp(&db)
                        })
                        .expect("non-empty");
                    dst[y * s.w + x] = bilinear(src, s.w, s.h, fx - m.2, fy - m.3).clamp(0.0, 1.0);
                }
            }
        }
    }
    if noise.offset_rho > 0.0 || noise.offset_rel > 0.0 {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let base = noise.offset_rho / maps.meta.z;
        for j in 0..NUM_JOINTS {
            for i in 0..s.h * s.w {
                let (ox, oy) = (
                    maps.offsets.plane(0, 2 * j)[i],
                    maps.offsets.plane(0, 2 * j + 1)[i],
                );
                let sd = base + noise.offset_rel * f64::from(ox).hypot(f64::from(oy));
                out.offsets.plane_mut(0, 2 * j)[i] += (sd * unit.sample(&mut rng)) as f32;
                out.offsets.plane_mut(0, 2 * j + 1)[i] += (sd * unit.sample(&mut rng)) as f32;
            }
        }
    }
    Ok(out)
}
