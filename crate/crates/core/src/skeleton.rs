//! Joint layout and the centroid-rooted pose trees.
//!
//! Joints follow the standard 16-joint MPII order:
//!
//! | id | joint       | id | joint       |
//! |----|-------------|----|-------------|
//! | 0  | r_ankle     | 8  | upper_neck  |
//! | 1  | r_knee      | 9  | head_top    |
//! | 2  | r_hip       | 10 | r_wrist     |
//! | 3  | l_hip       | 11 | r_elbow     |
//! | 4  | l_knee      | 12 | r_shoulder  |
//! | 5  | l_ankle     | 13 | l_shoulder  |
//! | 6  | pelvis      | 14 | l_elbow     |
//! | 7  | thorax      | 15 | l_wrist     |
//!
//! Index 16 ([`CENTROID`]) is the person centroid, handled as a pseudo-joint.

use std::str::FromStr;

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 16;
/// Channel index of the centroid pseudo-joint.
pub const CENTROID: usize = NUM_JOINTS;

pub const R_ANKLE: usize = 0;
pub const R_KNEE: usize = 1;
pub const R_HIP: usize = 2;
pub const L_HIP: usize = 3;
pub const L_KNEE: usize = 4;
pub const L_ANKLE: usize = 5;
pub const PELVIS: usize = 6;
pub const THORAX: usize = 7;
pub const UPPER_NECK: usize = 8;
pub const HEAD_TOP: usize = 9;
pub const R_WRIST: usize = 10;
pub const R_ELBOW: usize = 11;
pub const R_SHOULDER: usize = 12;
pub const L_SHOULDER: usize = 13;
pub const L_ELBOW: usize = 14;
pub const L_WRIST: usize = 15;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TreeVariant {
    /// Every joint hangs directly off the centroid.
    Flat,
    /// Torso joints off the centroid, limbs chained outward.
    Hierarchical,
}

impl FromStr for TreeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Self::Flat),
            "hier" | "hierarchical" => Ok(Self::Hierarchical),
            _ => Err(Error::InvalidArgument(format!(
                "unknown tree `{s}` (expected flat or hier)"
            ))),
        }
    }
}

/// Parent map over joints; the root of every chain is [`CENTROID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoseTree {
    variant: TreeVariant,
    parent: [usize; NUM_JOINTS],
    level: [u8; NUM_JOINTS],
}

impl PoseTree {
    pub fn flat() -> Self {
        Self {
            variant: TreeVariant::Flat,
            parent: [CENTROID; NUM_JOINTS],
            level: [1; NUM_JOINTS],
        }
    }

    pub fn hierarchical() -> Self {
        let mut parent = [CENTROID; NUM_JOINTS];
        let mut level = [1u8; NUM_JOINTS];
        let chains = [
            (HEAD_TOP, UPPER_NECK, 2),
            (R_ELBOW, R_SHOULDER, 2),
            (L_ELBOW, L_SHOULDER, 2),
            (R_KNEE, R_HIP, 2),
            (L_KNEE, L_HIP, 2),
            (R_WRIST, R_ELBOW, 3),
            (L_WRIST, L_ELBOW, 3),
            (R_ANKLE, R_KNEE, 3),
            (L_ANKLE, L_KNEE, 3),
        ];
        for (j, p, l) in chains {
            parent[j] = p;
            level[j] = l;
        }
        Self {
            variant: TreeVariant::Hierarchical,
            parent,
            level,
        }
    }

    pub fn new(variant: TreeVariant) -> Self {
        match variant {
            TreeVariant::Flat => Self::flat(),
            TreeVariant::Hierarchical => Self::hierarchical(),
        }
    }

    pub fn variant(&self) -> TreeVariant {
        self.variant
    }

    /// Parent of `joint`; [`CENTROID`] for level-1 joints.
    pub fn parent(&self, joint: usize) -> usize {
        self.parent[joint]
    }

    pub fn level(&self, joint: usize) -> u8 {
        self.level[joint]
    }

    pub fn max_level(&self) -> u8 {
        self.level.iter().copied().max().unwrap_or(1)
    }

    pub fn joints_at_level(&self, level: u8) -> Vec<usize> {
        (0..NUM_JOINTS)
            .filter(|&j| self.level[j] == level)
            .collect()
    }

    /// Ancestors from the parent up to and including the centroid.
    pub fn ancestors(&self, joint: usize) -> Vec<usize> {
        let mut v = Vec::new();
        let mut j = joint;
        while j != CENTROID {
            j = self.parent[j];
            v.push(j);
        }
        v
    }
}
