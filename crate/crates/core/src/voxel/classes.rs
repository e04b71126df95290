use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::UNKNOWN;
use crate::error::{Error, Result};

/// Raw dataset label marking an invalid voxel.
pub const RAW_UNKNOWN: u16 = 255;

pub type Rgb = [u8; 3];

const KITTI_CLASSES: [(&str, Rgb); 19] = [
    ("road", [255, 0, 255]),
    ("sidewalk", [75, 0, 75]),
    ("parking", [255, 150, 255]),
    ("other-ground", [175, 0, 75]),
    ("building", [255, 200, 0]),
    ("car", [100, 150, 245]),
    ("truck", [80, 30, 180]),
    ("bicycle", [100, 230, 245]),
    ("motorcycle", [30, 60, 150]),
    ("other-vehicle", [100, 80, 250]),
    ("vegetation", [0, 175, 0]),
    ("trunk", [135, 60, 0]),
    ("terrain", [150, 240, 80]),
    ("person", [255, 30, 30]),
    ("bicyclist", [255, 40, 200]),
    ("motorcyclist", [150, 30, 90]),
    ("fence", [255, 120, 50]),
    ("pole", [255, 240, 150]),
    ("traffic-sign", [255, 0, 0]),
];

// Raw SemanticKITTI ids per class name. Moving-object ids fold into their
// static class; 255 is reserved for invalid voxels.
const KITTI_RAW: [(u16, &str); 29] = [
    (10, "car"),
    (11, "bicycle"),
    (13, "other-vehicle"),
    (15, "motorcycle"),
    (16, "other-vehicle"),
    (18, "truck"),
    (20, "other-vehicle"),
    (30, "person"),
    (31, "bicyclist"),
    (32, "motorcyclist"),
    (40, "road"),
    (44, "parking"),
    (48, "sidewalk"),
    (49, "other-ground"),
    (50, "building"),
    (51, "fence"),
    (60, "road"),
    (70, "vegetation"),
    (71, "trunk"),
    (72, "terrain"),
    (80, "pole"),
    (81, "traffic-sign"),
    (252, "car"),
    (253, "bicyclist"),
    (254, "person"),
    (256, "other-vehicle"),
    (257, "other-vehicle"),
    (258, "truck"),
    (259, "other-vehicle"),
];

// Raw ids that mean "nothing here" in the dataset.
const KITTI_RAW_FREE: [u16; 4] = [0, 1, 52, 99];

const FALLBACK_COLOR: Rgb = [128, 128, 128];

/// Semantic classes `1..=N` by name; id 0 is always free space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config(
                "class table needs at least one semantic class".into(),
            ));
        }
        if names.len() >= UNKNOWN as usize {
            return Err(Error::Config(format!("too many classes: {}", names.len())));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n == "free" || !seen.insert(n.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate or reserved class name {n:?}"
                )));
            }
        }
        Ok(ClassTable { names })
    }

    /// The 19 SemanticKITTI classes in benchmark order.
    pub fn semantic_kitti() -> Self {
        ClassTable {
            names: KITTI_CLASSES.iter().map(|(n, _)| n.to_string()).collect(),
        }
    }

    /// Four-class subset used by the synthetic scenes.
    pub fn street() -> Self {
        Self::new(["road", "terrain", "building", "car"]).expect("static table")
    }

    /// Number of semantic classes N (free excluded).
    pub fn num_semantic(&self) -> usize {
        self.names.len()
    }

    /// N + 1, the number of logits per voxel.
    pub fn num_classes(&self) -> usize {
        self.names.len() + 1
    }

    pub fn semantic_names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: u16) -> &str {
        match id {
            0 => "free",
            UNKNOWN => "unknown",
            i => self
                .names
                .get(i as usize - 1)
                .map_or("invalid", String::as_str),
        }
    }

    pub fn id_of(&self, name: &str) -> Option<u16> {
        if name == "free" {
            return Some(0);
        }
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| i as u16 + 1)
    }

    pub fn color(&self, id: u16) -> Rgb {
        let name = self.name(id);
        KITTI_CLASSES
            .iter()
            .find(|(n, _)| *n == name)
            .map_or(FALLBACK_COLOR, |(_, c)| *c)
    }

    /// Raw-to-internal map for this table using SemanticKITTI raw ids.
    /// Classes without a raw id are unreachable from raw data.
    pub fn kitti_label_map(&self) -> LabelMap {
        let mut pairs: Vec<(u16, u16)> = KITTI_RAW_FREE.iter().map(|&r| (r, 0)).collect();
        for &(raw, name) in &KITTI_RAW {
            if let Some(id) = self.id_of(name) {
                pairs.push((raw, id));
            }
        }
        LabelMap::new(pairs).expect("static map")
    }
}

/// Raw dataset id to internal contiguous id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    forward: BTreeMap<u16, u16>,
}

impl LabelMap {
    pub fn new(pairs: impl IntoIterator<Item = (u16, u16)>) -> Result<Self> {
        let mut forward = BTreeMap::new();
        for (raw, internal) in pairs {
            if raw == RAW_UNKNOWN {
                return Err(Error::Config(format!(
                    "raw id {RAW_UNKNOWN} is reserved for unknown voxels"
                )));
            }
            if let Some(prev) = forward.insert(raw, internal) {
                if prev != internal {
                    return Err(Error::Config(format!(
                        "raw id {raw} mapped to both {prev} and {internal}"
                    )));
                }
            }
        }
        Ok(LabelMap { forward })
    }

    /// Identity on `0..=num_semantic`.
    pub fn identity(num_semantic: usize) -> Self {
        LabelMap {
            forward: (0..=num_semantic as u16).map(|i| (i, i)).collect(),
        }
    }

    #[inline]
    pub fn to_internal(&self, raw: u16) -> u16 {
        self.forward.get(&raw).copied().unwrap_or(UNKNOWN)
    }

    /// Smallest raw id for each internal id; unknown maps to [`RAW_UNKNOWN`].
    pub fn to_raw(&self, internal: u16) -> u16 {
        if internal == UNKNOWN {
            return RAW_UNKNOWN;
        }
        self.forward
            .iter()
            .find(|(_, &i)| i == internal)
            .map_or(RAW_UNKNOWN, |(&r, _)| r)
    }

    pub fn pairs(&self) -> Vec<(u16, u16)> {
        self.forward.iter().map(|(&r, &i)| (r, i)).collect()
    }

    /// Every internal target lies in `0..=num_semantic`.
    pub fn check_range(&self, num_semantic: usize) -> Result<()> {
        match self
            .forward
            .iter()
            .find(|(_, &i)| i as usize > num_semantic)
        {
            Some((r, i)) => Err(Error::Config(format!(
                "label map sends raw {r} to {i}, outside [0, {num_semantic}]"
            ))),
            None => Ok(()),
        }
    }
}
