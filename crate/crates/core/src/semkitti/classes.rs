//! Class tables: names, train-id maps, and per-class frequency fractions.

use std::collections::BTreeMap;

/// Train-space ignore label.
pub const IGNORE: u16 = 255;

/// The 19 SemanticKITTI semantic classes in benchmark display order, with
/// their reported frequency percentages.
const KITTI_CLASSES: [(&str, f64); 19] = [
    ("road", 15.30),
    ("sidewalk", 11.13),
    ("parking", 1.12),
    ("other-ground", 0.56),
    ("building", 14.4),
    ("car", 3.92),
    ("truck", 0.16),
    ("bicycle", 0.03),
    ("motorcycle", 0.03),
    ("other-vehicle", 0.20),
    ("vegetation", 39.3),
    ("trunk", 0.51),
    ("terrain", 9.17),
    ("person", 0.07),
    ("bicyclist", 0.07),
    ("motorcyclist", 0.05),
    ("fence", 3.90),
    ("pole", 0.29),
    ("traffic-sign", 0.08),
];

/// Raw dataset label -> index into [`KITTI_CLASSES`], per the official
/// learning map (moving variants collapse onto their static class).
const KITTI_RAW_MAP: [(u16, u16); 30] = [
    (10, 5),   // car
    (11, 7),   // bicycle
    (13, 9),   // bus -> other-vehicle
    (15, 8),   // motorcycle
    (16, 9),   // on-rails -> other-vehicle
    (18, 6),   // truck
    (20, 9),   // other-vehicle
    (30, 13),  // person
    (31, 14),  // bicyclist
    (32, 15),  // motorcyclist
    (40, 0),   // road
    (44, 2),   // parking
    (48, 1),   // sidewalk
    (49, 3),   // other-ground
    (50, 4),   // building
    (51, 16),  // fence
    (60, 0),   // lane-marking -> road
    (70, 10),  // vegetation
    (71, 11),  // trunk
    (72, 12),  // terrain
    (80, 17),  // pole
    (81, 18),  // traffic-sign
    (252, 5),  // moving-car
    (253, 14), // moving-bicyclist
    (254, 13), // moving-person
    (255, 15), // moving-motorcyclist
    (256, 9),  // moving-on-rails
    (257, 9),  // moving-bus
    (258, 6),  // moving-truck
    (259, 9),  // moving-other-vehicle
];

/// Synthetic palette classes and their nominal scene frequency fractions.
const PALETTE_CLASSES: [(&str, f64); 4] =
    [("road", 0.10), ("car", 0.015), ("building", 0.03), ("pole", 0.002)];

/// Palette class index -> index into [`KITTI_CLASSES`].
pub const PALETTE_TO_KITTI: [u16; 4] = [0, 5, 4, 17];

/// Semantic class names in a fixed order, a raw-to-train id map, and
/// per-class frequency fractions. The empty class is implicit and always the
/// last id (`n_semantic`).
#[derive(Clone, Debug)]
pub struct ClassTable {
    names: Vec<String>,
    frequencies: Vec<f64>,
    raw_to_train: BTreeMap<u16, u16>,
    empty_frequency: f64,
}

impl ClassTable {
    pub fn new(
        names: Vec<String>,
        frequencies: Vec<f64>,
        raw_to_train: BTreeMap<u16, u16>,
        empty_frequency: f64,
    ) -> Self {
        assert_eq!(names.len(), frequencies.len());
        assert!(frequencies.iter().all(|&f| f > 0.0), "frequencies must be positive");
        assert!(empty_frequency > 0.0, "empty frequency must be positive");
        ClassTable { names, frequencies, raw_to_train, empty_frequency }
    }

    /// The benchmark table. The listed percentages cover the semantic
    /// classes; the empty class keeps a small positive residual because the
    /// published (rounded) values already sum to ~100%.
    pub fn semantic_kitti() -> Self {
        let names = KITTI_CLASSES.iter().map(|(n, _)| n.to_string()).collect();
        let frequencies: Vec<f64> = KITTI_CLASSES.iter().map(|(_, f)| f / 100.0).collect();
        let sum: f64 = frequencies.iter().sum();
        let empty_frequency = (1.0 - sum).max(1e-3);
        ClassTable::new(names, frequencies, KITTI_RAW_MAP.iter().copied().collect(), empty_frequency)
    }

    /// The synthetic palette: road, car, building, pole. Raw ids equal train
    /// ids, so palette grids pass through remapping unchanged.
    pub fn palette() -> Self {
        let names = PALETTE_CLASSES.iter().map(|(n, _)| n.to_string()).collect();
        let frequencies: Vec<f64> = PALETTE_CLASSES.iter().map(|(_, f)| *f).collect();
        let sum: f64 = frequencies.iter().sum();
        let map = (0..PALETTE_CLASSES.len() as u16).map(|i| (i, i)).collect();
        ClassTable::new(names, frequencies, map, 1.0 - sum)
    }

    /// Identity map over `n` classes with uniform frequencies.
    pub fn identity(n: usize) -> Self {
        let names = (0..n).map(|i| format!("class{i}")).collect();
        let frequencies = vec![1.0 / (n + 1) as f64; n];
        let map = (0..n as u16).map(|i| (i, i)).collect();
        ClassTable::new(names, frequencies, map, 1.0 / (n + 1) as f64)
    }

    pub fn n_semantic(&self) -> usize {
        self.names.len()
    }

    /// Total class count including empty.
    pub fn n_classes(&self) -> usize {
        self.names.len() + 1
    }

    pub fn empty_id(&self) -> u16 {
        self.names.len() as u16
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Class name, with "empty" for the implicit last id.
    pub fn name(&self, id: u16) -> &str {
        if id == self.empty_id() {
            "empty"
        } else {
            &self.names[id as usize]
        }
    }

    pub fn frequency(&self, id: u16) -> f64 {
        if id == self.empty_id() {
            self.empty_frequency
        } else {
            self.frequencies[id as usize]
        }
    }

    /// Frequencies for all classes including empty, in id order.
    pub fn frequencies_with_empty(&self) -> Vec<f64> {
        let mut out = self.frequencies.clone();
        out.push(self.empty_frequency);
        out
    }

    pub fn remap_raw(&self, raw: u16) -> u16 {
        self.raw_to_train.get(&raw).copied().unwrap_or(IGNORE)
    }

    /// Smallest raw id mapping to a train id, usable as a remap inverse on
    /// canonical labels.
    pub fn canonical_raw(&self, train: u16) -> Option<u16> {
        self.raw_to_train.iter().find(|(_, &t)| t == train).map(|(&r, _)| r)
    }
}
