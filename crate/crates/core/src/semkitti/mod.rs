//! SemanticKITTI-compatible voxel I/O, class remapping, the CVOX export
//! format, and a seeded synthetic scene generator.

mod classes;
mod format;
mod synth;

pub use classes::{ClassTable, IGNORE, PALETTE_TO_KITTI};
pub use format::{
    read_cvox, read_labels, read_packed_bits, write_cvox, write_labels, write_packed_bits,
    CvoxHeader, FormatError,
};
pub use synth::{render_depth, synth_scene, SynthError, SynthScene};

use crate::geometry::VolumeSpec;

/// Per-voxel class ids over a [`VolumeSpec`], x-major. Ids are either raw
/// dataset labels or remapped train ids in `0..N` with 255 = ignore.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub spec: VolumeSpec,
    pub labels: Vec<u16>,
}

impl LabelGrid {
    pub fn new(spec: VolumeSpec, labels: Vec<u16>) -> Self {
        assert_eq!(labels.len(), spec.voxel_count(), "label grid size mismatch");
        LabelGrid { spec, labels }
    }

    pub fn filled(spec: VolumeSpec, v: u16) -> Self {
        let n = spec.voxel_count();
        LabelGrid { spec, labels: vec![v; n] }
    }

    pub fn at(&self, v: [usize; 3]) -> u16 {
        self.labels[self.spec.linear_index(v)]
    }

    pub fn set(&mut self, v: [usize; 3], label: u16) {
        let i = self.spec.linear_index(v);
        self.labels[i] = label;
    }
}

/// Remap raw dataset ids to train ids; raw ids absent from the table become
/// the ignore label.
pub fn remap_labels(grid: &LabelGrid, table: &ClassTable) -> LabelGrid {
    let labels = grid.labels.iter().map(|&raw| table.remap_raw(raw)).collect();
    LabelGrid { spec: grid.spec, labels }
}
