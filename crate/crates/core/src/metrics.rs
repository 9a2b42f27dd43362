//! Voxel-level evaluation: confusion accumulation, per-class IoU, mIoU,
//! geometric occupancy scores, and the nested range-volume protocol.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{crop_grid, crop_window, GeometryError};
use crate::semkitti::{ClassTable, LabelGrid, IGNORE};

/// Published full-scale benchmark scores, rendered as context in reports.
/// Desk-scale runs are not expected to reproduce them.
pub const REFERENCE_MIOU_51M: f64 = 14.90;
pub const REFERENCE_BASELINE_MIOU_51M: f64 = 13.41;
pub const REFERENCE_IOU_51M: f64 = 44.28;
pub const REFERENCE_PRECISION_51M: f64 = 64.64;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("grid dims mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("prediction label {0} outside {1} classes")]
    PredOutOfRange(u16, usize),
    #[error(transparent)]
    Crop(#[from] GeometryError),
}

/// How classes with zero union enter the mean IoU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MiouMode {
    /// Undefined classes are left out of the mean (default).
    #[default]
    ExcludeUndefined,
    /// Undefined classes count as zero.
    ZeroFill,
}

/// Square count matrix indexed `[gt][pred]`; ignore-labeled and masked
/// voxels are never counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix { n: n_classes, counts: vec![0; n_classes * n_classes], total: 0 }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    /// Tally one prediction/ground-truth pair, optionally excluding voxels
    /// flagged in `invalid`.
    pub fn update(
        &mut self,
        pred: &LabelGrid,
        gt: &LabelGrid,
        invalid: Option<&[bool]>,
    ) -> Result<(), MetricsError> {
        if pred.spec.dims != gt.spec.dims {
            return Err(MetricsError::DimMismatch(pred.spec.dims, gt.spec.dims));
        }
        if let Some(inv) = invalid {
            assert_eq!(inv.len(), gt.labels.len(), "invalid mask length mismatch");
        }
        for i in 0..gt.labels.len() {
            let g = gt.labels[i];
            if g == IGNORE {
                continue;
            }
            if let Some(inv) = invalid {
                if inv[i] {
                    continue;
                }
            }
            let p = pred.labels[i];
            if g as usize >= self.n {
                return Err(MetricsError::PredOutOfRange(g, self.n));
            }
            if p as usize >= self.n {
                return Err(MetricsError::PredOutOfRange(p, self.n));
            }
            self.counts[g as usize * self.n + p as usize] += 1;
            self.total += 1;
        }
        Ok(())
    }

    /// Elementwise sum, for order-independent multi-scene accumulation.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n, other.n);
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    /// Per-class `TP / (TP + FP + FN)`; `None` when the union is zero.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..self.n).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let fn_: u64 = (0..self.n).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let union = tp + fp + fn_;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over the first `n_semantic` classes (the empty class is the
    /// last id and never enters the mean). `None` for an empty matrix.
    pub fn miou(&self, n_semantic: usize, mode: MiouMode) -> Option<f64> {
        let ious = self.iou_per_class();
        let mut sum = 0.0;
        let mut count = 0usize;
        for iou in ious.iter().take(n_semantic) {
            match (iou, mode) {
                (Some(v), _) => {
                    sum += v;
                    count += 1;
                }
                (None, MiouMode::ZeroFill) => {
                    count += 1;
                }
                (None, MiouMode::ExcludeUndefined) => {}
            }
        }
        if count == 0 {
            None
        } else {
            Some(sum / count as f64)
        }
    }

    /// Occupied-vs-empty scores with `empty_id` as the free class. Zero
    /// denominators report as `None`.
    pub fn geometric_scores(&self, empty_id: usize) -> GeoScores {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for g in 0..self.n {
            for p in 0..self.n {
                let c = self.count(g, p);
                match (g != empty_id, p != empty_id) {
                    (true, true) => tp += c,
                    (false, true) => fp += c,
                    (true, false) => fn_ += c,
                    (false, false) => {}
                }
            }
        }
        let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
        GeoScores {
            iou: ratio(tp, tp + fp + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GeoScores {
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Accumulates per-range confusion matrices across scenes.
pub struct RangeEvaluator {
    ranges: Vec<f64>,
    matrices: Vec<ConfusionMatrix>,
}

impl RangeEvaluator {
    pub fn new(n_classes: usize, ranges: &[f64]) -> Self {
        let mut ranges = ranges.to_vec();
        ranges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let matrices = ranges.iter().map(|_| ConfusionMatrix::new(n_classes)).collect();
        RangeEvaluator { ranges, matrices }
    }

    pub fn add_scene(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<(), MetricsError> {
        if pred.spec.dims != gt.spec.dims {
            return Err(MetricsError::DimMismatch(pred.spec.dims, gt.spec.dims));
        }
        for (r, m) in self.ranges.iter().zip(&mut self.matrices) {
            let w = crop_window(&gt.spec, *r)?;
            let dims = w.dims(&gt.spec);
            let sub_spec = crate::geometry::VolumeSpec::new(gt.spec.origin, dims, gt.spec.voxel_size)
                .expect("crop dims are valid");
            let p = LabelGrid::new(sub_spec, crop_grid(&pred.labels, &pred.spec, &w));
            let g = LabelGrid::new(sub_spec, crop_grid(&gt.labels, &gt.spec, &w));
            m.update(&p, &g, None)?;
        }
        Ok(())
    }

    pub fn report(&self, table: &ClassTable, mode: MiouMode) -> RangeReport {
        let rows = self
            .ranges
            .iter()
            .zip(&self.matrices)
            .map(|(&range_m, m)| {
                let geo = m.geometric_scores(table.empty_id() as usize);
                let per_class = m
                    .iou_per_class()
                    .into_iter()
                    .take(table.n_semantic())
                    .enumerate()
                    .map(|(c, iou)| (table.name(c as u16).to_string(), iou))
                    .collect();
                RangeScores {
                    range_m,
                    miou: m.miou(table.n_semantic(), mode),
                    geo,
                    per_class,
                    counted_voxels: m.total(),
                }
            })
            .collect();
        RangeReport { ranges: rows }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RangeScores {
    pub range_m: f64,
    pub miou: Option<f64>,
    #[serde(flatten)]
    pub geo: GeoScores,
    pub per_class: Vec<(String, Option<f64>)>,
    pub counted_voxels: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RangeReport {
    pub ranges: Vec<RangeScores>,
}

impl RangeReport {
    /// Tab-separated table: ranges as columns in ascending order, metric
    /// rows IoU / Precision / Recall / mIoU followed by per-class IoU.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{:.2}", 100.0 * x),
            None => "-".to_string(),
        };
        let mut out = String::from("metric");
        for r in &self.ranges {
            out.push_str(&format!("\t{}m", r.range_m));
        }
        out.push('\n');
        let mut row = |name: &str, vals: Vec<Option<f64>>| {
            out.push_str(name);
            for v in vals {
                out.push('\t');
                out.push_str(&fmt(v));
            }
            out.push('\n');
        };
        row("IoU(%)", self.ranges.iter().map(|r| r.geo.iou).collect());
        row("Precision(%)", self.ranges.iter().map(|r| r.geo.precision).collect());
        row("Recall(%)", self.ranges.iter().map(|r| r.geo.recall).collect());
        row("mIoU", self.ranges.iter().map(|r| r.miou).collect());
        if let Some(first) = self.ranges.first() {
            for (ci, (name, _)) in first.per_class.iter().enumerate() {
                row(name, self.ranges.iter().map(|r| r.per_class[ci].1).collect());
            }
        }
        out.push_str(&format!(
            "# full-scale benchmark reference at 51.2m: mIoU {REFERENCE_MIOU_51M} \
             (best prior {REFERENCE_BASELINE_MIOU_51M}), IoU {REFERENCE_IOU_51M}, \
             precision {REFERENCE_PRECISION_51M}\n"
        ));
        out
    }

    /// JSON document keyed by range: `{range: {miou, iou, precision, recall,
    /// per_class}}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for r in &self.ranges {
            let per_class: serde_json::Map<String, serde_json::Value> = r
                .per_class
                .iter()
                .map(|(name, iou)| (name.clone(), serde_json::json!(iou)))
                .collect();
            obj.insert(
                format!("{}", r.range_m),
                serde_json::json!({
                    "miou": r.miou,
                    "iou": r.geo.iou,
                    "precision": r.geo.precision,
                    "recall": r.geo.recall,
                    "counted_voxels": r.counted_voxels,
                    "per_class": per_class,
                }),
            );
        }
        serde_json::json!({ "ranges": obj })
    }
}

/// Single-pair convenience wrapper over [`RangeEvaluator`].
pub fn evaluate_ranges(
    pred: &LabelGrid,
    gt: &LabelGrid,
    ranges: &[f64],
    table: &ClassTable,
    mode: MiouMode,
) -> Result<RangeReport, MetricsError> {
    let mut ev = RangeEvaluator::new(table.n_classes(), ranges);
    ev.add_scene(pred, gt)?;
    Ok(ev.report(table, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VolumeSpec;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid(spec: VolumeSpec, labels: Vec<u16>) -> LabelGrid {
        LabelGrid::new(spec, labels)
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let spec = VolumeSpec::new([0.0; 3], [2, 2, 2], 1.0).unwrap();
        let labels: Vec<u16> = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let g = grid(spec, labels.clone());
        let mut m = ConfusionMatrix::new(3);
        m.update(&g, &g, None).unwrap();
        for gt in 0..3 {
            for p in 0..3 {
                if gt != p {
                    assert_eq!(m.count(gt, p), 0);
                }
            }
        }
        assert_eq!(m.miou(3, MiouMode::ExcludeUndefined), Some(1.0));
        assert_eq!(m.iou_per_class(), vec![Some(1.0); 3]);
    }

    #[test]
    fn all_ignore_leaves_matrix_unchanged() {
        let spec = VolumeSpec::new([0.0; 3], [2, 1, 1], 1.0).unwrap();
        let gt = grid(spec, vec![IGNORE, IGNORE]);
        let pred = grid(spec, vec![0, 1]);
        let mut m = ConfusionMatrix::new(2);
        m.update(&pred, &gt, None).unwrap();
        assert_eq!(m.total(), 0);
    }

    #[test]
    fn invalid_mask_excludes_voxels() {
        let spec = VolumeSpec::new([0.0; 3], [3, 1, 1], 1.0).unwrap();
        let gt = grid(spec, vec![0, 1, 1]);
        let pred = grid(spec, vec![0, 0, 1]);
        let mut m = ConfusionMatrix::new(2);
        m.update(&pred, &gt, Some(&[false, true, false])).unwrap();
        assert_eq!(m.total(), 2);
        assert_eq!(m.count(1, 0), 0, "masked voxel not counted");
    }

    #[test]
    fn half_overlap_iou() {
        // One class: TP=1, FP=1, FN=0 -> IoU 0.5.
        let spec = VolumeSpec::new([0.0; 3], [2, 1, 1], 1.0).unwrap();
        let gt = grid(spec, vec![0, 1]);
        let pred = grid(spec, vec![0, 0]);
        let mut m = ConfusionMatrix::new(2);
        m.update(&pred, &gt, None).unwrap();
        assert_eq!(m.iou_per_class()[0], Some(0.5));
    }

    #[test]
    fn random_grids_match_brute_force_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = VolumeSpec::new([0.0; 3], [8, 8, 4], 0.5).unwrap();
        let n = spec.voxel_count();
        let gt_l: Vec<u16> =
            (0..n).map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..5) }).collect();
        let pred_l: Vec<u16> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let mut m = ConfusionMatrix::new(5);
        m.update(&grid(spec, pred_l.clone()), &grid(spec, gt_l.clone()), None).unwrap();
        let mut expect = vec![0u64; 25];
        for i in 0..n {
            if gt_l[i] != IGNORE {
                expect[gt_l[i] as usize * 5 + pred_l[i] as usize] += 1;
            }
        }
        for g in 0..5 {
            for p in 0..5 {
                assert_eq!(m.count(g, p), expect[g * 5 + p]);
            }
        }
    }

    #[test]
    fn update_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let spec = VolumeSpec::new([0.0; 3], [4, 4, 2], 0.5).unwrap();
        let n = spec.voxel_count();
        let make = |rng: &mut ChaCha8Rng| -> (LabelGrid, LabelGrid) {
            let gt: Vec<u16> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let pred: Vec<u16> = (0..n).map(|_| rng.random_range(0..4)).collect();
            (grid(spec, pred), grid(spec, gt))
        };
        let (p1, g1) = make(&mut rng);
        let (p2, g2) = make(&mut rng);
        let mut seq = ConfusionMatrix::new(4);
        seq.update(&p1, &g1, None).unwrap();
        seq.update(&p2, &g2, None).unwrap();
        let mut a = ConfusionMatrix::new(4);
        a.update(&p1, &g1, None).unwrap();
        let mut b = ConfusionMatrix::new(4);
        b.update(&p2, &g2, None).unwrap();
        a.merge(&b);
        assert_eq!(seq, a);
    }

    #[test]
    fn geometric_scores_hand_tally() {
        // Predict everything occupied when half is: precision 0.5, recall 1.
        let spec = VolumeSpec::new([0.0; 3], [4, 1, 1], 1.0).unwrap();
        let gt = grid(spec, vec![0, 0, 2, 2]); // empty_id = 2
        let pred = grid(spec, vec![0, 0, 0, 0]);
        let mut m = ConfusionMatrix::new(3);
        m.update(&pred, &gt, None).unwrap();
        let geo = m.geometric_scores(2);
        assert_eq!(geo.precision, Some(0.5));
        assert_eq!(geo.recall, Some(1.0));
        assert_eq!(geo.iou, Some(0.5));
    }

    #[test]
    fn geometric_perfect() {
        let spec = VolumeSpec::new([0.0; 3], [2, 1, 1], 1.0).unwrap();
        let gt = grid(spec, vec![0, 1]);
        let mut m = ConfusionMatrix::new(2);
        m.update(&gt, &gt, None).unwrap();
        let geo = m.geometric_scores(1);
        assert_eq!((geo.iou, geo.precision, geo.recall), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn miou_modes_differ_on_undefined_classes() {
        let spec = VolumeSpec::new([0.0; 3], [2, 1, 1], 1.0).unwrap();
        // Classes 0 and 1 semantic, 2 empty; class 1 never appears.
        let gt = grid(spec, vec![0, 2]);
        let mut m = ConfusionMatrix::new(3);
        m.update(&gt, &gt, None).unwrap();
        assert_eq!(m.miou(2, MiouMode::ExcludeUndefined), Some(1.0));
        assert_eq!(m.miou(2, MiouMode::ZeroFill), Some(0.5));
    }

    #[test]
    fn empty_matrix_miou_is_undefined() {
        let m = ConfusionMatrix::new(3);
        assert_eq!(m.miou(2, MiouMode::ExcludeUndefined), None);
    }

    #[test]
    fn identical_grids_score_one_at_all_ranges() {
        let spec = VolumeSpec::semantic_kitti();
        let mut labels = vec![19u16; spec.voxel_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in labels.iter_mut().step_by(17) {
            *l = rng.random_range(0..19);
        }
        let g = grid(spec, labels);
        let table = ClassTable::semantic_kitti();
        let rep = evaluate_ranges(&g, &g, &[12.8, 25.6, 51.2], &table, MiouMode::default()).unwrap();
        for r in &rep.ranges {
            assert_eq!(r.miou, Some(1.0), "range {}", r.range_m);
        }
    }

    #[test]
    fn distant_error_only_affects_outer_ranges() {
        let spec = VolumeSpec::semantic_kitti();
        let gt_l = vec![19u16; spec.voxel_count()];
        let mut gt_road = gt_l.clone();
        // Road voxels everywhere along x at the lateral center.
        for x in 0..256 {
            gt_road[spec.linear_index([x, 128, 5])] = 0;
        }
        let mut pred_l = gt_road.clone();
        // One error at x = 70 voxels = 14 m: beyond the 12.8 m crop.
        pred_l[spec.linear_index([70, 128, 5])] = 4;
        let table = ClassTable::semantic_kitti();
        let rep = evaluate_ranges(
            &grid(spec, pred_l),
            &grid(spec, gt_road),
            &[12.8, 25.6, 51.2],
            &table,
            MiouMode::default(),
        )
        .unwrap();
        assert_eq!(rep.ranges[0].miou, Some(1.0), "12.8 m unaffected");
        assert!(rep.ranges[1].miou.unwrap() < 1.0, "25.6 m sees the error");
        assert!(rep.ranges[2].miou.unwrap() < 1.0, "51.2 m sees the error");
    }

    #[test]
    fn cropped_evaluation_equals_restricted_full_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let spec = VolumeSpec::new([0.0, -2.0, 0.0], [8, 8, 4], 0.5).unwrap();
        let n = spec.voxel_count();
        let gt_l: Vec<u16> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let pred_l: Vec<u16> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let range = 2.0; // 4 voxels
        let w = crop_window(&spec, range).unwrap();
        // Oracle: evaluate the full grids but only over the crop window.
        let mut oracle = ConfusionMatrix::new(5);
        for x in w.x[0]..w.x[1] {
            for y in w.y[0]..w.y[1] {
                for z in 0..4 {
                    let i = spec.linear_index([x, y, z]);
                    let mut g1 = ConfusionMatrix::new(5);
                    let s1 = VolumeSpec::new([0.0; 3], [1, 1, 1], 1.0).unwrap();
                    g1.update(
                        &grid(s1, vec![pred_l[i]]),
                        &grid(s1, vec![gt_l[i]]),
                        None,
                    )
                    .unwrap();
                    oracle.merge(&g1);
                }
            }
        }
        let mut ev = RangeEvaluator::new(5, &[range]);
        ev.add_scene(&grid(spec, pred_l), &grid(spec, gt_l)).unwrap();
        assert_eq!(ev.matrices[0], oracle);
    }

    #[test]
    fn tsv_layout_and_reference_footer() {
        let spec = VolumeSpec::semantic_kitti();
        let g = grid(spec, vec![19u16; spec.voxel_count()]);
        let table = ClassTable::semantic_kitti();
        let rep =
            evaluate_ranges(&g, &g, &[25.6, 12.8, 51.2], &table, MiouMode::default()).unwrap();
        let tsv = rep.to_tsv();
        let mut lines = tsv.lines();
        assert_eq!(lines.next().unwrap(), "metric\t12.8m\t25.6m\t51.2m");
        assert!(lines.next().unwrap().starts_with("IoU(%)"));
        assert!(lines.next().unwrap().starts_with("Precision(%)"));
        assert!(lines.next().unwrap().starts_with("Recall(%)"));
        assert!(lines.next().unwrap().starts_with("mIoU"));
        assert!(tsv.contains("14.9"), "reference constants rendered");
        let json = rep.to_json();
        assert!(json["ranges"]["12.8"]["miou"].is_null() || json["ranges"]["12.8"]["miou"].is_number());
    }
}
