//! Stage 1: fuse low-level depth with 2D semantic features into an initial
//! voxel feature volume, emit per-voxel class logits for training, and
//! propose the query voxels that stage 2 will attend from.

use crate::autodiff::{Scalar, Tape, TensorData, TensorId};
use crate::geometry::{
    backproject_depth, project_voxel_centers, voxelize_points, CameraModel, DepthMap,
    OccupancyGrid, VolumeSpec,
};
use crate::loss::logits_to_rows;
use crate::nn::{coord_channels, Bound, Conv3d, ParamStore, UNet3d};
use rand_chacha::ChaCha8Rng;

/// Binary voxel mask selecting stage-2 attention queries, with its set
/// voxels listed in increasing linear order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryProposals {
    pub mask: Vec<bool>,
    pub indices: Vec<usize>,
}

impl QueryProposals {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let indices = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i) } else { None })
            .collect();
        QueryProposals { mask, indices }
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }
}

/// Paint image features onto occupied voxels: every occupied, camera-visible
/// voxel receives the bilinear sample of `f2d` at its projected center; all
/// other voxels stay zero.
pub fn paint_features<T: Scalar>(
    tape: &mut Tape<T>,
    f2d: TensorId,
    occ: &OccupancyGrid,
    cam: &CameraModel,
) -> TensorId {
    let c = tape.shape(f2d)[0];
    let spec = occ.spec;
    let n_vox = spec.voxel_count();
    let (pts, vis) = project_voxel_centers(&spec, cam);
    let idx: Vec<usize> = (0..n_vox).filter(|&i| occ.data[i] && vis[i]).collect();
    let rows = if idx.is_empty() {
        tape.constant(TensorData::zeros(vec![n_vox, c]))
    } else {
        let mut flat = Vec::with_capacity(idx.len() * 2);
        for &i in &idx {
            flat.push(pts[i][0]);
            flat.push(pts[i][1]);
        }
        let pts_t = tape.constant(TensorData::from_f64_slice(vec![idx.len(), 2], &flat));
        let samples = tape.bilinear_sample2d(f2d, pts_t);
        tape.scatter_rows(samples, &idx, n_vox)
    };
    let ch_major = tape.transpose2d(rows);
    tape.reshape(ch_major, vec![c, spec.dims[0], spec.dims[1], spec.dims[2]])
}

#[derive(Clone, Copy, Debug)]
pub struct FusionConfig {
    /// Channels of the 2D semantic feature input.
    pub feat2d_channels: usize,
    /// UNet width at full resolution.
    pub unet_base: usize,
    /// Channels of the fused voxel features handed to stage 2.
    pub raw_channels: usize,
    /// Width of the occupancy proposal net.
    pub prop_base: usize,
    /// Class count including empty.
    pub n_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            feat2d_channels: 4,
            unet_base: 4,
            raw_channels: 32,
            prop_base: 4,
            n_classes: 5,
        }
    }
}

/// Stage-1 network. Parameter names carry the `dmf.` checkpoint prefix.
#[derive(Clone, Debug)]
pub struct FusionNet<T> {
    pub cfg: FusionConfig,
    pub store: ParamStore<T>,
    unet: UNet3d,
    raw_head: Conv3d,
    seg_head: Conv3d,
    prop_unet: UNet3d,
    prop_head: Conv3d,
}

impl<T: Scalar> FusionNet<T> {
    pub fn init(cfg: FusionConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        // Inputs carry 3 extra normalized-coordinate channels.
        let unet = UNet3d::init(&mut store, rng, "dmf.unet", cfg.feat2d_channels + 3, cfg.unet_base);
        let raw_head =
            Conv3d::init(&mut store, rng, "dmf.raw_head", cfg.unet_base, cfg.raw_channels, 1, 1, 0);
        let seg_head =
            Conv3d::init(&mut store, rng, "dmf.seg_head", cfg.raw_channels, cfg.n_classes, 1, 1, 0);
        let prop_unet = UNet3d::init(&mut store, rng, "dmf.prop.unet", 1 + 3, cfg.prop_base);
        let prop_head = Conv3d::init(&mut store, rng, "dmf.prop.head", cfg.prop_base, 2, 1, 1, 0);
        FusionNet { cfg, store, unet, raw_head, seg_head, prop_unet, prop_head }
    }

    pub fn cast<U: Scalar>(&self) -> FusionNet<U> {
        FusionNet {
            cfg: self.cfg,
            store: self.store.cast(),
            unet: self.unet.clone(),
            raw_head: self.raw_head.clone(),
            seg_head: self.seg_head.clone(),
            prop_unet: self.prop_unet.clone(),
            prop_head: self.prop_head.clone(),
        }
    }

    /// Voxelize one depth map into the occupancy input shared by the fusion
    /// and proposal paths.
    pub fn depth_occupancy(depth: &DepthMap, cam: &CameraModel, spec: &VolumeSpec) -> OccupancyGrid {
        voxelize_points(&backproject_depth(depth, cam), spec)
    }

    /// Fused voxel features: paint image features onto the depth occupancy,
    /// then encode with the UNet and project to `raw_channels`.
    pub fn forward_raw(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        f2d: TensorId,
        occ: &OccupancyGrid,
        cam: &CameraModel,
    ) -> TensorId {
        let painted = paint_features(tape, f2d, occ, cam);
        let coords = tape.constant(coord_channels(occ.spec.dims));
        let x = tape.concat_axis0(&[painted, coords]);
        let u = self.unet.forward(tape, bound, x);
        self.raw_head.forward(tape, bound, u)
    }

    /// Per-voxel class logits `(n_classes, X, Y, Z)`; used only by the
    /// stage-1 loss.
    pub fn seg_logits(&self, tape: &mut Tape<T>, bound: &Bound, raw: TensorId) -> TensorId {
        self.seg_head.forward(tape, bound, raw)
    }

    /// Two-channel (empty/occupied) logits of the occupancy proposal net.
    pub fn proposal_logits(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        occ: &OccupancyGrid,
    ) -> TensorId {
        let spec = occ.spec;
        let occ_data: Vec<f64> = occ.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let occ_t = tape.constant(TensorData::from_f64_slice(
            vec![1, spec.dims[0], spec.dims[1], spec.dims[2]],
            &occ_data,
        ));
        let coords = tape.constant(coord_channels(spec.dims));
        let x = tape.concat_axis0(&[occ_t, coords]);
        let u = self.prop_unet.forward(tape, bound, x);
        self.prop_head.forward(tape, bound, u)
    }

    /// Per-voxel occupancy probability from the proposal net (softmax of the
    /// occupied channel), computed off-tape.
    pub fn proposal_probs(&self, occ: &OccupancyGrid) -> Vec<f64> {
        let mut tape = Tape::<T>::new();
        let bound = self.store.bind_frozen(&mut tape);
        let logits = self.proposal_logits(&mut tape, &bound, occ);
        let rows = logits_to_rows(&mut tape, logits);
        let probs = tape.softmax(rows, 1);
        let data = tape.value(probs).data();
        (0..occ.spec.voxel_count()).map(|i| data[i * 2 + 1].as_f64()).collect()
    }

    /// Threshold the occupancy probabilities, union with the raw depth
    /// occupancy, and cap the count. Directly observed voxels are exempt
    /// from the cap, so the proposals always contain the depth occupancy;
    /// predicted-only voxels are kept by descending probability (ties broken
    /// by linear index).
    pub fn propose_queries(
        &self,
        occ: &OccupancyGrid,
        threshold: f64,
        cap: usize,
    ) -> QueryProposals {
        assert!(threshold > 0.0 && threshold < 1.0, "threshold must be in (0,1)");
        let probs = self.proposal_probs(occ);
        let n = occ.spec.voxel_count();
        let mut mask = occ.data.clone();
        let n_raw = mask.iter().filter(|&&m| m).count();
        let mut predicted: Vec<usize> =
            (0..n).filter(|&i| !occ.data[i] && probs[i] >= threshold).collect();
        let budget = cap.saturating_sub(n_raw);
        if predicted.len() > budget {
            predicted.sort_by(|&a, &b| {
                probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b))
            });
            predicted.truncate(budget);
        }
        for i in predicted {
            mask[i] = true;
        }
        QueryProposals::from_mask(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_multi;
    use crate::nn::init_rng;
    use crate::semkitti::synth_scene;

    fn cam() -> CameraModel {
        CameraModel::identity_pose(30.0, 30.0, 15.5, 11.5, 32, 24)
    }

    fn feat2d_tensor<T: Scalar>(tape: &mut Tape<T>, c: usize, h: usize, w: usize) -> TensorId {
        let data: Vec<f64> =
            (0..c * h * w).map(|i| ((i * 31 % 17) as f64) * 0.1 - 0.8).collect();
        tape.constant(TensorData::from_f64_slice(vec![c, h, w], &data))
    }

    #[test]
    fn paint_zero_occupancy_gives_zero_volume() {
        let spec = VolumeSpec::new([-0.8, -0.8, 0.5], [8, 8, 4], 0.2).unwrap();
        let occ = OccupancyGrid::empty(spec);
        let mut tape = Tape::<f64>::new();
        let f2d = feat2d_tensor(&mut tape, 3, 24, 32);
        let painted = paint_features(&mut tape, f2d, &occ, &cam());
        assert_eq!(tape.shape(painted), &[3, 8, 8, 4]);
        assert!(tape.value(painted).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paint_principal_ray_voxel_samples_center() {
        // One occupied voxel on the optical axis: its feature equals the
        // bilinear sample at the principal point.
        let c = cam();
        let spec = VolumeSpec::new([-0.1, -0.1, 2.0], [1, 1, 2], 0.2).unwrap();
        let mut occ = OccupancyGrid::empty(spec);
        occ.data[0] = true; // center (0, 0, 2.1): on the axis
        let mut tape = Tape::<f64>::new();
        let f2d = feat2d_tensor(&mut tape, 3, 24, 32);
        let painted = paint_features(&mut tape, f2d, &occ, &c);
        let p = c.project([0.0, 0.0, 2.1]).unwrap();
        let pts = tape.constant(TensorData::from_f64_slice(vec![1, 2], &[p.norm[0], p.norm[1]]));
        let expect = tape.bilinear_sample2d(f2d, pts);
        for ch in 0..3 {
            let got = tape.value(painted).data()[ch * 2];
            let want = tape.value(expect).data()[ch];
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn paint_matches_per_voxel_oracle() {
        let c = cam();
        let spec = VolumeSpec::new([-0.9, -0.7, 0.4], [8, 8, 4], 0.25).unwrap();
        let mut occ = OccupancyGrid::empty(spec);
        for i in (0..spec.voxel_count()).step_by(3) {
            occ.data[i] = true;
        }
        let mut tape = Tape::<f64>::new();
        let f2d = feat2d_tensor(&mut tape, 2, 24, 32);
        let painted = paint_features(&mut tape, f2d, &occ, &c);
        let painted_v = tape.value(painted).clone();
        let (pts, vis) = project_voxel_centers(&spec, &c);
        let sp = spec.voxel_count();
        for i in 0..sp {
            if occ.data[i] && vis[i] {
                let pt = tape.constant(TensorData::from_f64_slice(vec![1, 2], &[pts[i][0], pts[i][1]]));
                let s = tape.bilinear_sample2d(f2d, pt);
                for ch in 0..2 {
                    let got = painted_v.data()[ch * sp + i];
                    let want = tape.value(s).data()[ch];
                    assert!((got - want).abs() < 1e-12, "voxel {i} ch {ch}");
                }
            } else {
                for ch in 0..2 {
                    assert_eq!(painted_v.data()[ch * sp + i], 0.0, "voxel {i} should be zero");
                }
            }
        }
    }

    #[test]
    fn forward_raw_handles_empty_depth_and_has_shape() {
        let cfg = FusionConfig { unet_base: 2, raw_channels: 6, ..Default::default() };
        let net = FusionNet::<f64>::init(cfg, &mut init_rng(7));
        let spec = VolumeSpec::new([0.0, -0.8, -0.4], [8, 8, 2], 0.2).unwrap();
        let c = cam();
        let depth = DepthMap::zeros(c.width, c.height);
        let occ = FusionNet::<f64>::depth_occupancy(&depth, &c, &spec);
        assert_eq!(occ.count(), 0);
        let mut tape = Tape::new();
        let bound = net.store.bind_all(&mut tape);
        let f2d = feat2d_tensor(&mut tape, 4, 24, 32);
        let raw = net.forward_raw(&mut tape, &bound, f2d, &occ, &c);
        assert_eq!(tape.shape(raw), &[6, 8, 8, 2]);
        assert!(tape.value(raw).all_finite());
    }

    #[test]
    fn zero_image_features_change_raw_on_occupied_voxels() {
        // The fusion path is live: zero vs nonzero 2D features must disagree
        // somewhere on an occupied voxel.
        let spec = VolumeSpec::new([0.0, -6.4, -0.8], [64, 64, 8], 0.2).unwrap();
        let c = CameraModel::forward_pitched(48.0, 48.0, 39.5, 31.5, 80, 64, [-2.0, 0.0, 2.4], 0.35)
            .unwrap();
        let scene = synth_scene(3, &spec, &c).unwrap();
        let cfg = FusionConfig { unet_base: 2, raw_channels: 4, ..Default::default() };
        let net = FusionNet::<f32>::init(cfg, &mut init_rng(8));
        let occ = FusionNet::<f32>::depth_occupancy(&scene.depth, &c, &spec);
        assert!(occ.count() > 0);
        let run = |zero: bool| -> TensorData<f32> {
            let mut tape = Tape::<f32>::new();
            let bound = net.store.bind_all(&mut tape);
            let f = scene.feat2d();
            let data: Vec<f64> =
                if zero { vec![0.0; f.len()] } else { f.iter().map(|&v| v as f64).collect() };
            let f2d = tape.constant(TensorData::from_f64_slice(
                vec![4, c.height, c.width],
                &data,
            ));
            let raw = net.forward_raw(&mut tape, &bound, f2d, &occ, &c);
            tape.value(raw).clone()
        };
        let with = run(false);
        let without = run(true);
        let sp = spec.voxel_count();
        let mut differs = false;
        for i in 0..sp {
            if occ.data[i] {
                for ch in 0..4 {
                    if with.data()[ch * sp + i] != without.data()[ch * sp + i] {
                        differs = true;
                    }
                }
            }
        }
        assert!(differs, "2D features do not influence the fused volume");
    }

    #[test]
    fn proposals_with_huge_negative_bias_equal_raw_occupancy() {
        let cfg = FusionConfig { unet_base: 2, prop_base: 2, raw_channels: 4, ..Default::default() };
        let mut net = FusionNet::<f32>::init(cfg, &mut init_rng(9));
        // Drive the occupied-channel logit to -inf-like values: probability
        // saturates at 0 so thresholding adds nothing to the union floor.
        let b = TensorData::<f32>::new(vec![2], vec![0.0, -1e9]);
        net.store.set("dmf.prop.head.b", b);
        let spec = VolumeSpec::new([0.0, -0.8, -0.4], [8, 8, 2], 0.2).unwrap();
        let mut occ = OccupancyGrid::empty(spec);
        for i in [3usize, 17, 64, 100] {
            occ.data[i] = true;
        }
        let qd = net.propose_queries(&occ, 0.5, spec.voxel_count());
        assert_eq!(qd.mask, occ.data);
        assert_eq!(qd.indices, vec![3, 17, 64, 100]);
    }

    #[test]
    fn proposals_are_superset_of_raw_occupancy() {
        let cfg = FusionConfig { unet_base: 2, prop_base: 2, raw_channels: 4, ..Default::default() };
        let net = FusionNet::<f32>::init(cfg, &mut init_rng(10));
        let spec = VolumeSpec::new([0.0, -0.8, -0.4], [8, 8, 2], 0.2).unwrap();
        let mut occ = OccupancyGrid::empty(spec);
        for i in (0..spec.voxel_count()).step_by(7) {
            occ.data[i] = true;
        }
        // Tight cap: raw voxels are still all kept.
        let qd = net.propose_queries(&occ, 0.5, 3);
        for i in 0..spec.voxel_count() {
            assert!(!occ.data[i] || qd.mask[i], "raw voxel {i} lost");
        }
        // Generous threshold with huge cap still a superset.
        let qd2 = net.propose_queries(&occ, 0.999, usize::MAX);
        for i in 0..spec.voxel_count() {
            assert!(!occ.data[i] || qd2.mask[i]);
        }
        // Indices strictly increasing.
        assert!(qd2.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn stage1_parameter_gradients_pass_fd_check() {
        // Small end-to-end check; the acceptance suite runs the full-size one.
        let cfg = FusionConfig {
            feat2d_channels: 2,
            unet_base: 2,
            raw_channels: 3,
            prop_base: 2,
            n_classes: 3,
        };
        let mut net = FusionNet::<f64>::init(cfg, &mut init_rng(11));
        net.store.perturb(&mut init_rng(12), 0.1);
        let c = cam();
        let spec = VolumeSpec::new([0.0, -0.4, 1.6], [4, 4, 2], 0.2).unwrap();
        let mut occ = OccupancyGrid::empty(spec);
        for i in [1usize, 9, 20, 30] {
            occ.data[i] = true;
        }
        let names: Vec<String> = net.store.names().cloned().collect();
        let tensors: Vec<TensorData<f64>> =
            names.iter().map(|n| net.store.get(n).clone()).collect();
        let err = grad_check_multi(
            |tape, ids| {
                let bound_ids: std::collections::BTreeMap<_, _> =
                    names.iter().cloned().zip(ids.iter().copied()).collect();
                let bound = crate::nn::Bound::from_ids(bound_ids);
                let f2d = {
                    let data: Vec<f64> =
                        (0..2 * 24 * 32).map(|i| ((i % 13) as f64) * 0.05).collect();
                    tape.constant(TensorData::new(vec![2, 24, 32], data))
                };
                let raw = net.forward_raw(tape, &bound, f2d, &occ, &c);
                let seg = net.seg_logits(tape, &bound, raw);
                let s1 = tape.sum_all(raw);
                let sq = tape.mul(seg, seg);
                let s2 = tape.sum_all(sq);
                tape.add(s1, s2)
            },
            &tensors,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "stage-1 grad err {err}");
    }
}
