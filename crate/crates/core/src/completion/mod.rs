//! Stage 2: lift image features into the proposed voxels with deformable
//! cross-attention, complete the rest of the volume with a learned mask
//! token, fuse the stage-1 features, refine with deformable self-attention,
//! and predict the semantic voxel map. A small 2D decoder reproduces the
//! segmentation masks as an auxiliary distillation target.

mod deform;

pub use deform::{deform_cross_attn, deform_self_attn, AttnTrace, DeformAttn};

use crate::autodiff::{Scalar, Tape, TensorData, TensorId};
use crate::fusion::QueryProposals;
use crate::geometry::{project_voxel_centers, CameraModel, VolumeSpec};
use crate::nn::{Bound, Conv2d, Conv3d, Linear, ParamStore};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct CompletionConfig {
    /// Embedding width of the voxel space.
    pub dim: usize,
    /// Attention heads.
    pub heads: usize,
    /// Sampling points per head.
    pub points: usize,
    pub dca_layers: usize,
    pub dsa_layers: usize,
    /// Channels of the stage-1 feature volume.
    pub raw_channels: usize,
    /// Class count including empty.
    pub n_classes: usize,
    /// Binary mask channels predicted by the 2D decoder.
    pub n_mask_classes: usize,
    pub vol_dims: [usize; 3],
    /// Add a learned per-voxel embedding to the completed volume before
    /// self-attention.
    pub pos3d: bool,
    /// Nearest-neighbor upsampling of the output volume, 1 or 2 per axis.
    pub head_upsample: [usize; 3],
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            dim: 32,
            heads: 2,
            points: 4,
            dca_layers: 1,
            dsa_layers: 1,
            raw_channels: 32,
            n_classes: 5,
            n_mask_classes: 4,
            vol_dims: [64, 64, 8],
            pos3d: true,
            head_upsample: [1, 1, 1],
        }
    }
}

/// Stage-2 network. Parameter names carry the `cig.` checkpoint prefix.
#[derive(Clone, Debug)]
pub struct CompletionNet<T> {
    pub cfg: CompletionConfig,
    pub store: ParamStore<T>,
    backbone: [Conv2d; 4],
    dca: Vec<DeformAttn>,
    dsa: Vec<DeformAttn>,
    fuse_proj: Conv3d,
    occ_head: Linear,
    sem0: Conv2d,
    sem1: Conv2d,
    sem2: Conv2d,
}

impl<T: Scalar> CompletionNet<T> {
    pub fn init(cfg: CompletionConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let widths = [16usize, 32, 64, d];
        let mut c_in = 3;
        let backbone = std::array::from_fn(|i| {
            let conv =
                Conv2d::init(&mut store, rng, &format!("cig.backbone{i}"), c_in, widths[i], 3, 2, 1);
            c_in = widths[i];
            conv
        });
        let n_vox: usize = cfg.vol_dims.iter().product();
        let emb = |rng: &mut ChaCha8Rng, n: usize| -> TensorData<T> {
            let data: Vec<T> =
                (0..n).map(|_| T::from_f64(rng.random_range(-0.02..0.02))).collect();
            TensorData::new(vec![n / d, d], data)
        };
        store.insert("cig.query_pos", emb(rng, n_vox * d));
        if cfg.pos3d {
            store.insert("cig.pos3d", emb(rng, n_vox * d));
        }
        let token: Vec<T> = (0..d).map(|_| T::from_f64(rng.random_range(-0.02..0.02))).collect();
        store.insert("cig.mask_token", TensorData::new(vec![d], token));
        let dca = (0..cfg.dca_layers)
            .map(|i| {
                DeformAttn::init(&mut store, rng, &format!("cig.dca{i}"), d, d, cfg.heads, cfg.points, 2)
            })
            .collect();
        let dsa = (0..cfg.dsa_layers)
            .map(|i| {
                DeformAttn::init(&mut store, rng, &format!("cig.dsa{i}"), d, d, cfg.heads, cfg.points, 3)
            })
            .collect();
        let fuse_proj = Conv3d::init(&mut store, rng, "cig.fuse", cfg.raw_channels, d, 1, 1, 0);
        let occ_head = Linear::init(&mut store, rng, "cig.occ_head", d, cfg.n_classes);
        let sem0 = Conv2d::init(&mut store, rng, "cig.sem0", d, d, 3, 1, 1);
        let sem1 = Conv2d::init(&mut store, rng, "cig.sem1", d, d, 3, 1, 1);
        let sem2 = Conv2d::init(&mut store, rng, "cig.sem2", d, cfg.n_mask_classes, 1, 1, 0);
        CompletionNet { cfg, store, backbone, dca, dsa, fuse_proj, occ_head, sem0, sem1, sem2 }
    }

    pub fn cast<U: Scalar>(&self) -> CompletionNet<U> {
        CompletionNet {
            cfg: self.cfg,
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            dca: self.dca.clone(),
            dsa: self.dsa.clone(),
            fuse_proj: self.fuse_proj.clone(),
            occ_head: self.occ_head.clone(),
            sem0: self.sem0.clone(),
            sem1: self.sem1.clone(),
            sem2: self.sem2.clone(),
        }
    }

    /// Image backbone: four stride-2 convolutions, so `(3, H, W)` maps to
    /// `(d, H/16, W/16)`. H and W must be divisible by 16.
    pub fn backbone_forward(&self, tape: &mut Tape<T>, bound: &Bound, image: TensorId) -> TensorId {
        let shape = tape.shape(image);
        assert_eq!(shape[0], 3, "backbone expects an RGB image");
        assert!(
            shape[1] % 16 == 0 && shape[2] % 16 == 0,
            "image size {}x{} not divisible by 16",
            shape[1],
            shape[2]
        );
        let mut x = image;
        for (i, conv) in self.backbone.iter().enumerate() {
            x = conv.forward(tape, bound, x);
            if i + 1 < self.backbone.len() {
                x = tape.relu(x);
            }
        }
        x
    }

    /// Lift 2D features into the proposal voxels: initialize queries from
    /// the learned positional table and run the cross-attention stack.
    pub fn lift_queries(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        f2d: TensorId,
        qd: &QueryProposals,
        refs: &[[f64; 2]],
        visible: &[bool],
    ) -> (TensorId, Vec<AttnTrace>) {
        let table = bound.id("cig.query_pos");
        let mut q = tape.index_rows(table, &qd.indices);
        let q_refs: Vec<[f64; 2]> = qd.indices.iter().map(|&i| refs[i]).collect();
        let q_vis: Vec<bool> = qd.indices.iter().map(|&i| visible[i]).collect();
        let mut traces = Vec::new();
        for layer in &self.dca {
            let (out, trace) = deform_cross_attn(tape, layer, bound, f2d, q, &q_refs, &q_vis);
            q = out;
            traces.push(trace);
        }
        (q, traces)
    }

    /// Project the stage-1 volume to the embedding width and add it to the
    /// completed voxel rows.
    pub fn fuse_raw_features(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        completed_rows: TensorId,
        f_raw: TensorId,
    ) -> TensorId {
        let dims = tape.shape(f_raw)[1..].to_vec();
        assert_eq!(
            dims.iter().product::<usize>(),
            tape.shape(completed_rows)[0],
            "stage-1 volume dims disagree with the completed voxel rows"
        );
        let proj = self.fuse_proj.forward(tape, bound, f_raw);
        let rows = volume_to_rows(tape, proj);
        tape.add(completed_rows, rows)
    }

    /// Self-attention refinement over the full volume rows.
    pub fn refine(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        mut rows: TensorId,
        dims: [usize; 3],
    ) -> (TensorId, Vec<AttnTrace>) {
        if self.cfg.pos3d {
            let pos = bound.id("cig.pos3d");
            rows = tape.add(rows, pos);
        }
        let mut traces = Vec::new();
        for layer in &self.dsa {
            let (out, trace) = deform_self_attn(tape, layer, bound, rows, dims);
            rows = out;
            traces.push(trace);
        }
        (rows, traces)
    }

    /// Nearest-neighbor upsampling (factor 1 or 2 per axis) followed by a
    /// per-voxel linear map to class logits `(n_classes, X', Y', Z')`.
    pub fn occupancy_head(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        rows: TensorId,
        dims: [usize; 3],
    ) -> TensorId {
        let d = self.cfg.dim;
        let f = self.cfg.head_upsample;
        let (rows, dims) = if f == [1, 1, 1] {
            (rows, dims)
        } else {
            let maj = tape.transpose2d(rows);
            let vol = tape.reshape(maj, vec![d, dims[0], dims[1], dims[2]]);
            let up = tape.upsample_nearest3d(vol, f);
            let new_dims = [dims[0] * f[0], dims[1] * f[1], dims[2] * f[2]];
            (volume_to_rows(tape, up), new_dims)
        };
        let logits_rows = self.occ_head.forward(tape, bound, rows);
        let maj = tape.transpose2d(logits_rows);
        tape.reshape(maj, vec![self.cfg.n_classes, dims[0], dims[1], dims[2]])
    }

    /// Distillation decoder: two 3x3 convolutions with ReLU, then a 1x1
    /// projection to per-class binary mask logits at the feature resolution.
    pub fn semantic_decoder(&self, tape: &mut Tape<T>, bound: &Bound, f2d: TensorId) -> TensorId {
        let x = self.sem0.forward(tape, bound, f2d);
        let x = tape.relu(x);
        let x = self.sem1.forward(tape, bound, x);
        let x = tape.relu(x);
        self.sem2.forward(tape, bound, x)
    }

    /// Full stage-2 forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: TensorId,
        f_raw: TensorId,
        qd: &QueryProposals,
        spec: &VolumeSpec,
        cam: &CameraModel,
    ) -> StageTwoOutput {
        assert_eq!(spec.dims, self.cfg.vol_dims, "volume spec disagrees with the model");
        let f2d = self.backbone_forward(tape, bound, image);
        let (refs, visible) = project_voxel_centers(spec, cam);
        let (lifted, dca_traces) = self.lift_queries(tape, bound, f2d, qd, &refs, &visible);
        let token = bound.id("cig.mask_token");
        let completed = complete_with_mask_tokens(tape, lifted, qd, token, spec.voxel_count());
        let fused = self.fuse_raw_features(tape, bound, completed, f_raw);
        let (refined, dsa_traces) = self.refine(tape, bound, fused, spec.dims);
        let voxel_logits = self.occupancy_head(tape, bound, refined, spec.dims);
        let sem2d = self.semantic_decoder(tape, bound, f2d);
        StageTwoOutput { voxel_logits, sem2d, dca_traces, dsa_traces }
    }
}

pub struct StageTwoOutput {
    /// `(n_classes, X', Y', Z')` semantic voxel logits.
    pub voxel_logits: TensorId,
    /// `(n_mask_classes, H/16, W/16)` distillation mask logits.
    pub sem2d: TensorId,
    pub dca_traces: Vec<AttnTrace>,
    pub dsa_traces: Vec<AttnTrace>,
}

/// Channel-major volume `(C, X, Y, Z)` to `(V, C)` rows.
pub fn volume_to_rows<T: Scalar>(tape: &mut Tape<T>, vol: TensorId) -> TensorId {
    let shape = tape.shape(vol).to_vec();
    let c = shape[0];
    let v: usize = shape[1..].iter().product();
    let flat = tape.reshape(vol, vec![c, v]);
    tape.transpose2d(flat)
}

/// Scatter the lifted query features into their proposal voxels and fill
/// every other voxel with the shared mask token. Row `i` of `lifted`
/// corresponds to the `i`-th set voxel of `qd`.
pub fn complete_with_mask_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    lifted: TensorId,
    qd: &QueryProposals,
    token: TensorId,
    n_vox: usize,
) -> TensorId {
    assert_eq!(
        tape.shape(lifted)[0],
        qd.count(),
        "lifted row count disagrees with the proposal count"
    );
    assert_eq!(qd.mask.len(), n_vox, "proposal mask length mismatch");
    let holes: Vec<usize> = (0..n_vox).filter(|&i| !qd.mask[i]).collect();
    if holes.is_empty() {
        return tape.scatter_rows(lifted, &qd.indices, n_vox);
    }
    if qd.indices.is_empty() {
        return tape.repeat_row(token, n_vox);
    }
    let filled = tape.scatter_rows(lifted, &qd.indices, n_vox);
    let tokens = tape.repeat_row(token, holes.len());
    let token_vol = tape.scatter_rows(tokens, &holes, n_vox);
    tape.add(filled, token_vol)
}

/// Majority-vote downsampling of a 2D class mask by an integer factor; ties
/// break toward the smaller class value (255 = miss participates like any
/// other value).
pub fn downsample_mask_majority(mask: &[u8], w: usize, h: usize, factor: usize) -> Vec<u8> {
    assert!(w % factor == 0 && h % factor == 0, "mask size not divisible by factor");
    let (ow, oh) = (w / factor, h / factor);
    let mut out = vec![0u8; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut counts = [0u32; 256];
            for dy in 0..factor {
                for dx in 0..factor {
                    counts[mask[(oy * factor + dy) * w + ox * factor + dx] as usize] += 1;
                }
            }
            let mut best = 0usize;
            for v in 1..256 {
                if counts[v] > counts[best] {
                    best = v;
                }
            }
            out[oy * ow + ox] = best as u8;
        }
    }
    out
}

/// One-hot binary mask targets `(n_classes, h, w)` from a class mask; values
/// outside `0..n_classes` (ignore/miss) produce all-zero targets.
pub fn mask_to_binary_targets<T: Scalar>(mask: &[u8], n_classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n_classes * mask.len()];
    for (i, &m) in mask.iter().enumerate() {
        if (m as usize) < n_classes {
            out[m as usize * mask.len() + i] = T::one();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::loss_bce;
    use crate::nn::init_rng;

    fn small_cfg() -> CompletionConfig {
        CompletionConfig {
            dim: 4,
            heads: 2,
            points: 2,
            raw_channels: 3,
            n_classes: 3,
            n_mask_classes: 2,
            vol_dims: [4, 4, 2],
            ..Default::default()
        }
    }

    #[test]
    fn backbone_shape_contract() {
        let cfg = CompletionConfig { vol_dims: [2, 2, 2], ..small_cfg() };
        let net = CompletionNet::<f32>::init(cfg, &mut init_rng(0));
        let mut tape = Tape::new();
        let bound = net.store.bind_all(&mut tape);
        let img = tape.constant(TensorData::full(vec![3, 64, 80], 0.25));
        let f = net.backbone_forward(&mut tape, &bound, img);
        assert_eq!(tape.shape(f), &[4, 4, 5]);
    }

    #[test]
    fn backbone_zero_image_gives_constant_bias_map() {
        let mut net = CompletionNet::<f64>::init(small_cfg(), &mut init_rng(1));
        // Zero the final layer and give it a known bias.
        let wshape = net.store.get("cig.backbone3.w").shape().to_vec();
        net.store.set("cig.backbone3.w", TensorData::zeros(wshape));
        net.store.set("cig.backbone3.b", TensorData::new(vec![4], vec![0.5, -1.0, 0.0, 2.0]));
        let mut tape = Tape::new();
        let bound = net.store.bind_all(&mut tape);
        let img = tape.constant(TensorData::zeros(vec![3, 32, 16]));
        let f = tape_value_vec(&mut tape, &net, &bound, img);
        let (h, w) = (2, 1);
        for c in 0..4 {
            for i in 0..h * w {
                let expect = [0.5, -1.0, 0.0, 2.0][c];
                assert_eq!(f[c * h * w + i], expect);
            }
        }
    }

    fn tape_value_vec(
        tape: &mut Tape<f64>,
        net: &CompletionNet<f64>,
        bound: &Bound,
        img: TensorId,
    ) -> Vec<f64> {
        let f = net.backbone_forward(tape, bound, img);
        tape.value(f).data().to_vec()
    }

    #[test]
    #[should_panic(expected = "not divisible by 16")]
    fn backbone_rejects_indivisible_size() {
        let net = CompletionNet::<f32>::init(small_cfg(), &mut init_rng(2));
        let mut tape = Tape::new();
        let bound = net.store.bind_all(&mut tape);
        let img = tape.constant(TensorData::zeros(vec![3, 30, 32]));
        net.backbone_forward(&mut tape, &bound, img);
    }

    #[test]
    fn complete_all_true_scatters_lifted_only() {
        let mut tape = Tape::<f64>::new();
        let qd = QueryProposals::from_mask(vec![true; 4]);
        let lifted = tape.constant(TensorData::new(
            vec![4, 2],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        ));
        let token = tape.constant(TensorData::new(vec![2], vec![9.0, 9.0]));
        let out = complete_with_mask_tokens(&mut tape, lifted, &qd, token, 4);
        assert_eq!(tape.value(out).data(), tape.value(lifted).data());
    }

    #[test]
    fn complete_all_false_fills_tokens() {
        let mut tape = Tape::<f64>::new();
        let qd = QueryProposals::from_mask(vec![false; 5]);
        let lifted = tape.constant(TensorData::zeros(vec![0, 3]));
        let token = tape.constant(TensorData::new(vec![3], vec![0.1, 0.2, 0.3]));
        let out = complete_with_mask_tokens(&mut tape, lifted, &qd, token, 5);
        for row in tape.value(out).data().chunks(3) {
            assert_eq!(row, &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn complete_partitions_voxels() {
        // Every voxel is exactly one of: lifted feature or mask token.
        let mut tape = Tape::<f64>::new();
        let mask = vec![false, true, false, true, false, false, true, false];
        let qd = QueryProposals::from_mask(mask.clone());
        let lifted = tape.constant(TensorData::new(
            vec![3, 2],
            vec![10.0, 11.0, 20.0, 21.0, 30.0, 31.0],
        ));
        let token = tape.constant(TensorData::new(vec![2], vec![-1.0, -2.0]));
        let out = complete_with_mask_tokens(&mut tape, lifted, &qd, token, 8);
        let v = tape.value(out);
        let mut lift_row = 0;
        for (i, &m) in mask.iter().enumerate() {
            let row = &v.data()[i * 2..(i + 1) * 2];
            if m {
                let expect = &tape.value(lifted).data()[lift_row * 2..(lift_row + 1) * 2];
                assert_eq!(row, expect, "voxel {i} should carry its lifted feature");
                lift_row += 1;
            } else {
                assert_eq!(row, &[-1.0, -2.0], "voxel {i} should carry the token");
            }
        }
    }

    #[test]
    #[should_panic(expected = "lifted row count disagrees")]
    fn complete_rejects_count_mismatch() {
        let mut tape = Tape::<f64>::new();
        let qd = QueryProposals::from_mask(vec![true, true, false]);
        let lifted = tape.constant(TensorData::zeros(vec![1, 2]));
        let token = tape.constant(TensorData::zeros(vec![2]));
        complete_with_mask_tokens(&mut tape, lifted, &qd, token, 3);
    }

    #[test]
    fn fuse_zero_raw_is_identity_and_zero_proj_ignores_raw() {
        let mut net = CompletionNet::<f64>::init(small_cfg(), &mut init_rng(3));
        let dims = [4usize, 4, 2];
        let v = 32;
        let rows_data: Vec<f64> = (0..v * 4).map(|i| (i as f64) * 0.01).collect();

        // Zero raw input: output equals the completed rows.
        {
            let mut tape = Tape::new();
            let bound = net.store.bind_all(&mut tape);
            let rows = tape.constant(TensorData::new(vec![v, 4], rows_data.clone()));
            let raw = tape.constant(TensorData::zeros(vec![3, dims[0], dims[1], dims[2]]));
            let out = net.fuse_raw_features(&mut tape, &bound, rows, raw);
            assert_eq!(tape.value(out).data(), tape.value(rows).data());
        }

        // Zero projection: output independent of raw contents.
        let wshape = net.store.get("cig.fuse.w").shape().to_vec();
        net.store.set("cig.fuse.w", TensorData::zeros(wshape));
        let run = |fill: f64| {
            let mut tape = Tape::new();
            let bound = net.store.bind_all(&mut tape);
            let rows = tape.constant(TensorData::new(vec![v, 4], rows_data.clone()));
            let raw = tape.constant(TensorData::full(vec![3, dims[0], dims[1], dims[2]], fill));
            let out = net.fuse_raw_features(&mut tape, &bound, rows, raw);
            tape.value(out).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(0.7), run(-3.1));
    }

    #[test]
    fn fuse_projection_receives_gradient() {
        let net = CompletionNet::<f64>::init(small_cfg(), &mut init_rng(4));
        let mut tape = Tape::new();
        let bound = net.store.bind_all(&mut tape);
        let rows = tape.constant(TensorData::full(vec![32, 4], 0.1));
        let raw_data: Vec<f64> = (0..3 * 32).map(|i| (i as f64) * 0.02 - 0.3).collect();
        let raw = tape.constant(TensorData::new(vec![3, 4, 4, 2], raw_data));
        let out = net.fuse_raw_features(&mut tape, &bound, rows, raw);
        let sq = tape.mul(out, out);
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        let g = tape.grad(bound.id("cig.fuse.w")).expect("projection gradient missing");
        assert!(g.iter().any(|&v| v != 0.0), "gradient did not flow into the fuse projection");
    }

    #[test]
    fn occupancy_head_factor1_identity_extended_linear() {
        // With W = [I; 0] and zero bias, logits equal the first C channels.
        let mut net = CompletionNet::<f64>::init(small_cfg(), &mut init_rng(5));
        let mut w = TensorData::<f64>::zeros(vec![4, 3]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        net.store.set("cig.occ_head.w", w);
        let mut tape = Tape::new();
        let bound = net.store.bind_all(&mut tape);
        let rows_data: Vec<f64> = (0..32 * 4).map(|i| (i as f64) * 0.05 - 1.0).collect();
        let rows = tape.constant(TensorData::new(vec![32, 4], rows_data.clone()));
        let logits = net.occupancy_head(&mut tape, &bound, rows, [4, 4, 2]);
        assert_eq!(tape.shape(logits), &[3, 4, 4, 2]);
        let lv = tape.value(logits);
        for vx in 0..32 {
            for c in 0..3 {
                assert_eq!(lv.data()[c * 32 + vx], rows_data[vx * 4 + c]);
            }
        }
    }

    #[test]
    fn occupancy_head_factor2_upsamples() {
        let cfg = CompletionConfig { head_upsample: [2, 2, 2], ..small_cfg() };
        let net = CompletionNet::<f64>::init(cfg, &mut init_rng(6));
        let mut tape = Tape::new();
        let bound = net.store.bind_all(&mut tape);
        let rows = tape.constant(TensorData::full(vec![32, 4], 0.2));
        let logits = net.occupancy_head(&mut tape, &bound, rows, [4, 4, 2]);
        assert_eq!(tape.shape(logits), &[3, 8, 8, 4]);
    }

    #[test]
    fn semantic_decoder_zero_final_layer_gives_ln2_bce() {
        let mut net = CompletionNet::<f64>::init(small_cfg(), &mut init_rng(7));
        let wshape = net.store.get("cig.sem2.w").shape().to_vec();
        net.store.set("cig.sem2.w", TensorData::zeros(wshape));
        let mut tape = Tape::new();
        let bound = net.store.bind_all(&mut tape);
        let f2d = tape.constant(TensorData::full(vec![4, 3, 5], 0.4));
        let logits = net.semantic_decoder(&mut tape, &bound, f2d);
        assert_eq!(tape.shape(logits), &[2, 3, 5], "spatial dims preserved");
        let targets = TensorData::new(
            vec![2, 3, 5],
            (0..30).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        );
        let l = loss_bce(&mut tape, logits, &targets);
        assert!((tape.value(l).data()[0] - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn majority_downsample_votes_and_breaks_ties_low() {
        // 4x4 mask, factor 2: each 2x2 block votes.
        #[rustfmt::skip]
        let mask = vec![
            1, 1, 2, 3,
            1, 0, 2, 2,
            255, 255, 0, 1,
            255, 5, 1, 0,
        ];
        let out = downsample_mask_majority(&mask, 4, 4, 2);
        assert_eq!(out, vec![1, 2, 255, 0]);
    }

    #[test]
    fn binary_targets_ignore_out_of_range() {
        let mask = vec![0u8, 1, 255, 1];
        let t: Vec<f64> = mask_to_binary_targets(&mask, 2);
        assert_eq!(t, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
