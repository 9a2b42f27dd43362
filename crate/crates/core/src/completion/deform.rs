//! Deformable attention: each query attends to a small set of learned
//! offset locations around a reference point instead of the full feature
//! map. Offset and weight predictors start at zero, so an untrained layer
//! samples exactly at its reference points with uniform weights.

use crate::autodiff::{Scalar, Tape, TensorData, TensorId};
use crate::nn::{Bound, Linear, ParamStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Multi-head deformable attention parameters. `rank` is 2 for image
/// sampling (offsets per point are (x, y)) and 3 for volume sampling.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub heads: usize,
    pub points: usize,
    pub dim: usize,
    pub rank: usize,
    pub value: Linear,
    pub output: Linear,
    pub offset: Linear,
    pub attn: Linear,
}

impl DeformAttn {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        value_in: usize,
        heads: usize,
        points: usize,
        rank: usize,
    ) -> Self {
        assert!(dim % heads == 0, "embed dim {dim} not divisible by {heads} heads");
        assert!(points >= 1, "need at least one sampling point");
        assert!(rank == 2 || rank == 3);
        DeformAttn {
            heads,
            points,
            dim,
            rank,
            value: Linear::init(store, rng, &format!("{name}.value"), value_in, dim),
            output: Linear::init(store, rng, &format!("{name}.output"), dim, dim),
            offset: Linear::init_zero(store, &format!("{name}.offset"), dim, heads * points * rank),
            attn: Linear::init_zero(store, &format!("{name}.attn"), dim, heads * points),
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Re-randomize this layer for finite-difference checks. Central
    /// differences are invalid when a sample point sits on an interpolation
    /// cell boundary, and self-attention references are exactly voxel
    /// centers (= boundaries of the sampling lattice). This keeps the value,
    /// output, and attention projections generic but gives the offset
    /// predictor tiny weights and a half-cell bias, so every sample lands
    /// mid-cell with margin much larger than the probe step.
    pub fn randomize_for_check<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        sample_dims: &[usize],
        amplitude: f64,
    ) {
        assert_eq!(sample_dims.len(), self.rank);
        let mut noisy = |shape: &[usize], amp: f64| -> TensorData<T> {
            let n: usize = shape.iter().product();
            TensorData::new(
                shape.to_vec(),
                (0..n).map(|_| T::from_f64(rng.random_range(-amp..amp))).collect(),
            )
        };
        for lin in [&self.value, &self.output, &self.attn] {
            let wshape = store.get(&lin.w).shape().to_vec();
            let bshape = store.get(&lin.b).shape().to_vec();
            let w = noisy(&wshape, amplitude);
            store.set(&lin.w, w);
            let b = noisy(&bshape, amplitude);
            store.set(&lin.b, b);
        }
        let max_dim = *sample_dims.iter().max().unwrap() as f64;
        let wshape = store.get(&self.offset.w).shape().to_vec();
        let w = noisy(&wshape, 0.02 / (max_dim * self.dim as f64));
        store.set(&self.offset.w, w);
        let mut b = TensorData::<T>::zeros(vec![self.heads * self.points * self.rank]);
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            let axis = i % self.rank;
            let jitter = rng.random_range(-0.08..0.08);
            *v = T::from_f64((0.5 + jitter) / sample_dims[axis] as f64);
        }
        store.set(&self.offset.b, b);
    }
}

/// Softmaxed attention weights, one `(K, N)` tensor per head; every column
/// sums to 1.
#[derive(Clone, Debug, Default)]
pub struct AttnTrace {
    pub weights: Vec<TensorId>,
}

/// Shared core: project values, predict offsets and weights from the
/// queries, sample per head and point, mix, project, and add the residual.
/// `value_map` is channel-major `(C_in, *sample_dims)`.
fn deform_core<T: Scalar>(
    tape: &mut Tape<T>,
    p: &DeformAttn,
    bound: &Bound,
    value_map: TensorId,
    queries: TensorId,
    refs_flat: &[f64],
) -> (TensorId, AttnTrace) {
    let n = tape.shape(queries)[0];
    assert_eq!(tape.shape(queries)[1], p.dim, "query dim mismatch");
    assert_eq!(refs_flat.len(), n * p.rank, "reference point count mismatch");
    let map_shape = tape.shape(value_map).to_vec();
    let spatial: usize = map_shape[1..].iter().product();
    let hd = p.head_dim();

    // Value projection applied per spatial location.
    let flat = tape.reshape(value_map, vec![map_shape[0], spatial]);
    let rows = tape.transpose2d(flat);
    let vrows = p.value.forward(tape, bound, rows);
    let vmaj = tape.transpose2d(vrows);
    let mut vshape = vec![p.dim];
    vshape.extend_from_slice(&map_shape[1..]);
    let vmap = tape.reshape(vmaj, vshape);

    let offsets = p.offset.forward(tape, bound, queries);
    let offsets_t = tape.transpose2d(offsets); // (M*K*rank, N)
    let attn_logits = p.attn.forward(tape, bound, queries);
    let attn_t = tape.transpose2d(attn_logits); // (M*K, N)
    let refs = tape.constant(TensorData::from_f64_slice(vec![n, p.rank], refs_flat));

    let mut trace = AttnTrace::default();
    let mut head_outputs = Vec::with_capacity(p.heads);
    for m in 0..p.heads {
        let vhead = tape.slice_axis0(vmap, m * hd, hd);
        let logits_m = tape.slice_axis0(attn_t, m * p.points, p.points);
        let weights_m = tape.softmax(logits_m, 0); // per query over K points
        trace.weights.push(weights_m);
        // One sampler call covers all K points of the head.
        let mut point_sets = Vec::with_capacity(p.points);
        for k in 0..p.points {
            let off_rows = tape.slice_axis0(offsets_t, (m * p.points + k) * p.rank, p.rank);
            let off = tape.transpose2d(off_rows); // (N, rank)
            point_sets.push(tape.add(refs, off));
        }
        let all_pts = tape.concat_axis0(&point_sets); // (K*N, rank)
        let samples = if p.rank == 2 {
            tape.bilinear_sample2d(vhead, all_pts)
        } else {
            tape.trilinear_sample3d(vhead, all_pts)
        };
        let mut terms = Vec::with_capacity(p.points);
        for k in 0..p.points {
            let samp = tape.slice_axis0(samples, k * n, n);
            let w_row = tape.slice_axis0(weights_m, k, 1);
            let w = tape.reshape(w_row, vec![n]);
            terms.push(tape.scale_rows(samp, w));
        }
        let mixed = tape.add_n(&terms);
        head_outputs.push(tape.transpose2d(mixed)); // (hd, N)
    }
    let cat = tape.concat_axis0(&head_outputs); // (d, N)
    let cat_rows = tape.transpose2d(cat);
    let proj = p.output.forward(tape, bound, cat_rows);
    let out = tape.add(queries, proj);
    (out, trace)
}

/// Deformable cross-attention from voxel queries into a 2D feature map.
/// Only camera-visible queries attend; invisible ones pass through
/// unchanged. `refs` are normalized image points aligned with the query
/// rows.
pub fn deform_cross_attn<T: Scalar>(
    tape: &mut Tape<T>,
    p: &DeformAttn,
    bound: &Bound,
    f2d: TensorId,
    queries: TensorId,
    refs: &[[f64; 2]],
    visible: &[bool],
) -> (TensorId, AttnTrace) {
    assert_eq!(p.rank, 2, "cross-attention samples a 2D map");
    let n = tape.shape(queries)[0];
    assert_eq!(refs.len(), n);
    assert_eq!(visible.len(), n);
    let idx_vis: Vec<usize> = (0..n).filter(|&i| visible[i]).collect();
    if idx_vis.is_empty() {
        return (queries, AttnTrace::default());
    }
    let idx_invis: Vec<usize> = (0..n).filter(|&i| !visible[i]).collect();
    let q_vis = tape.index_rows(queries, &idx_vis);
    let refs_flat: Vec<f64> =
        idx_vis.iter().flat_map(|&i| [refs[i][0], refs[i][1]]).collect();
    let (updated, trace) = deform_core(tape, p, bound, f2d, q_vis, &refs_flat);
    let out = if idx_invis.is_empty() {
        tape.scatter_rows(updated, &idx_vis, n)
    } else {
        let kept = tape.index_rows(queries, &idx_invis);
        let a = tape.scatter_rows(updated, &idx_vis, n);
        let b = tape.scatter_rows(kept, &idx_invis, n);
        tape.add(a, b)
    };
    (out, trace)
}

/// Deformable self-attention over a voxel feature volume in `(V, d)` row
/// layout; every voxel's reference point is its own normalized center.
pub fn deform_self_attn<T: Scalar>(
    tape: &mut Tape<T>,
    p: &DeformAttn,
    bound: &Bound,
    vol_rows: TensorId,
    dims: [usize; 3],
) -> (TensorId, AttnTrace) {
    assert_eq!(p.rank, 3, "self-attention samples a 3D volume");
    let n = tape.shape(vol_rows)[0];
    assert_eq!(n, dims.iter().product::<usize>(), "row count does not match dims");
    let vmaj = tape.transpose2d(vol_rows);
    let vol = tape.reshape(vmaj, vec![tape.shape(vol_rows)[1], dims[0], dims[1], dims[2]]);
    let mut refs_flat = Vec::with_capacity(n * 3);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                refs_flat.push((x as f64 + 0.5) / dims[0] as f64);
                refs_flat.push((y as f64 + 0.5) / dims[1] as f64);
                refs_flat.push((z as f64 + 0.5) / dims[2] as f64);
            }
        }
    }
    deform_core(tape, p, bound, vol, vol_rows, &refs_flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_multi;
    use crate::nn::init_rng;

    fn identity<T: Scalar>(d: usize) -> TensorData<T> {
        let mut t = TensorData::zeros(vec![d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = T::one();
        }
        t
    }

    /// M=K=1 with identity value/output projections and zero-initialized
    /// offset/weight predictors: the update reduces to a pure bilinear
    /// sample at the reference point.
    #[test]
    fn cross_attention_identity_at_init() {
        let d = 3;
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(0);
        let p = DeformAttn::init(&mut store, &mut rng, "a", d, d, 1, 1, 2);
        store.set("a.value.w", identity(d));
        store.set("a.output.w", identity(d));
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let (h, w) = (5, 6);
        let fdata: Vec<f64> = (0..d * h * w).map(|i| ((i * 7) % 23) as f64 * 0.1).collect();
        let f2d = tape.constant(TensorData::new(vec![d, h, w], fdata));
        let qdata: Vec<f64> = (0..4 * d).map(|i| i as f64 * 0.01).collect();
        let queries = tape.constant(TensorData::new(vec![4, d], qdata));
        let refs = [[0.31, 0.42], [0.63, 0.27], [0.55, 0.71], [0.18, 0.52]];
        let (out, trace) =
            deform_cross_attn(&mut tape, &p, &bound, f2d, queries, &refs, &[true; 4]);
        let refs_flat: Vec<f64> = refs.iter().flatten().copied().collect();
        let pts = tape.constant(TensorData::new(vec![4, 2], refs_flat));
        let expect = tape.bilinear_sample2d(f2d, pts);
        for i in 0..4 {
            for c in 0..d {
                let got = tape.value(out).data()[i * d + c] - tape.value(queries).data()[i * d + c];
                let want = tape.value(expect).data()[i * d + c];
                assert!((got - want).abs() < 1e-6, "query {i} ch {c}: {got} vs {want}");
            }
        }
        // K=1: the single weight is exactly 1.
        for &wid in &trace.weights {
            for &v in tape.value(wid).data() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_identity_at_init() {
        // Zero-init offsets with identity projections: every voxel samples
        // itself, so the output is exactly v + v.
        let d = 2;
        let dims = [3usize, 2, 2];
        let v = 12;
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(1);
        let p = DeformAttn::init(&mut store, &mut rng, "s", d, d, 1, 1, 3);
        store.set("s.value.w", identity(d));
        store.set("s.output.w", identity(d));
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let data: Vec<f64> = (0..v * d).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let rows = tape.constant(TensorData::new(vec![v, d], data));
        let (out, _) = deform_self_attn(&mut tape, &p, &bound, rows, dims);
        for i in 0..v * d {
            let got = tape.value(out).data()[i];
            let want = 2.0 * tape.value(rows).data()[i];
            assert!((got - want).abs() < 1e-6, "elem {i}: {got} vs {want}");
        }
    }

    #[test]
    fn invisible_queries_pass_through() {
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(2);
        let p = DeformAttn::init(&mut store, &mut rng, "a", d, d, 2, 2, 2);
        store.perturb(&mut init_rng(3), 0.2);
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let f2d = tape.constant(TensorData::full(vec![d, 4, 4], 0.5));
        let qdata: Vec<f64> = (0..3 * d).map(|i| i as f64 * 0.1).collect();
        let queries = tape.constant(TensorData::new(vec![3, d], qdata));
        let refs = [[0.4, 0.4], [0.6, 0.6], [0.5, 0.5]];
        let (out, _) = deform_cross_attn(
            &mut tape,
            &p,
            &bound,
            f2d,
            queries,
            &refs,
            &[true, false, true],
        );
        for c in 0..d {
            assert_eq!(
                tape.value(out).data()[d + c],
                tape.value(queries).data()[d + c],
                "invisible query row must be unchanged"
            );
        }
    }

    #[test]
    fn attention_weights_sum_to_one_across_random_configs() {
        let mut rng = init_rng(4);
        for trial in 0..50 {
            let heads = rng.random_range(1..4usize);
            let hd = rng.random_range(1..3usize);
            let d = heads * hd;
            let points = rng.random_range(1..5usize);
            let n = rng.random_range(1..6usize);
            let mut store = ParamStore::<f64>::new();
            let p = DeformAttn::init(&mut store, &mut rng, "a", d, d, heads, points, 2);
            store.perturb(&mut rng, 0.5);
            let mut tape = Tape::new();
            let bound = store.bind_all(&mut tape);
            let f2d = {
                let data: Vec<f64> = (0..d * 6 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
                tape.constant(TensorData::new(vec![d, 6, 5], data))
            };
            let queries = {
                let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                tape.constant(TensorData::new(vec![n, d], data))
            };
            let refs: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)])
                .collect();
            let (_, trace) =
                deform_cross_attn(&mut tape, &p, &bound, f2d, queries, &refs, &vec![true; n]);
            assert_eq!(trace.weights.len(), heads);
            for &wid in &trace.weights {
                let wv = tape.value(wid);
                assert_eq!(wv.shape(), &[points, n]);
                for q in 0..n {
                    let sum: f64 = (0..points).map(|k| wv.data()[k * n + q]).sum();
                    assert!((sum - 1.0).abs() < 1e-6, "trial {trial} sum {sum}");
                }
            }
        }
    }

    #[test]
    fn cross_attention_gradients_pass_fd_check() {
        let d = 4;
        let (heads, points) = (2, 2);
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(5);
        let p = DeformAttn::init(&mut store, &mut rng, "a", d, d, heads, points, 2);
        p.randomize_for_check(&mut store, &mut rng, &[4, 5], 0.15);
        let names: Vec<String> = store.names().cloned().collect();
        let mut tensors: Vec<TensorData<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
        // Inputs join the check as differentiable leaves.
        let fdata: Vec<f64> = (0..d * 5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        tensors.push(TensorData::new(vec![d, 5, 4], fdata));
        let qdata: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        tensors.push(TensorData::new(vec![3, d], qdata));
        let refs = [[0.33, 0.47], [0.61, 0.29], [0.52, 0.66]];
        let err = grad_check_multi(
            |tape, ids| {
                let bound_ids: std::collections::BTreeMap<_, _> =
                    names.iter().cloned().zip(ids.iter().copied()).collect();
                let bound = Bound::from_ids(bound_ids);
                let f2d = ids[ids.len() - 2];
                let queries = ids[ids.len() - 1];
                let (out, _) =
                    deform_cross_attn(tape, &p, &bound, f2d, queries, &refs, &[true; 3]);
                let sq = tape.mul(out, out);
                tape.sum_all(sq)
            },
            &tensors,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "cross-attention grad err {err}");
    }

    #[test]
    fn self_attention_gradients_pass_fd_check() {
        let d = 4;
        let dims = [4usize, 4, 2];
        let v = 32;
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(6);
        let p = DeformAttn::init(&mut store, &mut rng, "s", d, d, 2, 2, 3);
        p.randomize_for_check(&mut store, &mut rng, &[dims[0], dims[1], dims[2]], 0.15);
        let names: Vec<String> = store.names().cloned().collect();
        let mut tensors: Vec<TensorData<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
        let vdata: Vec<f64> = (0..v * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        tensors.push(TensorData::new(vec![v, d], vdata));
        let err = grad_check_multi(
            |tape, ids| {
                let bound_ids: std::collections::BTreeMap<_, _> =
                    names.iter().cloned().zip(ids.iter().copied()).collect();
                let bound = Bound::from_ids(bound_ids);
                let rows = ids[ids.len() - 1];
                let (out, _) = deform_self_attn(tape, &p, &bound, rows, dims);
                let sq = tape.mul(out, out);
                tape.sum_all(sq)
            },
            &tensors,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "self-attention grad err {err}");
    }
}
