//! Network building blocks over the tape: a named parameter store, linear
//! and convolution layers, and the small 3D UNet used by the voxel encoders.
//!
//! Models are structs of layer descriptors (names and hyperparameters); the
//! tensors themselves live in a [`ParamStore`]. Each training step binds the
//! store onto a fresh tape, runs forward/backward, and applies updates back
//! into the store.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    read_manifest, write_manifest, Scalar, SnapshotError, Tape, TensorData, TensorId,
};

/// Named tensors owned by a model between steps.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, TensorData<T>>,
}

/// Tape handles for every parameter of a store, created once per step.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    ids: BTreeMap<String, TensorId>,
}

impl Bound {
    pub fn from_ids(ids: BTreeMap<String, TensorId>) -> Self {
        Bound { ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: TensorData<T>) {
        let prev = self.tensors.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Replace an existing tensor (same shape), for tests and ablations.
    pub fn set(&mut self, name: &str, t: TensorData<T>) {
        let slot = self.tensors.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
        assert_eq!(slot.shape(), t.shape(), "shape change for {name}");
        *slot = t;
    }

    pub fn get(&self, name: &str) -> &TensorData<T> {
        self.tensors.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut TensorData<T> {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Register every tensor as a gradient-tracked tape leaf.
    pub fn bind_all(&self, tape: &mut Tape<T>) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t.clone())))
            .collect();
        Bound { ids }
    }

    /// Register every tensor as a constant (frozen) tape leaf.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect();
        Bound { ids }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Add uniform noise to every tensor. Gradient checks use this to move
    /// zero-initialized biases off ReLU kinks, where central differences are
    /// meaningless.
    pub fn perturb(&mut self, rng: &mut ChaCha8Rng, amplitude: f64) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v += T::from_f64(rng.random_range(-amplitude..amplitude));
            }
        }
    }

    /// Bitwise fingerprint, used to assert parameter freezes.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in &self.tensors {
            for b in name.bytes() {
                mix(b as u64);
            }
            for v in t.data() {
                mix((v.as_f64() as f32).to_bits() as u64);
            }
        }
        h
    }

    pub fn save(&self, dir: &Path) -> Result<(), SnapshotError> {
        let map: BTreeMap<String, TensorData<T>> =
            self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        write_manifest(dir, &map)
    }

    pub fn load(dir: &Path) -> Result<Self, SnapshotError> {
        Ok(ParamStore { tensors: read_manifest(dir)? })
    }

    /// Load tensors into an already-initialized store, checking that names
    /// and shapes agree with the model architecture.
    pub fn load_into(&mut self, dir: &Path) -> Result<(), SnapshotError> {
        let loaded: BTreeMap<String, TensorData<T>> = read_manifest(dir)?;
        for (name, t) in loaded {
            let slot = self
                .tensors
                .get_mut(&name)
                .unwrap_or_else(|| panic!("checkpoint has unknown parameter {name}"));
            assert_eq!(
                slot.shape(),
                t.shape(),
                "checkpoint shape mismatch for {name}: {:?} vs {:?}",
                slot.shape(),
                t.shape()
            );
            *slot = t;
        }
        Ok(())
    }
}

/// Kaiming-uniform init: ±sqrt(6/fan_in), matched to ReLU stacks.
fn uniform_init<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> TensorData<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> =
        (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    TensorData::new(shape, data)
}

/// Fully connected layer on row tensors: `x (N, in) -> (N, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        store.insert(&format!("{name}.w"), uniform_init(vec![d_in, d_out], d_in, rng));
        store.insert(&format!("{name}.b"), TensorData::zeros(vec![d_out]));
        Linear { w: format!("{name}.w"), b: format!("{name}.b"), d_in, d_out }
    }

    /// All-zero weights and bias; deformable offset/attention predictors
    /// start here so sampling begins at the reference points.
    pub fn init_zero<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        store.insert(&format!("{name}.w"), TensorData::zeros(vec![d_in, d_out]));
        store.insert(&format!("{name}.b"), TensorData::zeros(vec![d_out]));
        Linear { w: format!("{name}.w"), b: format!("{name}.b"), d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: TensorId) -> TensorId {
        let m = tape.matmul(x, bound.id(&self.w));
        tape.add_bias_last(m, bound.id(&self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        store.insert(
            &format!("{name}.w"),
            uniform_init(vec![c_out, c_in, k, k], c_in * k * k, rng),
        );
        store.insert(&format!("{name}.b"), TensorData::zeros(vec![c_out]));
        Conv2d { w: format!("{name}.w"), b: format!("{name}.b"), stride, padding }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: TensorId) -> TensorId {
        let c = tape.conv2d(x, bound.id(&self.w), self.stride, self.padding);
        tape.add_channel_bias(c, bound.id(&self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        store.insert(
            &format!("{name}.w"),
            uniform_init(vec![c_out, c_in, k, k, k], c_in * k * k * k, rng),
        );
        store.insert(&format!("{name}.b"), TensorData::zeros(vec![c_out]));
        Conv3d { w: format!("{name}.w"), b: format!("{name}.b"), stride, padding }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: TensorId) -> TensorId {
        let c = tape.conv3d(x, bound.id(&self.w), self.stride, self.padding);
        tape.add_channel_bias(c, bound.id(&self.b))
    }
}

/// Two-resolution 3D UNet: full-res encode, strided descent, half-res
/// encode, nearest upsample, decode, skip concat, fuse. Widths `[base,
/// 2*base]`; every volume axis must be even or 1 so the upsample matches the
/// skip.
#[derive(Clone, Debug)]
pub struct UNet3d {
    pub enc0: Conv3d,
    pub down: Conv3d,
    pub enc1: Conv3d,
    pub dec: Conv3d,
    pub fuse: Conv3d,
    pub base: usize,
}

impl UNet3d {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        base: usize,
    ) -> Self {
        UNet3d {
            enc0: Conv3d::init(store, rng, &format!("{name}.enc0"), c_in, base, 3, 1, 1),
            down: Conv3d::init(store, rng, &format!("{name}.down"), base, 2 * base, 3, 2, 1),
            enc1: Conv3d::init(store, rng, &format!("{name}.enc1"), 2 * base, 2 * base, 3, 1, 1),
            dec: Conv3d::init(store, rng, &format!("{name}.dec"), 2 * base, base, 3, 1, 1),
            fuse: Conv3d::init(store, rng, &format!("{name}.fuse"), 2 * base, base, 1, 1, 0),
            base,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: TensorId) -> TensorId {
        let dims: Vec<usize> = tape.shape(x)[1..].to_vec();
        assert!(
            dims.iter().all(|&d| d == 1 || d % 2 == 0),
            "volume dims {dims:?} must be even or 1"
        );
        let e0 = self.enc0.forward(tape, bound, x);
        let e0 = tape.relu(e0);
        let d = self.down.forward(tape, bound, e0);
        let d = tape.relu(d);
        let e1 = self.enc1.forward(tape, bound, d);
        let e1 = tape.relu(e1);
        let half: Vec<usize> = tape.shape(e1)[1..].to_vec();
        let factors = [dims[0] / half[0], dims[1] / half[1], dims[2] / half[2]];
        let up = tape.upsample_nearest3d(e1, factors);
        let dec = self.dec.forward(tape, bound, up);
        let dec = tape.relu(dec);
        let cat = tape.concat_axis0(&[e0, dec]);
        let fused = self.fuse.forward(tape, bound, cat);
        tape.relu(fused)
    }
}

/// Three constant coordinate channels `(3, X, Y, Z)` holding each voxel's
/// normalized center; concatenated to voxel-net inputs so convolutions can
/// condition on position (a plain conv stack is translation invariant and
/// could not otherwise tell ground height from sky).
pub fn coord_channels<T: Scalar>(dims: [usize; 3]) -> TensorData<T> {
    let [dx, dy, dz] = dims;
    let sp = dx * dy * dz;
    let mut data = vec![T::zero(); 3 * sp];
    for x in 0..dx {
        for y in 0..dy {
            for z in 0..dz {
                let i = (x * dy + y) * dz + z;
                data[i] = T::from_f64((x as f64 + 0.5) / dx as f64);
                data[sp + i] = T::from_f64((y as f64 + 0.5) / dy as f64);
                data[2 * sp + i] = T::from_f64((z as f64 + 0.5) / dz as f64);
            }
        }
    }
    TensorData::new(vec![3, dx, dy, dz], data)
}

/// Seeded RNG for parameter init.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_bind_and_checksum() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", TensorData::full(vec![2], 1.5));
        store.insert("b", TensorData::full(vec![3], -0.5));
        let c1 = store.checksum();
        let mut tape = Tape::<f32>::new();
        let bound = store.bind_all(&mut tape);
        assert_eq!(tape.value(bound.id("a")).data(), &[1.5, 1.5]);
        store.get_mut("a").data_mut()[0] = 2.0;
        assert_ne!(store.checksum(), c1);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", TensorData::zeros(vec![1]));
        store.insert("a", TensorData::zeros(vec![1]));
    }

    #[test]
    fn linear_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(0);
        let lin = Linear::init(&mut store, &mut rng, "l", 3, 3);
        let eye = TensorData::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        store.set("l.w", eye);
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let x = tape.constant(TensorData::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = lin.forward(&mut tape, &bound, x);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn unet_preserves_spatial_dims() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = init_rng(1);
        let unet = UNet3d::init(&mut store, &mut rng, "u", 5, 4);
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let x = tape.constant(TensorData::full(vec![5, 8, 8, 2], 0.3));
        let y = unet.forward(&mut tape, &bound, x);
        assert_eq!(tape.shape(y), &[4, 8, 8, 2]);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn unet_gradients_flow_to_all_params() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(2);
        let unet = UNet3d::init(&mut store, &mut rng, "u", 2, 2);
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let x = tape.constant(TensorData::full(vec![2, 4, 4, 2], 0.7));
        let y = unet.forward(&mut tape, &bound, x);
        let sq = tape.mul(y, y);
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        for (name, &id) in bound.iter() {
            assert!(tape.grad(id).is_some(), "no gradient reached {name}");
        }
    }

    #[test]
    fn coord_channels_are_normalized_centers() {
        let c = coord_channels::<f64>([2, 4, 1]);
        assert_eq!(c.shape(), &[3, 2, 4, 1]);
        // Voxel (1, 2, 0): x channel 0.75, y channel 0.625, z channel 0.5.
        let sp = 8;
        let i = (1 * 4 + 2) * 1;
        assert!((c.data()[i] - 0.75).abs() < 1e-12);
        assert!((c.data()[sp + i] - 0.625).abs() < 1e-12);
        assert!((c.data()[2 * sp + i] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_through_store() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut rng = init_rng(3);
        Linear::init(&mut store, &mut rng, "dmf.head", 4, 2);
        store.save(dir.path()).unwrap();
        let loaded = ParamStore::<f32>::load(dir.path()).unwrap();
        assert_eq!(store.checksum(), loaded.checksum());
    }
}
