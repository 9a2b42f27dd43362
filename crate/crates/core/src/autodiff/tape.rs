use thiserror::Error;

use super::kernels::{self, ConvGeom};
use super::tensor::{Scalar, TensorData};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward root must be a scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),
    #[error("tensor id {0} is not on this tape")]
    NotOnTape(usize),
}

struct Node<T> {
    value: TensorData<T>,
    requires_grad: bool,
}

enum Op<T> {
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Div { a: usize, b: usize, out: usize },
    AddScalar { a: usize, out: usize },
    MulScalar { a: usize, c: T, out: usize },
    Neg { a: usize, out: usize },
    Relu { a: usize, out: usize },
    Exp { a: usize, out: usize },
    Log { a: usize, out: usize },
    Sigmoid { a: usize, out: usize },
    Softplus { a: usize, out: usize },
    Clamp { a: usize, lo: T, hi: T, out: usize },
    Softmax { a: usize, axis: usize, out: usize },
    LogSoftmax { a: usize, axis: usize, out: usize },
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    Transpose2d { a: usize, out: usize, rows: usize, cols: usize },
    Reshape { a: usize, out: usize },
    SliceAxis0 { a: usize, out: usize, start: usize, row: usize, len: usize },
    ConcatAxis0 { parts: Vec<usize>, out: usize, part_elems: Vec<usize> },
    AddN { parts: Vec<usize>, out: usize },
    SumAll { a: usize, out: usize },
    IndexRows { a: usize, out: usize, idx: Vec<usize>, cols: usize },
    ScatterRows { rows: usize, out: usize, idx: Vec<usize>, cols: usize },
    RepeatRow { a: usize, out: usize, n: usize },
    ScaleRows { x: usize, s: usize, out: usize, cols: usize },
    GatherPerRow { a: usize, out: usize, idx: Vec<usize>, cols: usize },
    AddBiasLast { x: usize, b: usize, out: usize, cols: usize },
    AddChannelBias { x: usize, b: usize, out: usize, spatial: usize },
    Conv { x: usize, w: usize, out: usize, geom: ConvGeom },
    BilinearSample2d { feat: usize, pts: usize, out: usize },
    TrilinearSample3d { vol: usize, pts: usize, out: usize },
    UpsampleNearest3d { a: usize, out: usize, factors: [usize; 3] },
    #[cfg(test)]
    MulBuggyGrad { a: usize, out: usize },
}

/// Records forward ops in execution order and replays them in exact reverse
/// order on [`Tape::backward`]. Confined to one logical thread; tensors are
/// immutable once recorded, gradients accumulate across backward calls.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: TensorData<T>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { value, requires_grad });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Record a leaf that does not receive gradients.
    pub fn constant(&mut self, value: TensorData<T>) -> TensorId {
        self.push(value, false)
    }

    /// Record a leaf that accumulates gradients on backward.
    pub fn param(&mut self, value: TensorData<T>) -> TensorId {
        self.push(value, true)
    }

    pub fn value(&self, id: TensorId) -> &TensorData<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf. `None` until a backward pass reaches it.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn out_of(&mut self, shape: Vec<usize>, data: Vec<T>, grad: bool) -> TensorId {
        self.push(TensorData::new(shape, data), grad)
    }

    fn val(&self, id: usize) -> &TensorData<T> {
        &self.nodes[id].value
    }

    // -- elementwise ------------------------------------------------------

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        op: impl Fn(usize, usize, usize) -> Op<T>,
    ) -> TensorId {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        assert_eq!(
            av.shape(),
            bv.shape(),
            "elementwise shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let grad = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let out = self.out_of(av.shape().to_vec(), data, grad);
        self.ops.push(op(a.0, b.0, out.0));
        out
    }

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(T) -> T,
        op: impl Fn(usize, usize) -> Op<T>,
    ) -> TensorId {
        let av = self.val(a.0);
        let data: Vec<T> = av.data().iter().map(|&x| f(x)).collect();
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(av.shape().to_vec(), data, grad);
        self.ops.push(op(a.0, out.0));
        out
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    /// Panics if any divisor is zero (the result would be non-finite).
    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert!(
            self.val(b.0).data().iter().all(|&v| v != T::zero()),
            "division by zero"
        );
        self.binary(a, b, |x, y| x / y, |a, b, out| Op::Div { a, b, out })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: T) -> TensorId {
        self.unary(a, |x| x + c, |a, out| Op::AddScalar { a, out })
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: T) -> TensorId {
        self.unary(a, |x| x * c, |a, out| Op::MulScalar { a, c, out })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| -x, |a, out| Op::Neg { a, out })
    }

    /// Gradient at exactly zero is taken as zero.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, |a, out| Op::Relu { a, out })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.exp(), |a, out| Op::Exp { a, out })
    }

    /// Panics on non-positive inputs (the result would be non-finite).
    pub fn log(&mut self, a: TensorId) -> TensorId {
        assert!(
            self.val(a.0).data().iter().all(|&v| v > T::zero()),
            "log of non-positive value"
        );
        self.unary(a, |x| x.ln(), |a, out| Op::Log { a, out })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid, |a, out| Op::Sigmoid { a, out })
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary(a, softplus, |a, out| Op::Softplus { a, out })
    }

    /// Clamp into `[lo, hi]`; gradient passes through strictly inside the
    /// interval and is zero at and beyond the bounds.
    pub fn clamp(&mut self, a: TensorId, lo: T, hi: T) -> TensorId {
        assert!(lo <= hi, "clamp bounds out of order");
        self.unary(
            a,
            |x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            },
            |a, out| Op::Clamp { a, lo, hi, out },
        )
    }

    // -- normalization ----------------------------------------------------

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let av = self.val(a.0);
        assert!(axis < av.rank(), "softmax axis {axis} out of range for {:?}", av.shape());
        let data = softmax_lanes(av.data(), av.shape(), axis, false);
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(av.shape().to_vec(), data, grad);
        self.ops.push(Op::Softmax { a: a.0, axis, out: out.0 });
        out
    }

    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let av = self.val(a.0);
        assert!(axis < av.rank(), "log_softmax axis {axis} out of range for {:?}", av.shape());
        let data = softmax_lanes(av.data(), av.shape(), axis, true);
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(av.shape().to_vec(), data, grad);
        self.ops.push(Op::LogSoftmax { a: a.0, axis, out: out.0 });
        out
    }

    // -- linear algebra / structure ----------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        assert_eq!(av.rank(), 2, "matmul lhs must be rank 2, got {:?}", av.shape());
        assert_eq!(bv.rank(), 2, "matmul rhs must be rank 2, got {:?}", bv.shape());
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims disagree: {:?} vs {:?}", av.shape(), bv.shape());
        let data = kernels::matmul_nn(av.data(), bv.data(), m, k, n);
        let grad = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let out = self.out_of(vec![m, n], data, grad);
        self.ops.push(Op::Matmul { a: a.0, b: b.0, out: out.0, m, k, n });
        out
    }

    pub fn transpose2d(&mut self, a: TensorId) -> TensorId {
        let av = self.val(a.0);
        assert_eq!(av.rank(), 2, "transpose2d needs rank 2, got {:?}", av.shape());
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        let data = transpose(av.data(), rows, cols);
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(vec![cols, rows], data, grad);
        self.ops.push(Op::Transpose2d { a: a.0, out: out.0, rows, cols });
        out
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let av = self.val(a.0);
        let numel: usize = shape.iter().product();
        assert_eq!(numel, av.numel(), "reshape {:?} -> {:?}", av.shape(), shape);
        let data = av.data().to_vec();
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(shape, data, grad);
        self.ops.push(Op::Reshape { a: a.0, out: out.0 });
        out
    }

    /// Contiguous slice `[start, start+len)` along the first axis.
    pub fn slice_axis0(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let av = self.val(a.0);
        assert!(av.rank() >= 1);
        let d0 = av.shape()[0];
        assert!(start + len <= d0, "slice [{start}, {}) out of axis-0 range {d0}", start + len);
        let row: usize = av.shape()[1..].iter().product();
        let data = av.data()[start * row..(start + len) * row].to_vec();
        let mut shape = av.shape().to_vec();
        shape[0] = len;
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(shape, data, grad);
        self.ops.push(Op::SliceAxis0 { a: a.0, out: out.0, start, row, len });
        out
    }

    /// Concatenate along the first axis; trailing dims must agree.
    pub fn concat_axis0(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let tail: Vec<usize> = self.val(parts[0].0).shape()[1..].to_vec();
        let mut d0 = 0;
        let mut data = Vec::new();
        let mut part_elems = Vec::with_capacity(parts.len());
        let mut grad = false;
        for &p in parts {
            let pv = self.val(p.0);
            assert_eq!(&pv.shape()[1..], &tail[..], "concat trailing dims disagree");
            d0 += pv.shape()[0];
            data.extend_from_slice(pv.data());
            part_elems.push(pv.numel());
            grad |= self.nodes[p.0].requires_grad;
        }
        let mut shape = vec![d0];
        shape.extend_from_slice(&tail);
        let out = self.out_of(shape, data, grad);
        self.ops.push(Op::ConcatAxis0 {
            parts: parts.iter().map(|p| p.0).collect(),
            out: out.0,
            part_elems,
        });
        out
    }

    /// Elementwise sum of any number of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let shape = self.val(parts[0].0).shape().to_vec();
        let mut data = self.val(parts[0].0).data().to_vec();
        let mut grad = self.nodes[parts[0].0].requires_grad;
        for &p in &parts[1..] {
            let pv = self.val(p.0);
            assert_eq!(pv.shape(), &shape[..], "add_n shape mismatch");
            for (o, &v) in data.iter_mut().zip(pv.data()) {
                *o += v;
            }
            grad |= self.nodes[p.0].requires_grad;
        }
        let out = self.out_of(shape, data, grad);
        self.ops.push(Op::AddN { parts: parts.iter().map(|p| p.0).collect(), out: out.0 });
        out
    }

    /// Sum of all elements; reduction order is the flat storage order.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let av = self.val(a.0);
        let mut acc = T::zero();
        for &v in av.data() {
            acc += v;
        }
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(vec![], vec![acc], grad);
        self.ops.push(Op::SumAll { a: a.0, out: out.0 });
        out
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.val(a.0).numel();
        assert!(n > 0);
        let s = self.sum_all(a);
        self.mul_scalar(s, T::from_f64(1.0 / n as f64))
    }

    // -- indexed access -----------------------------------------------------

    /// Gather rows of a `(R, C)` tensor: `out[i] = a[idx[i]]`.
    pub fn index_rows(&mut self, a: TensorId, idx: &[usize]) -> TensorId {
        let av = self.val(a.0);
        assert_eq!(av.rank(), 2, "index_rows needs rank 2, got {:?}", av.shape());
        let (r, cols) = (av.shape()[0], av.shape()[1]);
        assert!(idx.iter().all(|&i| i < r), "row index out of range");
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&av.data()[i * cols..(i + 1) * cols]);
        }
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(vec![idx.len(), cols], data, grad);
        self.ops.push(Op::IndexRows { a: a.0, out: out.0, idx: idx.to_vec(), cols });
        out
    }

    /// Scatter rows of a `(N, C)` tensor into a zeroed `(n_rows, C)` tensor at
    /// strictly unique target indices.
    pub fn scatter_rows(&mut self, rows: TensorId, idx: &[usize], n_rows: usize) -> TensorId {
        let rv = self.val(rows.0);
        assert_eq!(rv.rank(), 2, "scatter_rows needs rank 2, got {:?}", rv.shape());
        assert_eq!(rv.shape()[0], idx.len(), "scatter_rows row count mismatch");
        let cols = rv.shape()[1];
        let mut seen = vec![false; n_rows];
        for &i in idx {
            assert!(i < n_rows, "scatter target {i} out of range {n_rows}");
            assert!(!seen[i], "duplicate scatter target {i}");
            seen[i] = true;
        }
        let mut data = vec![T::zero(); n_rows * cols];
        for (src, &dst) in idx.iter().enumerate() {
            data[dst * cols..(dst + 1) * cols]
                .copy_from_slice(&rv.data()[src * cols..(src + 1) * cols]);
        }
        let grad = self.nodes[rows.0].requires_grad;
        let out = self.out_of(vec![n_rows, cols], data, grad);
        self.ops.push(Op::ScatterRows { rows: rows.0, out: out.0, idx: idx.to_vec(), cols });
        out
    }

    /// Tile a rank-1 tensor into `n` identical rows.
    pub fn repeat_row(&mut self, a: TensorId, n: usize) -> TensorId {
        let av = self.val(a.0);
        assert_eq!(av.rank(), 1, "repeat_row needs rank 1, got {:?}", av.shape());
        let cols = av.shape()[0];
        let mut data = Vec::with_capacity(n * cols);
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(vec![n, cols], data, grad);
        self.ops.push(Op::RepeatRow { a: a.0, out: out.0, n });
        out
    }

    /// Scale row `i` of `x (N, C)` by `s[i]` (`s` rank 1 of length N).
    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> TensorId {
        let (xv, sv) = (self.val(x.0), self.val(s.0));
        assert_eq!(xv.rank(), 2, "scale_rows x must be rank 2");
        assert_eq!(sv.rank(), 1, "scale_rows s must be rank 1");
        assert_eq!(xv.shape()[0], sv.shape()[0], "scale_rows row count mismatch");
        let cols = xv.shape()[1];
        let mut data = Vec::with_capacity(xv.numel());
        for (i, chunk) in xv.data().chunks(cols).enumerate() {
            let sc = sv.data()[i];
            data.extend(chunk.iter().map(|&v| v * sc));
        }
        let grad = self.nodes[x.0].requires_grad || self.nodes[s.0].requires_grad;
        let out = self.out_of(xv.shape().to_vec(), data, grad);
        self.ops.push(Op::ScaleRows { x: x.0, s: s.0, out: out.0, cols });
        out
    }

    /// `out[i] = a[i, idx[i]]` for `a (N, C)`.
    pub fn gather_per_row(&mut self, a: TensorId, idx: &[usize]) -> TensorId {
        let av = self.val(a.0);
        assert_eq!(av.rank(), 2, "gather_per_row needs rank 2");
        let (n, cols) = (av.shape()[0], av.shape()[1]);
        assert_eq!(n, idx.len(), "gather_per_row index count mismatch");
        assert!(idx.iter().all(|&i| i < cols), "column index out of range");
        let data: Vec<T> = idx.iter().enumerate().map(|(i, &j)| av.data()[i * cols + j]).collect();
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(vec![n], data, grad);
        self.ops.push(Op::GatherPerRow { a: a.0, out: out.0, idx: idx.to_vec(), cols });
        out
    }

    /// Add bias `b (C)` to every row of `x (..., C)`.
    pub fn add_bias_last(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let (xv, bv) = (self.val(x.0), self.val(b.0));
        assert_eq!(bv.rank(), 1, "bias must be rank 1");
        let cols = bv.shape()[0];
        assert_eq!(
            *xv.shape().last().expect("bias add on rank-0 tensor"),
            cols,
            "trailing dim mismatch"
        );
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (o, &bb) in chunk.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let grad = self.nodes[x.0].requires_grad || self.nodes[b.0].requires_grad;
        let out = self.out_of(xv.shape().to_vec(), data, grad);
        self.ops.push(Op::AddBiasLast { x: x.0, b: b.0, out: out.0, cols });
        out
    }

    /// Add bias `b (C)` to a channel-major map `x (C, ...)`.
    pub fn add_channel_bias(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let (xv, bv) = (self.val(x.0), self.val(b.0));
        assert_eq!(bv.rank(), 1, "bias must be rank 1");
        let c = bv.shape()[0];
        assert!(xv.rank() >= 1 && xv.shape()[0] == c, "channel dim mismatch");
        let spatial: usize = xv.shape()[1..].iter().product();
        let mut data = xv.data().to_vec();
        for (ch, chunk) in data.chunks_mut(spatial).enumerate() {
            let bb = bv.data()[ch];
            for o in chunk {
                *o += bb;
            }
        }
        let grad = self.nodes[x.0].requires_grad || self.nodes[b.0].requires_grad;
        let out = self.out_of(xv.shape().to_vec(), data, grad);
        self.ops.push(Op::AddChannelBias { x: x.0, b: b.0, out: out.0, spatial });
        out
    }

    // -- convolution / sampling / resampling --------------------------------

    /// 2D cross-correlation of `x (C_in, H, W)` with `w (C_out, C_in, kh, kw)`,
    /// zero padding. Panics if the kernel exceeds the padded input.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, padding: usize) -> TensorId {
        let (xv, wv) = (self.val(x.0), self.val(w.0));
        assert_eq!(xv.rank(), 3, "conv2d input must be (C,H,W), got {:?}", xv.shape());
        assert_eq!(wv.rank(), 4, "conv2d kernel must be (Co,Ci,kh,kw), got {:?}", wv.shape());
        assert_eq!(xv.shape()[0], wv.shape()[1], "conv2d channel mismatch");
        let geom = ConvGeom::new(
            xv.shape()[0],
            wv.shape()[0],
            [1, xv.shape()[1], xv.shape()[2]],
            [1, wv.shape()[2], wv.shape()[3]],
            [1, stride, stride],
            [0, padding, padding],
        );
        let data = kernels::conv_forward(xv.data(), wv.data(), &geom);
        let shape = vec![geom.c_out, geom.out_dims[1], geom.out_dims[2]];
        let grad = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        let out = self.out_of(shape, data, grad);
        self.ops.push(Op::Conv { x: x.0, w: w.0, out: out.0, geom });
        out
    }

    /// 3D cross-correlation of `x (C_in, X, Y, Z)` with `w (C_out, C_in, kx, ky, kz)`.
    pub fn conv3d(&mut self, x: TensorId, w: TensorId, stride: usize, padding: usize) -> TensorId {
        let (xv, wv) = (self.val(x.0), self.val(w.0));
        assert_eq!(xv.rank(), 4, "conv3d input must be (C,X,Y,Z), got {:?}", xv.shape());
        assert_eq!(wv.rank(), 5, "conv3d kernel must be (Co,Ci,kx,ky,kz), got {:?}", wv.shape());
        assert_eq!(xv.shape()[0], wv.shape()[1], "conv3d channel mismatch");
        let geom = ConvGeom::new(
            xv.shape()[0],
            wv.shape()[0],
            [xv.shape()[1], xv.shape()[2], xv.shape()[3]],
            [wv.shape()[2], wv.shape()[3], wv.shape()[4]],
            [stride, stride, stride],
            [padding, padding, padding],
        );
        let data = kernels::conv_forward(xv.data(), wv.data(), &geom);
        let shape = vec![geom.c_out, geom.out_dims[0], geom.out_dims[1], geom.out_dims[2]];
        let grad = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        let out = self.out_of(shape, data, grad);
        self.ops.push(Op::Conv { x: x.0, w: w.0, out: out.0, geom });
        out
    }

    /// Bilinear sampling of `feat (C, H, W)` at `pts (N, 2)` normalized
    /// coordinates; out-of-range samples read zeros. Differentiable in both
    /// the features and the points.
    pub fn bilinear_sample2d(&mut self, feat: TensorId, pts: TensorId) -> TensorId {
        let (fv, pv) = (self.val(feat.0), self.val(pts.0));
        assert_eq!(fv.rank(), 3, "bilinear feat must be (C,H,W), got {:?}", fv.shape());
        assert_eq!(pv.rank(), 2, "bilinear pts must be (N,2), got {:?}", pv.shape());
        assert_eq!(pv.shape()[1], 2, "bilinear pts must be (N,2), got {:?}", pv.shape());
        let (c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        let n = pv.shape()[0];
        let data = kernels::bilinear_forward(fv.data(), c, h, w, pv.data(), n);
        let grad = self.nodes[feat.0].requires_grad || self.nodes[pts.0].requires_grad;
        let out = self.out_of(vec![n, c], data, grad);
        self.ops.push(Op::BilinearSample2d { feat: feat.0, pts: pts.0, out: out.0 });
        out
    }

    /// Trilinear sampling of `vol (C, X, Y, Z)` at `pts (N, 3)`.
    pub fn trilinear_sample3d(&mut self, vol: TensorId, pts: TensorId) -> TensorId {
        let (vv, pv) = (self.val(vol.0), self.val(pts.0));
        assert_eq!(vv.rank(), 4, "trilinear vol must be (C,X,Y,Z), got {:?}", vv.shape());
        assert_eq!(pv.rank(), 2, "trilinear pts must be (N,3), got {:?}", pv.shape());
        assert_eq!(pv.shape()[1], 3, "trilinear pts must be (N,3), got {:?}", pv.shape());
        let c = vv.shape()[0];
        let dims = [vv.shape()[1], vv.shape()[2], vv.shape()[3]];
        let n = pv.shape()[0];
        let data = kernels::trilinear_forward(vv.data(), c, dims, pv.data(), n);
        let grad = self.nodes[vol.0].requires_grad || self.nodes[pts.0].requires_grad;
        let out = self.out_of(vec![n, c], data, grad);
        self.ops.push(Op::TrilinearSample3d { vol: vol.0, pts: pts.0, out: out.0 });
        out
    }

    /// Nearest-neighbor upsampling of `x (C, X, Y, Z)` by per-axis factors of
    /// 1 or 2.
    pub fn upsample_nearest3d(&mut self, a: TensorId, factors: [usize; 3]) -> TensorId {
        let av = self.val(a.0);
        assert_eq!(av.rank(), 4, "upsample input must be (C,X,Y,Z), got {:?}", av.shape());
        assert!(factors.iter().all(|&f| f == 1 || f == 2), "upsample factors must be 1 or 2");
        let c = av.shape()[0];
        let [ix, iy, iz] = [av.shape()[1], av.shape()[2], av.shape()[3]];
        let [fx, fy, fz] = factors;
        let (ox, oy, oz) = (ix * fx, iy * fy, iz * fz);
        let mut data = vec![T::zero(); c * ox * oy * oz];
        for ch in 0..c {
            for xo in 0..ox {
                for yo in 0..oy {
                    for zo in 0..oz {
                        let src = ((ch * ix + xo / fx) * iy + yo / fy) * iz + zo / fz;
                        data[((ch * ox + xo) * oy + yo) * oz + zo] = av.data()[src];
                    }
                }
            }
        }
        let grad = self.nodes[a.0].requires_grad;
        let out = self.out_of(vec![c, ox, oy, oz], data, grad);
        self.ops.push(Op::UpsampleNearest3d { a: a.0, out: out.0, factors });
        out
    }

    /// Multiplies by two but records an intentionally wrong gradient rule;
    /// exists to prove the finite-difference harness detects bad rules.
    #[cfg(test)]
    pub fn mul_two_buggy_grad(&mut self, a: TensorId) -> TensorId {
        let two = T::from_f64(2.0);
        self.unary(a, |x| x * two, |a, out| Op::MulBuggyGrad { a, out })
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar root. Every `requires_grad` leaf ends up
    /// with `grad = ∂root/∂leaf`; calling again without [`Tape::reset_grads`]
    /// accumulates.
    pub fn backward(&mut self, root: TensorId) -> Result<(), TapeError> {
        if root.0 >= self.nodes.len() {
            return Err(TapeError::NotOnTape(root.0));
        }
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(TapeError::RootNotScalar(rv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![T::one()]);
        for op in self.ops.iter().rev() {
            backward_op(op, &self.nodes, &mut adj);
        }
        for (i, a) in adj.into_iter().enumerate() {
            if self.nodes[i].requires_grad {
                if let Some(a) = a {
                    match &mut self.grads[i] {
                        Some(g) => {
                            for (gi, ai) in g.iter_mut().zip(&a) {
                                *gi += *ai;
                            }
                        }
                        slot => *slot = Some(a),
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

use super::kernels::transpose;

/// Per-lane stabilized (log-)softmax along `axis`.
fn softmax_lanes<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut m = x[at(0)];
            for j in 1..len {
                if x[at(j)] > m {
                    m = x[at(j)];
                }
            }
            let mut denom = T::zero();
            for j in 0..len {
                denom += (x[at(j)] - m).exp();
            }
            if log {
                let ld = denom.ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - m - ld;
                }
            } else {
                for j in 0..len {
                    out[at(j)] = (x[at(j)] - m).exp() / denom;
                }
            }
        }
    }
    out
}

/// Add `f`'s contribution into the adjoint slot for node `id` (allocating a
/// zero buffer on first touch). Skipped entirely when the node does not need
/// gradients.
fn acc<T: Scalar>(
    adj: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = &mut adj[id];
    let buf = slot.get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]);
    f(buf);
}

fn backward_op<T: Scalar>(op: &Op<T>, nodes: &[Node<T>], adj: &mut [Option<Vec<T>>]) {
    // Each node has exactly one producing op, and in reverse order every
    // consumer has already deposited its contribution, so taking the output
    // adjoint here is safe.
    macro_rules! take_out {
        ($out:expr) => {
            match adj[*$out].take() {
                Some(g) => g,
                None => return,
            }
        };
    }
    match op {
        Op::Add { a, b, out } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| add_into(buf, &g));
            acc(adj, nodes, *b, |buf| add_into(buf, &g));
        }
        Op::Sub { a, b, out } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| add_into(buf, &g));
            acc(adj, nodes, *b, |buf| {
                for (o, &gi) in buf.iter_mut().zip(&g) {
                    *o -= gi;
                }
            });
        }
        Op::Mul { a, b, out } => {
            let g = take_out!(out);
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            acc(adj, nodes, *a, |buf| {
                for ((o, &gi), &bi) in buf.iter_mut().zip(&g).zip(bv) {
                    *o += gi * bi;
                }
            });
            acc(adj, nodes, *b, |buf| {
                for ((o, &gi), &ai) in buf.iter_mut().zip(&g).zip(av) {
                    *o += gi * ai;
                }
            });
        }
        Op::Div { a, b, out } => {
            let g = take_out!(out);
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            acc(adj, nodes, *a, |buf| {
                for ((o, &gi), &bi) in buf.iter_mut().zip(&g).zip(bv) {
                    *o += gi / bi;
                }
            });
            acc(adj, nodes, *b, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        Op::AddScalar { a, out } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| add_into(buf, &g));
        }
        Op::MulScalar { a, c, out } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| {
                for (o, &gi) in buf.iter_mut().zip(&g) {
                    *o += gi * *c;
                }
            });
        }
        Op::Neg { a, out } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| {
                for (o, &gi) in buf.iter_mut().zip(&g) {
                    *o -= gi;
                }
            });
        }
        Op::Relu { a, out } => {
            let g = take_out!(out);
            let av = nodes[*a].value.data();
            acc(adj, nodes, *a, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    if av[i] > T::zero() {
                        *o += g[i];
                    }
                }
            });
        }
        Op::Exp { a, out } => {
            let g = take_out!(out);
            let ov = nodes[*out].value.data();
            acc(adj, nodes, *a, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o += g[i] * ov[i];
                }
            });
        }
        Op::Log { a, out } => {
            let g = take_out!(out);
            let av = nodes[*a].value.data();
            acc(adj, nodes, *a, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o += g[i] / av[i];
                }
            });
        }
        Op::Sigmoid { a, out } => {
            let g = take_out!(out);
            let ov = nodes[*out].value.data();
            acc(adj, nodes, *a, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o += g[i] * ov[i] * (T::one() - ov[i]);
                }
            });
        }
        Op::Softplus { a, out } => {
            let g = take_out!(out);
            let av = nodes[*a].value.data();
            acc(adj, nodes, *a, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o += g[i] * sigmoid(av[i]);
                }
            });
        }
        Op::Clamp { a, lo, hi, out } => {
            let g = take_out!(out);
            let av = nodes[*a].value.data();
            acc(adj, nodes, *a, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    if av[i] > *lo && av[i] < *hi {
                        *o += g[i];
                    }
                }
            });
        }
        Op::Softmax { a, axis, out } => {
            let g = take_out!(out);
            let ov = nodes[*out].value.data();
            let shape = nodes[*out].value.shape();
            let len = shape[*axis];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            acc(adj, nodes, *a, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[at(j)] * ov[at(j)];
                        }
                        for j in 0..len {
                            buf[at(j)] += ov[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { a, axis, out } => {
            let g = take_out!(out);
            let ov = nodes[*out].value.data();
            let shape = nodes[*out].value.shape();
            let len = shape[*axis];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            acc(adj, nodes, *a, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut gsum = T::zero();
                        for j in 0..len {
                            gsum += g[at(j)];
                        }
                        for j in 0..len {
                            buf[at(j)] += g[at(j)] - ov[at(j)].exp() * gsum;
                        }
                    }
                }
            });
        }
        Op::Matmul { a, b, out, m, k, n } => {
            let g = take_out!(out);
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            acc(adj, nodes, *a, |buf| {
                let da = kernels::matmul_nt(&g, bv, *m, *n, *k);
                add_into(buf, &da);
            });
            acc(adj, nodes, *b, |buf| {
                let db = kernels::matmul_tn(av, &g, *k, *m, *n);
                add_into(buf, &db);
            });
        }
        Op::Transpose2d { a, out, rows, cols } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| {
                // g has shape (cols, rows); transpose back.
                let gt = transpose(&g, *cols, *rows);
                add_into(buf, &gt);
            });
        }
        Op::Reshape { a, out } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| add_into(buf, &g));
        }
        Op::SliceAxis0 { a, out, start, row, len } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| {
                add_into(&mut buf[start * row..(start + len) * row], &g);
            });
        }
        Op::ConcatAxis0 { parts, out, part_elems } => {
            let g = take_out!(out);
            let mut off = 0;
            for (&p, &ne) in parts.iter().zip(part_elems) {
                acc(adj, nodes, p, |buf| add_into(buf, &g[off..off + ne]));
                off += ne;
            }
        }
        Op::AddN { parts, out } => {
            let g = take_out!(out);
            for &p in parts {
                acc(adj, nodes, p, |buf| add_into(buf, &g));
            }
        }
        Op::SumAll { a, out } => {
            let g = take_out!(out);
            let gv = g[0];
            acc(adj, nodes, *a, |buf| {
                for o in buf {
                    *o += gv;
                }
            });
        }
        Op::IndexRows { a, out, idx, cols } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| {
                for (src, &dst) in idx.iter().enumerate() {
                    add_into(
                        &mut buf[dst * cols..(dst + 1) * cols],
                        &g[src * cols..(src + 1) * cols],
                    );
                }
            });
        }
        Op::ScatterRows { rows, out, idx, cols } => {
            let g = take_out!(out);
            acc(adj, nodes, *rows, |buf| {
                for (src, &dst) in idx.iter().enumerate() {
                    add_into(
                        &mut buf[src * cols..(src + 1) * cols],
                        &g[dst * cols..(dst + 1) * cols],
                    );
                }
            });
        }
        Op::RepeatRow { a, out, n } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| {
                let cols = buf.len();
                for i in 0..*n {
                    add_into(buf, &g[i * cols..(i + 1) * cols]);
                }
            });
        }
        Op::ScaleRows { x, s, out, cols } => {
            let g = take_out!(out);
            let (xv, sv) = (nodes[*x].value.data(), nodes[*s].value.data());
            acc(adj, nodes, *x, |buf| {
                for (i, chunk) in buf.chunks_mut(*cols).enumerate() {
                    let sc = sv[i];
                    for (j, o) in chunk.iter_mut().enumerate() {
                        *o += g[i * cols + j] * sc;
                    }
                }
            });
            acc(adj, nodes, *s, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    let mut dot = T::zero();
                    for j in 0..*cols {
                        dot += g[i * cols + j] * xv[i * cols + j];
                    }
                    *o += dot;
                }
            });
        }
        Op::GatherPerRow { a, out, idx, cols } => {
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| {
                for (i, &j) in idx.iter().enumerate() {
                    buf[i * cols + j] += g[i];
                }
            });
        }
        Op::AddBiasLast { x, b, out, cols } => {
            let g = take_out!(out);
            acc(adj, nodes, *x, |buf| add_into(buf, &g));
            acc(adj, nodes, *b, |buf| {
                for chunk in g.chunks(*cols) {
                    add_into(buf, chunk);
                }
            });
        }
        Op::AddChannelBias { x, b, out, spatial } => {
            let g = take_out!(out);
            acc(adj, nodes, *x, |buf| add_into(buf, &g));
            acc(adj, nodes, *b, |buf| {
                for (ch, chunk) in g.chunks(*spatial).enumerate() {
                    let mut s = T::zero();
                    for &v in chunk {
                        s += v;
                    }
                    buf[ch] += s;
                }
            });
        }
        Op::Conv { x, w, out, geom } => {
            let g = take_out!(out);
            let (xv, wv) = (nodes[*x].value.data(), nodes[*w].value.data());
            acc(adj, nodes, *x, |buf| {
                let dx = kernels::conv_backward_input(&g, wv, geom);
                add_into(buf, &dx);
            });
            acc(adj, nodes, *w, |buf| {
                let dw = kernels::conv_backward_weight(&g, xv, geom);
                add_into(buf, &dw);
            });
        }
        Op::BilinearSample2d { feat, pts, out } => {
            let g = take_out!(out);
            let fv = &nodes[*feat].value;
            let pv = &nodes[*pts].value;
            let (c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
            let n = pv.shape()[0];
            let need_feat = nodes[*feat].requires_grad;
            let need_pts = nodes[*pts].requires_grad;
            let mut d_feat = if need_feat { Some(vec![T::zero(); fv.numel()]) } else { None };
            let mut d_pts = if need_pts { Some(vec![T::zero(); pv.numel()]) } else { None };
            kernels::bilinear_backward(
                &g,
                fv.data(),
                c,
                h,
                w,
                pv.data(),
                n,
                d_feat.as_deref_mut(),
                d_pts.as_deref_mut(),
            );
            if let Some(d) = d_feat {
                acc(adj, nodes, *feat, |buf| add_into(buf, &d));
            }
            if let Some(d) = d_pts {
                acc(adj, nodes, *pts, |buf| add_into(buf, &d));
            }
        }
        Op::TrilinearSample3d { vol, pts, out } => {
            let g = take_out!(out);
            let vv = &nodes[*vol].value;
            let pv = &nodes[*pts].value;
            let c = vv.shape()[0];
            let dims = [vv.shape()[1], vv.shape()[2], vv.shape()[3]];
            let n = pv.shape()[0];
            let need_vol = nodes[*vol].requires_grad;
            let need_pts = nodes[*pts].requires_grad;
            let mut d_vol = if need_vol { Some(vec![T::zero(); vv.numel()]) } else { None };
            let mut d_pts = if need_pts { Some(vec![T::zero(); pv.numel()]) } else { None };
            kernels::trilinear_backward(
                &g,
                vv.data(),
                c,
                dims,
                pv.data(),
                n,
                d_vol.as_deref_mut(),
                d_pts.as_deref_mut(),
            );
            if let Some(d) = d_vol {
                acc(adj, nodes, *vol, |buf| add_into(buf, &d));
            }
            if let Some(d) = d_pts {
                acc(adj, nodes, *pts, |buf| add_into(buf, &d));
            }
        }
        Op::UpsampleNearest3d { a, out, factors } => {
            let g = take_out!(out);
            let ov = nodes[*out].value.shape();
            let (c, ox, oy, oz) = (ov[0], ov[1], ov[2], ov[3]);
            let [fx, fy, fz] = *factors;
            let (ix, iy, iz) = (ox / fx, oy / fy, oz / fz);
            acc(adj, nodes, *a, |buf| {
                for ch in 0..c {
                    for xo in 0..ox {
                        for yo in 0..oy {
                            for zo in 0..oz {
                                buf[((ch * ix + xo / fx) * iy + yo / fy) * iz + zo / fz] +=
                                    g[((ch * ox + xo) * oy + yo) * oz + zo];
                            }
                        }
                    }
                }
            });
        }
        #[cfg(test)]
        Op::MulBuggyGrad { a, out } => {
            // Deliberately wrong: claims d/dx (2x) = 1.
            let g = take_out!(out);
            acc(adj, nodes, *a, |buf| add_into(buf, &g));
        }
    }
}

#[inline]
fn add_into<T: Scalar>(buf: &mut [T], g: &[T]) {
    for (o, &v) in buf.iter_mut().zip(g) {
        *o += v;
    }
}
