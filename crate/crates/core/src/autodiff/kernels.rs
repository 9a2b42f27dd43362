//! Dense kernels behind the tape ops: matmul, n-d convolution, grid sampling.
//!
//! Parallel sections split work over independent output elements only, so
//! results are bit-identical regardless of thread count (every output element
//! is reduced by the same sequential loop).

use rayon::prelude::*;

use super::tensor::Scalar;

/// Work sizes below this run serially; rayon overhead dominates otherwise.
const PAR_THRESHOLD: usize = 1 << 14;

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        let min_rows = (4096 / n.max(1)).max(16);
        out.par_chunks_mut(n)
            .with_min_len(min_rows)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    }
    out
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        let arow = &a[i * k..i * k + k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..j * k + k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        let min_rows = (4096 / n.max(1)).max(16);
        out.par_chunks_mut(n)
            .with_min_len(min_rows)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    }
    out
}

/// C[m,n] = A[k,m]ᵀ · B[k,n]
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if m * n <= 4096 {
        // Small output (typical: weight gradients): accumulate outer
        // products while streaming A and B once.
        for kk in 0..k {
            let arow = &a[kk * m..kk * m + m];
            let brow = &b[kk * n..kk * n + n];
            for (i, &av) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        return out;
    }
    let body = |i: usize, row: &mut [T]| {
        for kk in 0..k {
            let av = a[kk * m + i];
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    }
    out
}

/// Cache-blocked transpose of a row-major `(rows, cols)` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    const TILE: usize = 32;
    let mut out = vec![T::zero(); rows * cols];
    for i0 in (0..rows).step_by(TILE) {
        let i1 = (i0 + TILE).min(rows);
        for j0 in (0..cols).step_by(TILE) {
            let j1 = (j0 + TILE).min(cols);
            for i in i0..i1 {
                for j in j0..j1 {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// n-d convolution (cross-correlation, zero padding)
// ---------------------------------------------------------------------------

/// Spatial geometry of one conv op. 2D convolutions use the leading spatial
/// slot as a dummy axis (size 1, kernel 1, stride 1, padding 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub out_dims: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    let padded = input + 2 * padding;
    assert!(
        padded >= kernel,
        "kernel size {kernel} larger than padded input {padded}"
    );
    (padded - kernel) / stride + 1
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        c_out: usize,
        in_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        let out_dims = [
            conv_out_size(in_dims[0], kernel[0], stride[0], padding[0]),
            conv_out_size(in_dims[1], kernel[1], stride[1], padding[1]),
            conv_out_size(in_dims[2], kernel[2], stride[2], padding[2]),
        ];
        ConvGeom { c_in, c_out, in_dims, kernel, out_dims, stride, padding }
    }

    pub fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }
}

/// Forward convolution. `x` is `(C_in, *in_dims)`, `w` is `(C_out, C_in, *kernel)`,
/// output `(C_out, *out_dims)`. Rank-2 callers pass `in_dims[0] == kernel[0] == 1`.
pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let [ix, iy, iz] = g.in_dims;
    let [kx, ky, kz] = g.kernel;
    let [ox, oy, oz] = g.out_dims;
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.padding;
    let in_sp = g.in_spatial();
    let out_sp = g.out_spatial();
    let w_per_co = g.c_in * kx * ky * kz;

    let mut out = vec![T::zero(); g.c_out * out_sp];
    let body = |co: usize, och: &mut [T]| {
        let wco = &w[co * w_per_co..(co + 1) * w_per_co];
        for ci in 0..g.c_in {
            let xch = &x[ci * in_sp..(ci + 1) * in_sp];
            for kxi in 0..kx {
                for kyi in 0..ky {
                    for kzi in 0..kz {
                        let wv = wco[((ci * kx + kxi) * ky + kyi) * kz + kzi];
                        if wv == T::zero() {
                            continue;
                        }
                        // valid oz range: 0 <= oz*sz + kzi - pz < iz
                        let (oz_lo, zi_lo) = if kzi < pz {
                            let need = pz - kzi;
                            let lo = need.div_ceil(sz);
                            (lo, lo * sz + kzi - pz)
                        } else {
                            (0, kzi - pz)
                        };
                        if zi_lo >= iz || oz_lo >= oz {
                            continue;
                        }
                        let span = (iz - zi_lo - 1) / sz + 1;
                        let oz_hi = (oz_lo + span).min(oz);
                        for oxi in 0..ox {
                            let xi = (oxi * sx + kxi).wrapping_sub(px);
                            if xi >= ix {
                                continue;
                            }
                            for oyi in 0..oy {
                                let yi = (oyi * sy + kyi).wrapping_sub(py);
                                if yi >= iy {
                                    continue;
                                }
                                let obase = (oxi * oy + oyi) * oz;
                                let xbase = (xi * iy + yi) * iz;
                                if sz == 1 {
                                    let orow = &mut och[obase + oz_lo..obase + oz_hi];
                                    let xrow = &xch[xbase + zi_lo..xbase + zi_lo + (oz_hi - oz_lo)];
                                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ozi in oz_lo..oz_hi {
                                        let zi = zi_lo + (ozi - oz_lo) * sz;
                                        och[obase + ozi] += wv * xch[xbase + zi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if g.c_out * out_sp * g.c_in * kx * ky * kz >= PAR_THRESHOLD {
        out.par_chunks_mut(out_sp).enumerate().for_each(|(co, och)| body(co, och));
    } else {
        out.chunks_mut(out_sp).enumerate().for_each(|(co, och)| body(co, och));
    }
    out
}

/// Gradient of the conv output w.r.t. its input (gather form, deterministic).
pub fn conv_backward_input<T: Scalar>(d_out: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let [ix, iy, iz] = g.in_dims;
    let [kx, ky, kz] = g.kernel;
    let [ox, oy, oz] = g.out_dims;
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.padding;
    let in_sp = g.in_spatial();
    let out_sp = g.out_spatial();
    let w_per_co = g.c_in * kx * ky * kz;
    let unit_stride = sx == 1 && sy == 1 && sz == 1;

    let mut d_x = vec![T::zero(); g.c_in * in_sp];
    let body = |ci: usize, dch: &mut [T]| {
        for co in 0..g.c_out {
            let dout_ch = &d_out[co * out_sp..(co + 1) * out_sp];
            let wbase = co * w_per_co + ci * kx * ky * kz;
            for kxi in 0..kx {
                for kyi in 0..ky {
                    for kzi in 0..kz {
                        let wv = w[wbase + (kxi * ky + kyi) * kz + kzi];
                        if wv == T::zero() {
                            continue;
                        }
                        if unit_stride {
                            // in = out + k - p: shifted row accumulation.
                            let (zi_lo, oz_lo) = if kzi >= pz {
                                (kzi - pz, 0)
                            } else {
                                (0, pz - kzi)
                            };
                            if zi_lo >= iz || oz_lo >= oz {
                                continue;
                            }
                            let run = (iz - zi_lo).min(oz - oz_lo);
                            for xi in 0..ix {
                                let num = xi + px;
                                if num < kxi || num - kxi >= ox {
                                    continue;
                                }
                                let oxi = num - kxi;
                                for yi in 0..iy {
                                    let num = yi + py;
                                    if num < kyi || num - kyi >= oy {
                                        continue;
                                    }
                                    let oyi = num - kyi;
                                    let dbase = (xi * iy + yi) * iz + zi_lo;
                                    let obase = (oxi * oy + oyi) * oz + oz_lo;
                                    let drow = &mut dch[dbase..dbase + run];
                                    let orow = &dout_ch[obase..obase + run];
                                    for (d, &o) in drow.iter_mut().zip(orow) {
                                        *d += wv * o;
                                    }
                                }
                            }
                            continue;
                        }
                        // Generic strided path: out = (in + p - k) / s.
                        for xi in 0..ix {
                            let num = xi + px;
                            if num < kxi {
                                continue;
                            }
                            let oxs = num - kxi;
                            if oxs % sx != 0 {
                                continue;
                            }
                            let oxi = oxs / sx;
                            if oxi >= ox {
                                continue;
                            }
                            for yi in 0..iy {
                                let num = yi + py;
                                if num < kyi {
                                    continue;
                                }
                                let oys = num - kyi;
                                if oys % sy != 0 {
                                    continue;
                                }
                                let oyi = oys / sy;
                                if oyi >= oy {
                                    continue;
                                }
                                let dbase = (xi * iy + yi) * iz;
                                let obase = (oxi * oy + oyi) * oz;
                                for zi in 0..iz {
                                    let num = zi + pz;
                                    if num < kzi {
                                        continue;
                                    }
                                    let ozs = num - kzi;
                                    if ozs % sz != 0 {
                                        continue;
                                    }
                                    let ozi = ozs / sz;
                                    if ozi >= oz {
                                        continue;
                                    }
                                    dch[dbase + zi] += wv * dout_ch[obase + ozi];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if g.c_in * in_sp * g.c_out * kx * ky * kz >= PAR_THRESHOLD {
        d_x.par_chunks_mut(in_sp).enumerate().for_each(|(ci, dch)| body(ci, dch));
    } else {
        d_x.chunks_mut(in_sp).enumerate().for_each(|(ci, dch)| body(ci, dch));
    }
    d_x
}

/// Gradient of the conv output w.r.t. the kernel (parallel over output channels).
pub fn conv_backward_weight<T: Scalar>(d_out: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let [ix, iy, iz] = g.in_dims;
    let [kx, ky, kz] = g.kernel;
    let [ox, oy, oz] = g.out_dims;
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.padding;
    let in_sp = g.in_spatial();
    let out_sp = g.out_spatial();
    let w_per_co = g.c_in * kx * ky * kz;

    let unit_stride = sx == 1 && sy == 1 && sz == 1;
    let mut d_w = vec![T::zero(); g.c_out * w_per_co];
    let body = |co: usize, dwc: &mut [T]| {
        let dout_ch = &d_out[co * out_sp..(co + 1) * out_sp];
        for ci in 0..g.c_in {
            let xch = &x[ci * in_sp..(ci + 1) * in_sp];
            for kxi in 0..kx {
                for kyi in 0..ky {
                    for kzi in 0..kz {
                        let mut acc = T::zero();
                        if unit_stride {
                            let (zi_lo, oz_lo) = if kzi >= pz {
                                (kzi - pz, 0)
                            } else {
                                (0, pz - kzi)
                            };
                            if zi_lo >= iz || oz_lo >= oz {
                                continue;
                            }
                            let run = (iz - zi_lo).min(oz - oz_lo);
                            for oxi in 0..ox {
                                let xi = (oxi + kxi).wrapping_sub(px);
                                if xi >= ix {
                                    continue;
                                }
                                for oyi in 0..oy {
                                    let yi = (oyi + kyi).wrapping_sub(py);
                                    if yi >= iy {
                                        continue;
                                    }
                                    let obase = (oxi * oy + oyi) * oz + oz_lo;
                                    let xbase = (xi * iy + yi) * iz + zi_lo;
                                    let orow = &dout_ch[obase..obase + run];
                                    let xrow = &xch[xbase..xbase + run];
                                    for (&o, &xv) in orow.iter().zip(xrow) {
                                        acc += o * xv;
                                    }
                                }
                            }
                        } else {
                            for oxi in 0..ox {
                                let xi = (oxi * sx + kxi).wrapping_sub(px);
                                if xi >= ix {
                                    continue;
                                }
                                for oyi in 0..oy {
                                    let yi = (oyi * sy + kyi).wrapping_sub(py);
                                    if yi >= iy {
                                        continue;
                                    }
                                    let obase = (oxi * oy + oyi) * oz;
                                    let xbase = (xi * iy + yi) * iz;
                                    for ozi in 0..oz {
                                        let zi = (ozi * sz + kzi).wrapping_sub(pz);
                                        if zi >= iz {
                                            continue;
                                        }
                                        acc += dout_ch[obase + ozi] * xch[xbase + zi];
                                    }
                                }
                            }
                        }
                        dwc[((ci * kx + kxi) * ky + kyi) * kz + kzi] += acc;
                    }
                }
            }
        }
    };
    if g.c_out * out_sp * g.c_in * kx * ky * kz >= PAR_THRESHOLD {
        d_w.par_chunks_mut(w_per_co).enumerate().for_each(|(co, dwc)| body(co, dwc));
    } else {
        d_w.chunks_mut(w_per_co).enumerate().for_each(|(co, dwc)| body(co, dwc));
    }
    d_w
}

// ---------------------------------------------------------------------------
// grid sampling
// ---------------------------------------------------------------------------

/// One bilinear tap: corner indices, weights, and lerp fractions for a
/// normalized coordinate along one axis of length `n`. Samples address pixel
/// centers: normalized `u` maps to continuous coordinate `u*n - 0.5`.
#[inline]
fn axis_taps(u: f64, n: usize) -> (isize, f64) {
    let c = u * n as f64 - 0.5;
    let i0 = c.floor();
    (i0 as isize, c - i0)
}

#[inline]
fn in_range(i: isize, n: usize) -> bool {
    i >= 0 && (i as usize) < n
}

/// Bilinear sampling of `feat (C,H,W)` at `pts (N,2)` normalized `(x, y)`
/// coordinates. Out-of-range corners contribute zero.
pub fn bilinear_forward<T: Scalar>(
    feat: &[T],
    c: usize,
    h: usize,
    w: usize,
    pts: &[T],
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * c];
    let body = |i: usize, row: &mut [T]| {
        let (x0, fx) = axis_taps(pts[2 * i].as_f64(), w);
        let (y0, fy) = axis_taps(pts[2 * i + 1].as_f64(), h);
        for (dyi, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            let yi = y0 + dyi;
            if !in_range(yi, h) {
                continue;
            }
            for (dxi, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let xi = x0 + dxi;
                if !in_range(xi, w) {
                    continue;
                }
                let wgt = T::from_f64(wx * wy);
                let base = yi as usize * w + xi as usize;
                for (ch, o) in row.iter_mut().enumerate() {
                    *o += wgt * feat[ch * h * w + base];
                }
            }
        }
    };
    if n * c >= PAR_THRESHOLD {
        out.par_chunks_mut(c)
            .with_min_len(256)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        out.chunks_mut(c).enumerate().for_each(|(i, row)| body(i, row));
    }
    out
}

/// Backward of [`bilinear_forward`]: gradients w.r.t. the feature map
/// (scatter, serial) and the points.
pub fn bilinear_backward<T: Scalar>(
    d_out: &[T],
    feat: &[T],
    c: usize,
    h: usize,
    w: usize,
    pts: &[T],
    n: usize,
    d_feat: Option<&mut [T]>,
    d_pts: Option<&mut [T]>,
) {
    if let Some(d_feat) = d_feat {
        for i in 0..n {
            let (x0, fx) = axis_taps(pts[2 * i].as_f64(), w);
            let (y0, fy) = axis_taps(pts[2 * i + 1].as_f64(), h);
            let drow = &d_out[i * c..(i + 1) * c];
            for (dyi, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                let yi = y0 + dyi;
                if !in_range(yi, h) {
                    continue;
                }
                for (dxi, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let xi = x0 + dxi;
                    if !in_range(xi, w) {
                        continue;
                    }
                    let wgt = T::from_f64(wx * wy);
                    let base = yi as usize * w + xi as usize;
                    for (ch, &d) in drow.iter().enumerate() {
                        d_feat[ch * h * w + base] += wgt * d;
                    }
                }
            }
        }
    }
    if let Some(d_pts) = d_pts {
        let body = |i: usize, dp: &mut [T]| {
            let (x0, fx) = axis_taps(pts[2 * i].as_f64(), w);
            let (y0, fy) = axis_taps(pts[2 * i + 1].as_f64(), h);
            let drow = &d_out[i * c..(i + 1) * c];
            let at = |xi: isize, yi: isize, ch: usize| -> f64 {
                if in_range(xi, w) && in_range(yi, h) {
                    feat[ch * h * w + yi as usize * w + xi as usize].as_f64()
                } else {
                    0.0
                }
            };
            let mut dxc = 0.0;
            let mut dyc = 0.0;
            for (ch, &d) in drow.iter().enumerate() {
                let v00 = at(x0, y0, ch);
                let v10 = at(x0 + 1, y0, ch);
                let v01 = at(x0, y0 + 1, ch);
                let v11 = at(x0 + 1, y0 + 1, ch);
                let d = d.as_f64();
                dxc += d * ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy);
                dyc += d * ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx);
            }
            dp[0] = T::from_f64(dxc * w as f64);
            dp[1] = T::from_f64(dyc * h as f64);
        };
        if n * c >= PAR_THRESHOLD {
            d_pts.par_chunks_mut(2)
                .with_min_len(256)
                .enumerate()
                .for_each(|(i, dp)| body(i, dp));
        } else {
            d_pts.chunks_mut(2).enumerate().for_each(|(i, dp)| body(i, dp));
        }
    }
}

/// Up to 8 in-range corners of one trilinear tap: voxel-major row index and
/// interpolation weight.
#[inline]
fn trilinear_corners(
    pts: &[f64; 3],
    dims: [usize; 3],
) -> ([(usize, f64); 8], usize) {
    let [dx, dy, dz] = dims;
    let (x0, fx) = axis_taps(pts[0], dx);
    let (y0, fy) = axis_taps(pts[1], dy);
    let (z0, fz) = axis_taps(pts[2], dz);
    let mut corners = [(0usize, 0.0f64); 8];
    let mut count = 0;
    for (dxi, wx) in [(0isize, 1.0 - fx), (1, fx)] {
        let xi = x0 + dxi;
        if !in_range(xi, dx) {
            continue;
        }
        for (dyi, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            let yi = y0 + dyi;
            if !in_range(yi, dy) {
                continue;
            }
            for (dzi, wz) in [(0isize, 1.0 - fz), (1, fz)] {
                let zi = z0 + dzi;
                if !in_range(zi, dz) {
                    continue;
                }
                corners[count] =
                    ((xi as usize * dy + yi as usize) * dz + zi as usize, wx * wy * wz);
                count += 1;
            }
        }
    }
    (corners, count)
}

/// Trilinear sampling of `vol (C,X,Y,Z)` at `pts (N,3)` normalized `(x, y, z)`.
/// Internally re-lays the volume voxel-major so each corner read is one
/// contiguous channel row.
pub fn trilinear_forward<T: Scalar>(
    vol: &[T],
    c: usize,
    dims: [usize; 3],
    pts: &[T],
    n: usize,
) -> Vec<T> {
    let sp: usize = dims.iter().product();
    let vm = transpose(vol, c, sp); // (sp, C) rows
    let mut out = vec![T::zero(); n * c];
    let body = |i: usize, row: &mut [T]| {
        let p = [
            pts[3 * i].as_f64(),
            pts[3 * i + 1].as_f64(),
            pts[3 * i + 2].as_f64(),
        ];
        let (corners, count) = trilinear_corners(&p, dims);
        for &(base, w) in &corners[..count] {
            let wgt = T::from_f64(w);
            let src = &vm[base * c..(base + 1) * c];
            for (o, &v) in row.iter_mut().zip(src) {
                *o += wgt * v;
            }
        }
    };
    if n * c >= PAR_THRESHOLD {
        out.par_chunks_mut(c)
            .with_min_len(256)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        out.chunks_mut(c).enumerate().for_each(|(i, row)| body(i, row));
    }
    out
}

/// Backward of [`trilinear_forward`].
#[allow(clippy::too_many_arguments)]
pub fn trilinear_backward<T: Scalar>(
    d_out: &[T],
    vol: &[T],
    c: usize,
    dims: [usize; 3],
    pts: &[T],
    n: usize,
    d_vol: Option<&mut [T]>,
    d_pts: Option<&mut [T]>,
) {
    let [dx, dy, dz] = dims;
    let sp = dx * dy * dz;
    if let Some(d_vol) = d_vol {
        // Scatter voxel-major, then fold back channel-major.
        let mut dvm = vec![T::zero(); sp * c];
        for i in 0..n {
            let p = [
                pts[3 * i].as_f64(),
                pts[3 * i + 1].as_f64(),
                pts[3 * i + 2].as_f64(),
            ];
            let (corners, count) = trilinear_corners(&p, dims);
            let drow = &d_out[i * c..(i + 1) * c];
            for &(base, w) in &corners[..count] {
                let wgt = T::from_f64(w);
                let dst = &mut dvm[base * c..(base + 1) * c];
                for (o, &d) in dst.iter_mut().zip(drow) {
                    *o += wgt * d;
                }
            }
        }
        let folded = transpose(&dvm, sp, c);
        for (o, &v) in d_vol.iter_mut().zip(&folded) {
            *o += v;
        }
    }
    if let Some(d_pts) = d_pts {
        let vm = transpose(vol, c, sp);
        let body = |i: usize, dp: &mut [T]| {
            let (x0, fx) = axis_taps(pts[3 * i].as_f64(), dx);
            let (y0, fy) = axis_taps(pts[3 * i + 1].as_f64(), dy);
            let (z0, fz) = axis_taps(pts[3 * i + 2].as_f64(), dz);
            let drow = &d_out[i * c..(i + 1) * c];
            let zero_row = vec![T::zero(); c];
            let row_at = |xi: isize, yi: isize, zi: isize| -> &[T] {
                if in_range(xi, dx) && in_range(yi, dy) && in_range(zi, dz) {
                    let base = (xi as usize * dy + yi as usize) * dz + zi as usize;
                    &vm[base * c..(base + 1) * c]
                } else {
                    &zero_row
                }
            };
            let wx = [1.0 - fx, fx];
            let wy = [1.0 - fy, fy];
            let wz = [1.0 - fz, fz];
            let (mut gx, mut gy, mut gz) = (0.0, 0.0, 0.0);
            for (ai, xi) in [x0, x0 + 1].into_iter().enumerate() {
                for (bi, yi) in [y0, y0 + 1].into_iter().enumerate() {
                    for (ci2, zi) in [z0, z0 + 1].into_iter().enumerate() {
                        let row = row_at(xi, yi, zi);
                        let mut dot = 0.0;
                        for (&d, &v) in drow.iter().zip(row) {
                            dot += d.as_f64() * v.as_f64();
                        }
                        let sx = if ai == 0 { -1.0 } else { 1.0 };
                        let sy = if bi == 0 { -1.0 } else { 1.0 };
                        let sz = if ci2 == 0 { -1.0 } else { 1.0 };
                        gx += dot * sx * wy[bi] * wz[ci2];
                        gy += dot * wx[ai] * sy * wz[ci2];
                        gz += dot * wx[ai] * wy[bi] * sz;
                    }
                }
            }
            dp[0] = T::from_f64(gx * dx as f64);
            dp[1] = T::from_f64(gy * dy as f64);
            dp[2] = T::from_f64(gz * dz as f64);
        };
        if n * c >= PAR_THRESHOLD {
            d_pts.par_chunks_mut(3)
                .with_min_len(256)
                .enumerate()
                .for_each(|(i, dp)| body(i, dp));
        } else {
            d_pts.chunks_mut(3).enumerate().for_each(|(i, dp)| body(i, dp));
        }
    }
}
