//! Raw f64 kernels shared by forward ops and their VJPs. No tape
//! interaction, no rounding — callers finalize results.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// C = A(m,k) · B(k,n), row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || k == 0 || n == 0 {
        return out;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
    out
}

pub fn transpose2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// NumPy-style broadcast shape of two operands (right-aligned, 1 stretches).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` viewed as `out_rank`-dimensional with broadcast axes
/// given stride 0.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Elementwise binary op with broadcasting. `op` must be branch-free cheap.
pub fn broadcast_binary(
    a: &[f64],
    ashape: &[usize],
    b: &[f64],
    bshape: &[usize],
    out_shape: &[usize],
    op: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if ashape == bshape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| op(x, y)).collect();
    }
    if b.len() == 1 {
        return a.iter().map(|&x| op(x, b[0])).collect();
    }
    if a.len() == 1 {
        return b.iter().map(|&y| op(a[0], y)).collect();
    }
    let n = numel(out_shape);
    let sa = bcast_strides(ashape, out_shape);
    let sb = bcast_strides(bshape, out_shape);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(op(a[ia], b[ib]));
        // odometer increment
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
    out
}

/// Sums `g` (of `gshape`) down to `target` shape, inverting broadcasting.
pub fn reduce_to_shape(g: &[f64], gshape: &[usize], target: &[usize]) -> Vec<f64> {
    if gshape == target {
        return g.to_vec();
    }
    let n = numel(gshape);
    let st = bcast_strides(target, gshape);
    let rank = gshape.len();
    let mut out = vec![0.0; numel(target)];
    let mut coords = vec![0usize; rank];
    let mut it = 0usize;
    for i in 0..n {
        out[it] += g[i];
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            it += st[ax];
            if coords[ax] < gshape[ax] {
                break;
            }
            coords[ax] = 0;
            it -= st[ax] * gshape[ax];
        }
    }
    out
}

/// Output shape of an axis reduction.
pub fn reduced_shape(shape: &[usize], axes: &[usize], keep: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &d) in shape.iter().enumerate() {
        if axes.contains(&i) {
            if keep {
                out.push(1);
            }
        } else {
            out.push(d);
        }
    }
    out
}

/// Per-input-axis stride into the reduced output (0 on reduced axes).
fn reduce_out_strides(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut kept = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        if axes.contains(&i) {
            kept[i] = 0;
        } else {
            kept[i] = acc;
            acc *= shape[i];
        }
    }
    kept
}

/// Folds every input element into its output slot with `fold`.
pub fn reduce_axes(
    x: &[f64],
    shape: &[usize],
    axes: &[usize],
    init: f64,
    out_len: usize,
    fold: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let mut out = vec![init; out_len];
    let ost = reduce_out_strides(shape, axes);
    let rank = shape.len();
    let mut coords = vec![0usize; rank];
    let mut io = 0usize;
    for &v in x.iter() {
        out[io] = fold(out[io], v);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            io += ost[ax];
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
            io -= ost[ax] * shape[ax];
        }
    }
    out
}

/// Min/max reduction that also records the winning input linear index per
/// output slot. Ties resolve to the smallest input index.
pub fn arg_reduce(
    x: &[f64],
    shape: &[usize],
    axes: &[usize],
    is_max: bool,
    out_len: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![if is_max { f64::NEG_INFINITY } else { f64::INFINITY }; out_len];
    let mut arg = vec![usize::MAX; out_len];
    let ost = reduce_out_strides(shape, axes);
    let rank = shape.len();
    let mut coords = vec![0usize; rank];
    let mut io = 0usize;
    for (i, &v) in x.iter().enumerate() {
        let better = if is_max { v > out[io] } else { v < out[io] };
        if better || arg[io] == usize::MAX {
            out[io] = v;
            arg[io] = i;
        }
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            io += ost[ax];
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
            io -= ost[ax] * shape[ax];
        }
    }
    (out, arg)
}

/// Broadcasts a reduced gradient back over the axes it was reduced along.
pub fn expand_reduced(
    g: &[f64],
    in_shape: &[usize],
    axes: &[usize],
    scale: f64,
) -> Vec<f64> {
    let ost = reduce_out_strides(in_shape, axes);
    let rank = in_shape.len();
    let n = numel(in_shape);
    let mut coords = vec![0usize; rank];
    let mut io = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(g[io] * scale);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            io += ost[ax];
            if coords[ax] < in_shape[ax] {
                break;
            }
            coords[ax] = 0;
            io -= ost[ax] * in_shape[ax];
        }
    }
    out
}

/// Softmax along `axis`, numerically stabilized.
pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    out
}

/// VJP of softmax: y ⊙ (g − Σ_lane g·y).
pub fn softmax_vjp(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += g[base + j * inner] * y[base + j * inner];
            }
            for j in 0..len {
                let p = base + j * inner;
                out[p] = y[p] * (g[p] - dot);
            }
        }
    }
    out
}

/// Gather: out[i] = if idx[i] < 0 { 0 } else { x[idx[i]] }.
pub fn gather(x: &[f64], idx: &[i64]) -> Vec<f64> {
    idx.iter().map(|&i| if i < 0 { 0.0 } else { x[i as usize] }).collect()
}

/// Scatter-add: out[idx[i]] += src[i]; negative indices are dropped.
pub fn scatter_add(src: &[f64], idx: &[i64], out_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    for (v, &i) in src.iter().zip(idx.iter()) {
        if i >= 0 {
            out[i as usize] += v;
        }
    }
    out
}

/// Conv output extent for kernel k, stride s, symmetric padding p.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

type Im2colKey = (usize, usize, usize, usize, usize, usize, usize);

thread_local! {
    static IM2COL_CACHE: RefCell<HashMap<Im2colKey, Arc<Vec<i64>>>> =
        RefCell::new(HashMap::new());
}

/// Index table turning (C,H,W) into the (C·kh·kw, Ho·Wo) im2col matrix;
/// -1 marks zero padding. Cached per thread — the same geometry repeats
/// every training step.
pub fn im2col_indices(
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Arc<Vec<i64>> {
    let key = (c, h, w, kh, kw, stride, pad);
    IM2COL_CACHE.with(|cache| {
        if let Some(v) = cache.borrow().get(&key) {
            return Arc::clone(v);
        }
        let ho = conv_out_extent(h, kh, stride, pad);
        let wo = conv_out_extent(w, kw, stride, pad);
        let mut idx = Vec::with_capacity(c * kh * kw * ho * wo);
        for ch in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            let v = if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                -1
                            } else {
                                (ch * h * w) as i64 + iy * w as i64 + ix
                            };
                            idx.push(v);
                        }
                    }
                }
            }
        }
        let arc = Arc::new(idx);
        cache.borrow_mut().insert(key, Arc::clone(&arc));
        arc
    })
}
