//! The primitive catalog: forward math plus one analytic vector-Jacobian
//! product per primitive. Spatial operations (conv2d, padding, resizing)
//! are composites over gather, so they inherit a single verified gradient
//! path instead of carrying bespoke backward code.

use std::sync::Arc;

use super::kernels as k;
use super::tape::{self, record};
use super::tensor::{finalize, Tensor};
use super::NumError;

type Result<T> = std::result::Result<T, NumError>;

/// Tape node payload: saved activations plus the attributes each VJP needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add { ls: Vec<usize>, rs: Vec<usize> },
    Sub { ls: Vec<usize>, rs: Vec<usize> },
    Mul { a: Tensor, b: Tensor },
    Matmul { a: Tensor, b: Tensor },
    Transpose { rows: usize, cols: usize },
    Reshape { in_shape: Vec<usize> },
    Concat { axis: usize, part_shapes: Vec<Vec<usize>> },
    Slice { axis: usize, start: usize, in_shape: Vec<usize> },
    Sum { axes: Vec<usize>, in_shape: Vec<usize> },
    Mean { axes: Vec<usize>, in_shape: Vec<usize> },
    Var { x: Tensor, axes: Vec<usize> },
    Exp { y: Tensor },
    Log { x: Tensor },
    Sqrt { y: Tensor },
    Tanh { y: Tensor },
    Relu { x: Tensor },
    LeakyRelu { x: Tensor, slope: f64 },
    Softmax { y: Tensor, axis: usize },
    Pow { x: Tensor, p: f64 },
    MinMax { arg: Vec<usize>, in_shape: Vec<usize> },
    Take { idx: Arc<Vec<i64>>, in_shape: Vec<usize> },
    ScatterAdd { idx: Arc<Vec<i64>>, src_shape: Vec<usize> },
}

impl Op {
    /// Gradients for each input slot given the output gradient.
    pub(crate) fn vjp(&self, g: &Tensor) -> Vec<Option<Tensor>> {
        let gd = g.data();
        let gs = g.shape();
        let t = |shape: &[usize], data: Vec<f64>| {
            Some(Tensor::from_parts(shape.to_vec(), finalize(data)))
        };
        match self {
            Op::Leaf => vec![],
            Op::Add { ls, rs } => vec![
                t(ls, k::reduce_to_shape(gd, gs, ls)),
                t(rs, k::reduce_to_shape(gd, gs, rs)),
            ],
            Op::Sub { ls, rs } => {
                let mut dr = k::reduce_to_shape(gd, gs, rs);
                dr.iter_mut().for_each(|v| *v = -*v);
                vec![t(ls, k::reduce_to_shape(gd, gs, ls)), t(rs, dr)]
            }
            Op::Mul { a, b } => {
                let gb = k::broadcast_binary(gd, gs, b.data(), b.shape(), gs, |x, y| x * y);
                let ga = k::broadcast_binary(gd, gs, a.data(), a.shape(), gs, |x, y| x * y);
                vec![
                    t(a.shape(), k::reduce_to_shape(&gb, gs, a.shape())),
                    t(b.shape(), k::reduce_to_shape(&ga, gs, b.shape())),
                ]
            }
            Op::Matmul { a, b } => {
                let (m, kk) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let bt = k::transpose2d(b.data(), kk, n);
                let at = k::transpose2d(a.data(), m, kk);
                vec![
                    t(a.shape(), k::matmul(gd, &bt, m, n, kk)),
                    t(b.shape(), k::matmul(&at, gd, kk, m, n)),
                ]
            }
            Op::Transpose { rows, cols } => {
                vec![t(&[*rows, *cols], k::transpose2d(gd, *cols, *rows))]
            }
            Op::Reshape { in_shape } => vec![t(in_shape, gd.to_vec())],
            Op::Concat { axis, part_shapes } => {
                let mut grads = Vec::with_capacity(part_shapes.len());
                let mut start = 0usize;
                for ps in part_shapes {
                    grads.push(Some(
                        slice_raw(gd, gs, *axis, start, ps[*axis]),
                    ));
                    start += ps[*axis];
                }
                grads
            }
            Op::Slice { axis, start, in_shape } => {
                vec![t(in_shape, unslice_raw(gd, gs, in_shape, *axis, *start))]
            }
            Op::Sum { axes, in_shape } => {
                vec![t(in_shape, k::expand_reduced(gd, in_shape, axes, 1.0))]
            }
            Op::Mean { axes, in_shape } => {
                let count: usize = axes.iter().map(|&a| in_shape[a]).product();
                vec![t(in_shape, k::expand_reduced(gd, in_shape, axes, 1.0 / count as f64))]
            }
            Op::Var { x, axes } => {
                let in_shape = x.shape();
                let count: usize = axes.iter().map(|&a| in_shape[a]).product();
                let out_len = k::numel(in_shape) / count;
                let sums = k::reduce_axes(x.data(), in_shape, axes, 0.0, out_len, |a, b| a + b);
                let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
                let mean_full = k::expand_reduced(&means, in_shape, axes, 1.0);
                let g_full = k::expand_reduced(gd, in_shape, axes, 2.0 / count as f64);
                let dx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(mean_full.iter())
                    .zip(g_full.iter())
                    .map(|((&xv, &mv), &gv)| gv * (xv - mv))
                    .collect();
                vec![t(in_shape, dx)]
            }
            Op::Exp { y } => vec![t(gs, zipmul(gd, y.data()))],
            Op::Log { x } => {
                vec![t(gs, gd.iter().zip(x.data()).map(|(&g, &x)| g / x).collect())]
            }
            Op::Sqrt { y } => {
                vec![t(gs, gd.iter().zip(y.data()).map(|(&g, &y)| g * 0.5 / y).collect())]
            }
            Op::Tanh { y } => {
                vec![t(gs, gd.iter().zip(y.data()).map(|(&g, &y)| g * (1.0 - y * y)).collect())]
            }
            Op::Relu { x } => {
                vec![t(gs, gd.iter().zip(x.data()).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect())]
            }
            Op::LeakyRelu { x, slope } => vec![t(
                gs,
                gd.iter()
                    .zip(x.data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { g * slope })
                    .collect(),
            )],
            Op::Softmax { y, axis } => {
                vec![t(gs, k::softmax_vjp(y.data(), gd, y.shape(), *axis))]
            }
            Op::Pow { x, p } => vec![t(
                gs,
                gd.iter()
                    .zip(x.data())
                    .map(|(&g, &x)| g * p * x.powf(p - 1.0))
                    .collect(),
            )],
            Op::MinMax { arg, in_shape } => {
                let mut dx = vec![0.0; k::numel(in_shape)];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] += gd[o];
                }
                vec![t(in_shape, dx)]
            }
            Op::Take { idx, in_shape } => {
                vec![t(in_shape, k::scatter_add(gd, idx, k::numel(in_shape)))]
            }
            Op::ScatterAdd { idx, src_shape } => {
                vec![t(src_shape, k::gather(gd, idx))]
            }
        }
    }
}

fn zipmul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
}

fn slice_raw(x: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Tensor {
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    let mut os = shape.to_vec();
    os[axis] = len;
    Tensor::from_parts(os, finalize(out))
}

fn unslice_raw(g: &[f64], gshape: &[usize], in_shape: &[usize], axis: usize, start: usize) -> Vec<f64> {
    let inner: usize = in_shape[axis + 1..].iter().product();
    let outer: usize = in_shape[..axis].iter().product();
    let len = gshape[axis];
    let mut out = vec![0.0; k::numel(in_shape)];
    for o in 0..outer {
        let dst = (o * in_shape[axis] + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
    }
    out
}

fn check_axis(prim: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(NumError::Invalid {
            prim,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn check_axes(prim: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut ax = axes.to_vec();
    ax.sort_unstable();
    ax.dedup();
    if ax.len() != axes.len() || ax.iter().any(|&a| a >= shape.len()) {
        return Err(NumError::Invalid {
            prim,
            msg: format!("bad axis set {axes:?} for shape {shape:?}"),
        });
    }
    Ok(ax)
}

// ── elementwise binary ───────────────────────────────────────────────

fn binary(
    prim: &'static str,
    a: &Tensor,
    b: &Tensor,
    op: impl Fn(f64, f64) -> f64,
    make: impl Fn() -> Op,
) -> Result<Tensor> {
    let os = k::broadcast_shape(a.shape(), b.shape()).ok_or(NumError::ShapeMismatch {
        prim,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let data = k::broadcast_binary(a.data(), a.shape(), b.data(), b.shape(), &os, op);
    let out = Tensor::from_parts(os, finalize(data));
    record(make(), &[a, b], &out);
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y, || Op::Add {
        ls: a.shape().to_vec(),
        rs: b.shape().to_vec(),
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y, || Op::Sub {
        ls: a.shape().to_vec(),
        rs: b.shape().to_vec(),
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y, || Op::Mul { a: a.detach(), b: b.detach() })
}

pub fn add_scalar(a: &Tensor, c: f64) -> Result<Tensor> {
    add(a, &Tensor::scalar(c))
}

pub fn mul_scalar(a: &Tensor, c: f64) -> Result<Tensor> {
    mul(a, &Tensor::scalar(c))
}

pub fn neg(a: &Tensor) -> Result<Tensor> {
    mul_scalar(a, -1.0)
}

// ── linear algebra / shape ───────────────────────────────────────────

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(NumError::ShapeMismatch {
            prim: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, kk) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let out = Tensor::from_parts(vec![m, n], finalize(k::matmul(a.data(), b.data(), m, kk, n)));
    record(Op::Matmul { a: a.detach(), b: b.detach() }, &[a, b], &out);
    Ok(out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(NumError::Invalid {
            prim: "transpose",
            msg: format!("expected rank 2, got shape {:?}", a.shape()),
        });
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let out = Tensor::from_parts(vec![c, r], finalize(k::transpose2d(a.data(), r, c)));
    record(Op::Transpose { rows: r, cols: c }, &[a], &out);
    Ok(out)
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if k::numel(shape) != a.numel() {
        return Err(NumError::ShapeMismatch {
            prim: "reshape",
            lhs: a.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    // contiguous row-major storage: metadata-only, data is shared
    let out = Tensor::from_parts(shape.to_vec(), a.data().to_vec());
    record(Op::Reshape { in_shape: a.shape().to_vec() }, &[a], &out);
    Ok(out)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(NumError::Invalid {
        prim: "concat",
        msg: "no inputs".into(),
    })?;
    check_axis("concat", first.shape(), axis)?;
    let mut axis_total = 0usize;
    for p in parts {
        if p.rank() != first.rank()
            || p.shape().iter().enumerate().any(|(i, &d)| i != axis && d != first.shape()[i])
        {
            return Err(NumError::ShapeMismatch {
                prim: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        axis_total += p.shape()[axis];
    }
    let mut os = first.shape().to_vec();
    os[axis] = axis_total;
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let outer: usize = first.shape()[..axis].iter().product();
    let mut data = Vec::with_capacity(k::numel(&os));
    for o in 0..outer {
        for p in parts {
            let span = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * span..(o + 1) * span]);
        }
    }
    let out = Tensor::from_parts(os, finalize(data));
    record(
        Op::Concat {
            axis,
            part_shapes: parts.iter().map(|p| p.shape().to_vec()).collect(),
        },
        parts,
        &out,
    );
    Ok(out)
}

pub fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("slice", a.shape(), axis)?;
    if start + len > a.shape()[axis] {
        return Err(NumError::Invalid {
            prim: "slice",
            msg: format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, a.shape()),
        });
    }
    let out = slice_raw(a.data(), a.shape(), axis, start, len);
    record(Op::Slice { axis, start, in_shape: a.shape().to_vec() }, &[a], &out);
    Ok(out)
}

/// Splits into `sections` equal parts along `axis`.
pub fn split(a: &Tensor, axis: usize, sections: usize) -> Result<Vec<Tensor>> {
    check_axis("split", a.shape(), axis)?;
    let d = a.shape()[axis];
    if sections == 0 || d % sections != 0 {
        return Err(NumError::Invalid {
            prim: "split",
            msg: format!("{sections} sections do not divide axis extent {d}"),
        });
    }
    let each = d / sections;
    (0..sections).map(|s| slice(a, axis, s * each, each)).collect()
}

// ── reductions ───────────────────────────────────────────────────────

pub fn sum_axes(a: &Tensor, axes: &[usize], keep: bool) -> Result<Tensor> {
    let axes = check_axes("sum", a.shape(), axes)?;
    let os = k::reduced_shape(a.shape(), &axes, keep);
    let data = k::reduce_axes(a.data(), a.shape(), &axes, 0.0, k::numel(&os), |x, v| x + v);
    let out = Tensor::from_parts(os, finalize(data));
    record(Op::Sum { axes, in_shape: a.shape().to_vec() }, &[a], &out);
    Ok(out)
}

pub fn mean_axes(a: &Tensor, axes: &[usize], keep: bool) -> Result<Tensor> {
    let axes = check_axes("mean", a.shape(), axes)?;
    let count: usize = axes.iter().map(|&x| a.shape()[x]).product();
    let os = k::reduced_shape(a.shape(), &axes, keep);
    let mut data = k::reduce_axes(a.data(), a.shape(), &axes, 0.0, k::numel(&os), |x, v| x + v);
    data.iter_mut().for_each(|v| *v /= count as f64);
    let out = Tensor::from_parts(os, finalize(data));
    record(Op::Mean { axes, in_shape: a.shape().to_vec() }, &[a], &out);
    Ok(out)
}

/// Biased variance over `axes` (divides by the element count).
pub fn var_axes(a: &Tensor, axes: &[usize], keep: bool) -> Result<Tensor> {
    let axes = check_axes("var", a.shape(), axes)?;
    let count: usize = axes.iter().map(|&x| a.shape()[x]).product();
    let os = k::reduced_shape(a.shape(), &axes, keep);
    let out_len = k::numel(&os);
    let sums = k::reduce_axes(a.data(), a.shape(), &axes, 0.0, out_len, |x, v| x + v);
    let sq = k::reduce_axes(a.data(), a.shape(), &axes, 0.0, out_len, |x, v| x + v * v);
    let data: Vec<f64> = sums
        .iter()
        .zip(sq.iter())
        .map(|(&s, &q)| {
            let m = s / count as f64;
            (q / count as f64 - m * m).max(0.0)
        })
        .collect();
    let out = Tensor::from_parts(os, finalize(data));
    record(Op::Var { x: a.detach(), axes }, &[a], &out);
    Ok(out)
}

pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    let axes: Vec<usize> = (0..a.rank()).collect();
    sum_axes(a, &axes, false)
}

pub fn mean_all(a: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 {
        return add_scalar(a, 0.0);
    }
    let axes: Vec<usize> = (0..a.rank()).collect();
    mean_axes(a, &axes, false)
}

fn minmax_reduce(a: &Tensor, axes: &[usize], keep: bool, is_max: bool) -> Result<Tensor> {
    let prim: &'static str = if is_max { "max_reduce" } else { "min_reduce" };
    let axes = check_axes(prim, a.shape(), axes)?;
    let os = k::reduced_shape(a.shape(), &axes, keep);
    let (data, arg) = k::arg_reduce(a.data(), a.shape(), &axes, is_max, k::numel(&os));
    let out = Tensor::from_parts(os, finalize(data));
    record(Op::MinMax { arg, in_shape: a.shape().to_vec() }, &[a], &out);
    Ok(out)
}

pub fn max_reduce(a: &Tensor, axes: &[usize], keep: bool) -> Result<Tensor> {
    minmax_reduce(a, axes, keep, true)
}

pub fn min_reduce(a: &Tensor, axes: &[usize], keep: bool) -> Result<Tensor> {
    minmax_reduce(a, axes, keep, false)
}

// ── elementwise unary ────────────────────────────────────────────────

fn unary(a: &Tensor, f: impl Fn(f64) -> f64, make: impl Fn(&Tensor) -> Op) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    let out = Tensor::from_parts(a.shape().to_vec(), finalize(data));
    record(make(&out), &[a], &out);
    out
}

pub fn exp(a: &Tensor) -> Result<Tensor> {
    Ok(unary(a, f64::exp, |y| Op::Exp { y: y.detach() }))
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    Ok(unary(a, f64::ln, |_| Op::Log { x: a.detach() }))
}

pub fn sqrt(a: &Tensor) -> Result<Tensor> {
    Ok(unary(a, f64::sqrt, |y| Op::Sqrt { y: y.detach() }))
}

pub fn tanh(a: &Tensor) -> Result<Tensor> {
    Ok(unary(a, f64::tanh, |y| Op::Tanh { y: y.detach() }))
}

pub fn relu(a: &Tensor) -> Result<Tensor> {
    Ok(unary(a, |x| x.max(0.0), |_| Op::Relu { x: a.detach() }))
}

pub fn leaky_relu(a: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(unary(a, |x| if x > 0.0 { x } else { slope * x }, |_| Op::LeakyRelu {
        x: a.detach(),
        slope,
    }))
}

pub fn pow(a: &Tensor, p: f64) -> Result<Tensor> {
    Ok(unary(a, |x| x.powf(p), |_| Op::Pow { x: a.detach(), p }))
}

pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", a.shape(), axis)?;
    let data = k::softmax_axis(a.data(), a.shape(), axis);
    let out = Tensor::from_parts(a.shape().to_vec(), finalize(data));
    record(Op::Softmax { y: out.detach(), axis }, &[a], &out);
    Ok(out)
}

/// |x| as relu(x) + relu(-x); the subgradient at 0 is 0.
pub fn abs(a: &Tensor) -> Result<Tensor> {
    add(&relu(a)?, &relu(&neg(a)?)?)
}

/// a / b, elementwise with broadcast. b must be nonzero.
pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    mul(a, &pow(b, -1.0)?)
}

// ── gather / scatter and spatial composites ──────────────────────────

/// out[i] = x.flat[idx[i]], with idx = -1 reading zero.
pub fn take(a: &Tensor, idx: Arc<Vec<i64>>, out_shape: &[usize]) -> Result<Tensor> {
    if k::numel(out_shape) != idx.len() {
        return Err(NumError::Invalid {
            prim: "take",
            msg: format!("index count {} != output numel {}", idx.len(), k::numel(out_shape)),
        });
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= a.numel() as i64) {
        return Err(NumError::Invalid {
            prim: "take",
            msg: format!("index {bad} out of bounds for {} elements", a.numel()),
        });
    }
    let out = Tensor::from_parts(out_shape.to_vec(), finalize(k::gather(a.data(), &idx)));
    record(
        Op::Take { idx, in_shape: a.shape().to_vec() },
        &[a],
        &out,
    );
    Ok(out)
}

/// out.flat[idx[i]] += src.flat[i]; negative indices are dropped.
pub fn scatter_add(src: &Tensor, idx: Arc<Vec<i64>>, out_shape: &[usize]) -> Result<Tensor> {
    if src.numel() != idx.len() {
        return Err(NumError::Invalid {
            prim: "scatter_add",
            msg: format!("index count {} != source numel {}", idx.len(), src.numel()),
        });
    }
    let out_len = k::numel(out_shape);
    if let Some(&bad) = idx.iter().find(|&&i| i >= out_len as i64) {
        return Err(NumError::Invalid {
            prim: "scatter_add",
            msg: format!("index {bad} out of bounds for {out_len} elements"),
        });
    }
    let out = Tensor::from_parts(out_shape.to_vec(), finalize(k::scatter_add(src.data(), &idx, out_len)));
    record(Op::ScatterAdd { idx, src_shape: src.shape().to_vec() }, &[src], &out);
    Ok(out)
}

/// Zero-pads the two trailing (spatial) axes of a (C,H,W) tensor.
pub fn pad2d(a: &Tensor, pad: usize) -> Result<Tensor> {
    if a.rank() != 3 {
        return Err(NumError::Invalid {
            prim: "pad",
            msg: format!("expected (C,H,W), got {:?}", a.shape()),
        });
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let iy = y as i64 - pad as i64;
                let ix = x as i64 - pad as i64;
                idx.push(if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                    -1
                } else {
                    (ch * h * w) as i64 + iy * w as i64 + ix
                });
            }
        }
    }
    take(a, Arc::new(idx), &[c, ho, wo])
}

/// 2-D convolution of (Cin,H,W) with (Cout,Cin,kh,kw), built from
/// im2col gather + matmul so the gradient flows through one verified path.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 4 || x.shape()[0] != w.shape()[1] {
        return Err(NumError::ShapeMismatch {
            prim: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (cin, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = k::conv_out_extent(h, kh, stride, pad);
    let wo = k::conv_out_extent(ww, kw, stride, pad);
    let idx = k::im2col_indices(cin, h, ww, kh, kw, stride, pad);
    let cols = take(x, idx, &[cin * kh * kw, ho * wo])?;
    let wm = reshape(w, &[cout, cin * kh * kw])?;
    let y = matmul(&wm, &cols)?;
    let y = reshape(&y, &[cout, ho, wo])?;
    match b {
        Some(bias) => add(&y, &reshape(bias, &[cout, 1, 1])?),
        None => Ok(y),
    }
}

/// Nearest-neighbour upsampling of (C,H,W) by an integer factor.
pub fn nearest_upsample(a: &Tensor, factor: usize) -> Result<Tensor> {
    if a.rank() != 3 || factor == 0 {
        return Err(NumError::Invalid {
            prim: "nearest_upsample",
            msg: format!("shape {:?}, factor {factor}", a.shape()),
        });
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (ho, wo) = (h * factor, w * factor);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                idx.push(((ch * h + y / factor) * w + x / factor) as i64);
            }
        }
    }
    take(a, Arc::new(idx), &[c, ho, wo])
}

/// Bilinear resize of (C,H,W) to (ho,wo); half-pixel centers, borders
/// clamped, so resizing to the same extent is the identity.
pub fn bilinear_resize(a: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    if a.rank() != 3 || ho == 0 || wo == 0 {
        return Err(NumError::Invalid {
            prim: "bilinear_resize",
            msg: format!("shape {:?} to ({ho},{wo})", a.shape()),
        });
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h == ho && w == wo {
        return add_scalar(a, 0.0);
    }
    let sy = h as f64 / ho as f64;
    let sx = w as f64 / wo as f64;
    let n = ho * wo;
    let mut i00 = Vec::with_capacity(c * n);
    let mut i01 = Vec::with_capacity(c * n);
    let mut i10 = Vec::with_capacity(c * n);
    let mut i11 = Vec::with_capacity(c * n);
    let mut w00 = Vec::with_capacity(n);
    let mut w01 = Vec::with_capacity(n);
    let mut w10 = Vec::with_capacity(n);
    let mut w11 = Vec::with_capacity(n);
    for y in 0..ho {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for x in 0..wo {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            w00.push((1.0 - dy) * (1.0 - dx));
            w01.push((1.0 - dy) * dx);
            w10.push(dy * (1.0 - dx));
            w11.push(dy * dx);
            i00.push((y0 * w + x0) as i64);
            i01.push((y0 * w + x1) as i64);
            i10.push((y1 * w + x0) as i64);
            i11.push((y1 * w + x1) as i64);
        }
    }
    let lift = |base: Vec<i64>| -> Arc<Vec<i64>> {
        let mut all = Vec::with_capacity(c * n);
        for ch in 0..c {
            all.extend(base.iter().map(|&i| i + (ch * h * w) as i64));
        }
        Arc::new(all)
    };
    let os = [c, ho, wo];
    let ws = [1, ho, wo];
    let corner = |idx: Vec<i64>, wv: &[f64]| -> Result<Tensor> {
        let g = take(a, lift(idx), &os)?;
        mul(&g, &Tensor::from_vec(&ws, wv.to_vec())?)
    };
    let t00 = corner(i00, &w00)?;
    let t01 = corner(i01, &w01)?;
    let t10 = corner(i10, &w10)?;
    let t11 = corner(i11, &w11)?;
    add(&add(&t00, &t01)?, &add(&t10, &t11)?)
}

// ── catalog dispatch ─────────────────────────────────────────────────

/// Attribute bag for [`apply_primitive`].
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub axes: Option<Vec<usize>>,
    pub keep: bool,
    pub shape: Option<Vec<usize>>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub sections: Option<usize>,
    pub scalar: Option<f64>,
    pub stride: Option<usize>,
    pub pad: Option<usize>,
    pub factor: Option<usize>,
    pub indices: Option<Arc<Vec<i64>>>,
}

fn need<T>(prim: &'static str, v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| NumError::Invalid { prim, msg: format!("missing attr `{what}`") })
}

/// Name-driven entry point over the whole primitive catalog. Multi-output
/// primitives (split) return several tensors; the rest return one.
pub fn apply_primitive(name: &str, inputs: &[&Tensor], attrs: &Attrs) -> Result<Vec<Tensor>> {
    let one = |t: Tensor| Ok(vec![t]);
    let arg = |i: usize| -> Result<&Tensor> {
        inputs.get(i).copied().ok_or(NumError::Invalid {
            prim: "apply_primitive",
            msg: format!("missing input {i} for `{name}`"),
        })
    };
    match name {
        "add" => one(add(arg(0)?, arg(1)?)?),
        "sub" => one(sub(arg(0)?, arg(1)?)?),
        "mul" => one(mul(arg(0)?, arg(1)?)?),
        "matmul" => one(matmul(arg(0)?, arg(1)?)?),
        "transpose" => one(transpose(arg(0)?)?),
        "reshape" => one(reshape(arg(0)?, &need("reshape", attrs.shape.clone(), "shape")?)?),
        "concat" => Ok(vec![concat(inputs, need("concat", attrs.axis, "axis")?)?]),
        "split" => split(arg(0)?, need("split", attrs.axis, "axis")?, need("split", attrs.sections, "sections")?),
        "slice" => one(slice(
            arg(0)?,
            need("slice", attrs.axis, "axis")?,
            need("slice", attrs.start, "start")?,
            need("slice", attrs.len, "len")?,
        )?),
        "sum" => one(sum_axes(arg(0)?, &need("sum", attrs.axes.clone(), "axes")?, attrs.keep)?),
        "mean" => one(mean_axes(arg(0)?, &need("mean", attrs.axes.clone(), "axes")?, attrs.keep)?),
        "var" => one(var_axes(arg(0)?, &need("var", attrs.axes.clone(), "axes")?, attrs.keep)?),
        "min_reduce" => one(min_reduce(arg(0)?, &need("min_reduce", attrs.axes.clone(), "axes")?, attrs.keep)?),
        "max_reduce" => one(max_reduce(arg(0)?, &need("max_reduce", attrs.axes.clone(), "axes")?, attrs.keep)?),
        "exp" => one(exp(arg(0)?)?),
        "log" => one(log(arg(0)?)?),
        "sqrt" => one(sqrt(arg(0)?)?),
        "tanh" => one(tanh(arg(0)?)?),
        "relu" => one(relu(arg(0)?)?),
        "leaky_relu" => one(leaky_relu(arg(0)?, attrs.scalar.unwrap_or(0.2))?),
        "softmax" => one(softmax(arg(0)?, need("softmax", attrs.axis, "axis")?)?),
        "power" => one(pow(arg(0)?, need("power", attrs.scalar, "scalar")?)?),
        "pad" => one(pad2d(arg(0)?, need("pad", attrs.pad, "pad")?)?),
        "conv2d" => one(conv2d(
            arg(0)?,
            arg(1)?,
            inputs.get(2).copied(),
            need("conv2d", attrs.stride, "stride")?,
            need("conv2d", attrs.pad, "pad")?,
        )?),
        "nearest_upsample" => one(nearest_upsample(arg(0)?, need("nearest_upsample", attrs.factor, "factor")?)?),
        "bilinear_resize" => {
            let s = need("bilinear_resize", attrs.shape.clone(), "shape")?;
            one(bilinear_resize(arg(0)?, s[0], s[1])?)
        }
        "gather" => one(take(
            arg(0)?,
            attrs.indices.clone().ok_or(NumError::Invalid { prim: "gather", msg: "missing attr `indices`".into() })?,
            &need("gather", attrs.shape.clone(), "shape")?,
        )?),
        "scatter" => one(scatter_add(
            arg(0)?,
            attrs.indices.clone().ok_or(NumError::Invalid { prim: "scatter", msg: "missing attr `indices`".into() })?,
            &need("scatter", attrs.shape.clone(), "shape")?,
        )?),
        other => Err(NumError::UnknownPrimitive(other.to_string())),
    }
}

/// Raw elementwise add of two same-shape tensors (gradient accumulation).
pub(crate) fn accumulate(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_parts(a.shape().to_vec(), finalize(data))
}
