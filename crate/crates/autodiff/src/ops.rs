//! Forward kernels and vector-Jacobian products for every primitive.

use crate::error::{invalid, Error, Result};
use crate::tensor::{split_axis, Tensor};

/// The closed set of differentiable operations a [`crate::Graph`] records.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveKind {
    /// `[.., m, k] x [k, n]` (leading axes folded into rows) or batched
    /// `[b, m, k] x [b, k, n]`.
    MatMul,
    /// Elementwise with trailing-axis broadcasting.
    Add,
    Sub,
    Mul,
    Div,
    /// `exp` of the input clamped to `[-clamp, clamp]`.
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Abs,
    Sqrt,
    Scale(f64),
    AddScalar(f64),
    Softmax { axis: usize },
    Sum { axis: usize },
    Mean { axis: usize },
    SumAll,
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    Transpose { a: usize, b: usize },
    Slice { axis: usize, start: usize, len: usize },
}

impl PrimitiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "sub",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::Div => "div",
            PrimitiveKind::Exp => "exp",
            PrimitiveKind::Log => "log",
            PrimitiveKind::Sigmoid => "sigmoid",
            PrimitiveKind::Tanh => "tanh",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Softplus => "softplus",
            PrimitiveKind::Abs => "abs",
            PrimitiveKind::Sqrt => "sqrt",
            PrimitiveKind::Scale(_) => "scale",
            PrimitiveKind::AddScalar(_) => "add_scalar",
            PrimitiveKind::Softmax { .. } => "softmax",
            PrimitiveKind::Sum { .. } => "sum",
            PrimitiveKind::Mean { .. } => "mean",
            PrimitiveKind::SumAll => "sum_all",
            PrimitiveKind::Concat { .. } => "concat",
            PrimitiveKind::Reshape { .. } => "reshape",
            PrimitiveKind::Transpose { .. } => "transpose",
            PrimitiveKind::Slice { .. } => "slice",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            PrimitiveKind::MatMul
            | PrimitiveKind::Add
            | PrimitiveKind::Sub
            | PrimitiveKind::Mul
            | PrimitiveKind::Div => Some(2),
            PrimitiveKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// matrix multiply

/// `c = a * b (+ c)`, with `a` stored `m x k` (or `k x m` when `ta`) and `b`
/// stored `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above; strides describe row-major
    // views that stay inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

enum MatMulLayout {
    /// rows x k times k x n
    Folded { rows: usize, k: usize, n: usize },
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

fn matmul_layout(a: &Tensor, b: &Tensor) -> Result<(MatMulLayout, Vec<usize>)> {
    let (sa, sb) = (a.shape(), b.shape());
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 {
        return Err(mismatch());
    }
    let k = sa[sa.len() - 1];
    if sb.len() == 2 {
        if sb[0] != k {
            return Err(mismatch());
        }
        let n = sb[1];
        let rows = a.len() / k;
        let mut out = sa[..sa.len() - 1].to_vec();
        out.push(n);
        Ok((MatMulLayout::Folded { rows, k, n }, out))
    } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sb[1] == k {
        let (batch, m, n) = (sa[0], sa[1], sb[2]);
        Ok((MatMulLayout::Batched { batch, m, k, n }, vec![batch, m, n]))
    } else {
        Err(mismatch())
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (layout, shape) = matmul_layout(a, b)?;
    let mut out = vec![0.0; shape.iter().product()];
    match layout {
        MatMulLayout::Folded { rows, k, n } => {
            gemm(rows, k, n, a.data(), false, b.data(), false, &mut out, false)
        }
        MatMulLayout::Batched { batch, m, k, n } => {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor, need: [bool; 2]) -> [Option<Tensor>; 2] {
    let (layout, _) = matmul_layout(a, b).expect("shapes validated in forward");
    let mut ga = need[0].then(|| vec![0.0; a.len()]);
    let mut gb = need[1].then(|| vec![0.0; b.len()]);
    match layout {
        MatMulLayout::Folded { rows, k, n } => {
            if let Some(ga) = ga.as_mut() {
                gemm(rows, n, k, g.data(), false, b.data(), true, ga, false);
            }
            if let Some(gb) = gb.as_mut() {
                gemm(k, rows, n, a.data(), true, g.data(), false, gb, false);
            }
        }
        MatMulLayout::Batched { batch, m, k, n } => {
            for i in 0..batch {
                let gs = &g.data()[i * m * n..(i + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    let bs = &b.data()[i * k * n..(i + 1) * k * n];
                    gemm(m, n, k, gs, false, bs, true, &mut ga[i * m * k..(i + 1) * m * k], false);
                }
                if let Some(gb) = gb.as_mut() {
                    let as_ = &a.data()[i * m * k..(i + 1) * m * k];
                    gemm(k, m, n, as_, true, gs, false, &mut gb[i * k * n..(i + 1) * k * n], false);
                }
            }
        }
    }
    [
        ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    ]
}

// ---------------------------------------------------------------------------
// broadcasting binary ops

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast output.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    let la: usize = sa.iter().product();
    let lb: usize = sb.iter().product();
    if la == total && lb == total {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    // trailing-suffix broadcasting, e.g. [n, d] with [d]
    if la == total && out.ends_with(sb) {
        for i in 0..total {
            f(i, i, i % lb);
        }
        return;
    }
    if lb == total && out.ends_with(sa) {
        for i in 0..total {
            f(i, i % la, i);
        }
        return;
    }
    let st_a = broadcast_strides(sa, out);
    let st_b = broadcast_strides(sb, out);
    // merge adjacent axes that stay contiguous for both operands
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(out.len());
    for ax in 0..out.len() {
        let e = out[ax];
        if e == 1 {
            continue;
        }
        if let Some(last) = dims.last_mut() {
            if last.1 == st_a[ax] * e && last.2 == st_b[ax] * e {
                *last = (last.0 * e, st_a[ax], st_b[ax]);
                continue;
            }
        }
        dims.push((e, st_a[ax], st_b[ax]));
    }
    let (n_in, sa_in, sb_in) = dims.pop().unwrap_or((1, 0, 0));
    let mut idx = vec![0usize; dims.len()];
    let (mut ia, mut ib, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..total / n_in {
        for k in 0..n_in {
            f(o + k, ia + k * sa_in, ib + k * sb_in);
        }
        o += n_in;
        for ax in (0..dims.len()).rev() {
            let (e, a_st, b_st) = dims[ax];
            idx[ax] += 1;
            ia += a_st;
            ib += b_st;
            if idx[ax] < e {
                break;
            }
            ia -= a_st * e;
            ib -= b_st * e;
            idx[ax] = 0;
        }
    }
}

fn binary_forward(kind: &PrimitiveKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = broadcast_shape(kind.name(), a.shape(), b.shape())?;
    let mut out = vec![0.0; shape.iter().product()];
    let (da, db) = (a.data(), b.data());
    let (sa, sb) = (a.shape(), b.shape());
    match kind {
        PrimitiveKind::Add => for_each_broadcast(&shape, sa, sb, |o, i, j| out[o] = da[i] + db[j]),
        PrimitiveKind::Sub => for_each_broadcast(&shape, sa, sb, |o, i, j| out[o] = da[i] - db[j]),
        PrimitiveKind::Mul => for_each_broadcast(&shape, sa, sb, |o, i, j| out[o] = da[i] * db[j]),
        PrimitiveKind::Div => for_each_broadcast(&shape, sa, sb, |o, i, j| out[o] = da[i] / db[j]),
        _ => unreachable!("not a binary elementwise primitive"),
    }
    Ok(Tensor::from_parts(shape, out))
}

fn binary_vjp(
    kind: &PrimitiveKind,
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need: [bool; 2],
) -> [Option<Tensor>; 2] {
    let mut ga = need[0].then(|| vec![0.0; a.len()]);
    let mut gb = need[1].then(|| vec![0.0; b.len()]);
    let (da, db, dg) = (a.data(), b.data(), g.data());
    let partials: fn(f64, f64, f64) -> (f64, f64) = match kind {
        PrimitiveKind::Add => |go, _, _| (go, go),
        PrimitiveKind::Sub => |go, _, _| (go, -go),
        PrimitiveKind::Mul => |go, x, y| (go * y, go * x),
        PrimitiveKind::Div => |go, x, y| (go / y, -go * x / (y * y)),
        _ => unreachable!("not a binary elementwise primitive"),
    };
    let (sa, sb) = (a.shape(), b.shape());
    match (ga.as_mut(), gb.as_mut()) {
        (Some(ga), Some(gb)) => for_each_broadcast(g.shape(), sa, sb, |o, i, j| {
            let (pa, pb) = partials(dg[o], da[i], db[j]);
            ga[i] += pa;
            gb[j] += pb;
        }),
        (Some(ga), None) => for_each_broadcast(g.shape(), sa, sb, |o, i, j| ga[i] += partials(dg[o], da[i], db[j]).0),
        (None, Some(gb)) => for_each_broadcast(g.shape(), sa, sb, |o, i, j| gb[j] += partials(dg[o], da[i], db[j]).1),
        (None, None) => {}
    }
    [
        ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    ]
}

// ---------------------------------------------------------------------------
// axis helpers

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return invalid(op, format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn softmax_vjp(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let (dy, dg) = (y.data(), g.data());
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let dot: f64 = (0..n).map(|j| dy[at(j)] * dg[at(j)]).sum();
            for j in 0..n {
                out[at(j)] = dy[at(j)] * (dg[at(j)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

fn sum_axis(x: &Tensor, axis: usize, scale: f64) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    if inner == 1 {
        let out = src.chunks_exact(n.max(1)).map(|r| r.iter().sum::<f64>() * scale).collect();
        return Tensor::from_parts(reduced_shape(x.shape(), axis), out);
    }
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    if scale != 1.0 {
        out.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::from_parts(reduced_shape(x.shape(), axis), out)
}

fn expand_axis(g: &Tensor, shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, n, inner) = split_axis(shape, axis);
    let src = g.data();
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let row = &src[o * inner..(o + 1) * inner];
        for j in 0..n {
            for (dst, v) in out[(o * n + j) * inner..(o * n + j + 1) * inner]
                .iter_mut()
                .zip(row)
            {
                *dst = v * scale;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0].shape();
    check_axis("concat", first, axis)?;
    for t in &inputs[1..] {
        let s = t.shape();
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.to_vec(),
                rhs: s.to_vec(),
            });
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    let (outer, _, inner) = split_axis(first, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

fn concat_vjp(inputs: &[&Tensor], g: &Tensor, axis: usize, need: &[bool]) -> Vec<Option<Tensor>> {
    let (outer, total, inner) = split_axis(g.shape(), axis);
    let mut offset = 0;
    let mut grads = Vec::with_capacity(inputs.len());
    for (t, &needed) in inputs.iter().zip(need) {
        let width = t.shape()[axis];
        if needed {
            let mut d = Vec::with_capacity(t.len());
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                d.extend_from_slice(&g.data()[start..start + width * inner]);
            }
            grads.push(Some(Tensor::from_parts(t.shape().to_vec(), d)));
        } else {
            grads.push(None);
        }
        offset += width;
    }
    grads
}

fn transpose_forward(x: &Tensor, a: usize, b: usize) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    // input strides, permuted to output axis order
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides.swap(a, b);
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    if rank == 3 && a.min(b) == 1 && a.max(b) == 2 {
        let (n0, n1, n2) = (out_shape[0], out_shape[1], out_shape[2]);
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    out.push(src[i * strides[0] + j * strides[1] + k * strides[2]]);
                }
            }
        }
    } else {
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..x.len() {
            out.push(src[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[s..s + len * inner]);
    }
    Tensor::from_parts(shape, out)
}

/// Adds the gradient of a slice into the accumulator of its input.
pub(crate) fn slice_accumulate(acc: &mut [f64], x_shape: &[usize], g: &Tensor, axis: usize, start: usize, len: usize) {
    let (outer, n, inner) = split_axis(x_shape, axis);
    for o in 0..outer {
        let s = (o * n + start) * inner;
        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
        for (a, b) in acc[s..s + len * inner].iter_mut().zip(src) {
            *a += b;
        }
    }
}

fn slice_vjp(x_shape: &[usize], g: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x_shape, axis);
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let s = (o * n + start) * inner;
        out[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(x_shape.to_vec(), out)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

// ---------------------------------------------------------------------------
// dispatch

pub(crate) fn forward(kind: &PrimitiveKind, inputs: &[&Tensor], exp_clamp: f64) -> Result<Tensor> {
    let op = kind.name();
    match kind.arity() {
        Some(n) if inputs.len() != n => {
            return invalid(op, format!("expected {n} inputs, got {}", inputs.len()))
        }
        None if inputs.is_empty() => return invalid(op, "expected at least one input"),
        _ => {}
    }
    let x = inputs[0];
    let out = match kind {
        PrimitiveKind::MatMul => matmul_forward(inputs[0], inputs[1])?,
        PrimitiveKind::Add | PrimitiveKind::Sub | PrimitiveKind::Mul | PrimitiveKind::Div => {
            binary_forward(kind, inputs[0], inputs[1])?
        }
        PrimitiveKind::Exp => map(x, |v| v.clamp(-exp_clamp, exp_clamp).exp()),
        PrimitiveKind::Log => {
            if x.data().iter().any(|&v| v <= 0.0) {
                return invalid(op, "input must be strictly positive");
            }
            map(x, f64::ln)
        }
        PrimitiveKind::Sigmoid => map(x, sigmoid),
        PrimitiveKind::Tanh => map(x, f64::tanh),
        PrimitiveKind::Relu => map(x, |v| v.max(0.0)),
        PrimitiveKind::Softplus => map(x, softplus),
        PrimitiveKind::Abs => map(x, f64::abs),
        PrimitiveKind::Sqrt => {
            if x.data().iter().any(|&v| v < 0.0) {
                return invalid(op, "input must be non-negative");
            }
            map(x, f64::sqrt)
        }
        PrimitiveKind::Scale(c) => map(x, |v| v * c),
        PrimitiveKind::AddScalar(c) => map(x, |v| v + c),
        PrimitiveKind::Softmax { axis } => {
            check_axis(op, x.shape(), *axis)?;
            softmax_forward(x, *axis)
        }
        PrimitiveKind::Sum { axis } => {
            check_axis(op, x.shape(), *axis)?;
            sum_axis(x, *axis, 1.0)
        }
        PrimitiveKind::Mean { axis } => {
            check_axis(op, x.shape(), *axis)?;
            sum_axis(x, *axis, 1.0 / x.shape()[*axis] as f64)
        }
        PrimitiveKind::SumAll => Tensor::scalar(x.data().iter().sum()),
        PrimitiveKind::Concat { axis } => concat_forward(inputs, *axis)?,
        PrimitiveKind::Reshape { shape } => {
            if shape.iter().product::<usize>() != x.len() || shape.contains(&0) {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: x.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Tensor::from_parts(shape.clone(), x.data().to_vec())
        }
        PrimitiveKind::Transpose { a, b } => {
            check_axis(op, x.shape(), *a)?;
            check_axis(op, x.shape(), *b)?;
            transpose_forward(x, *a, *b)
        }
        PrimitiveKind::Slice { axis, start, len } => {
            check_axis(op, x.shape(), *axis)?;
            if *len == 0 || start + len > x.shape()[*axis] {
                return invalid(
                    op,
                    format!(
                        "range {start}..{} out of bounds for axis {axis} of shape {:?}",
                        start + len,
                        x.shape()
                    ),
                );
            }
            slice_forward(x, *axis, *start, *len)
        }
    };
    if !out.all_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(out)
}

/// Input gradients for one node given the upstream gradient `g`.
pub(crate) fn vjp(
    kind: &PrimitiveKind,
    inputs: &[&Tensor],
    output: &Tensor,
    g: &Tensor,
    need: &[bool],
    exp_clamp: f64,
) -> Vec<Option<Tensor>> {
    let x = inputs[0];
    let unary = |t: Tensor| vec![need[0].then_some(t)];
    match kind {
        PrimitiveKind::MatMul => matmul_vjp(inputs[0], inputs[1], g, [need[0], need[1]]).into(),
        PrimitiveKind::Add | PrimitiveKind::Sub | PrimitiveKind::Mul | PrimitiveKind::Div => {
            binary_vjp(kind, inputs[0], inputs[1], g, [need[0], need[1]]).into()
        }
        PrimitiveKind::Exp => unary(Tensor::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(output.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| if xi.abs() <= exp_clamp { gi * yi } else { 0.0 })
                .collect(),
        )),
        PrimitiveKind::Log => unary(zip_map(g, x, |gi, xi| gi / xi)),
        PrimitiveKind::Sigmoid => unary(zip_map(g, output, |gi, y| gi * y * (1.0 - y))),
        PrimitiveKind::Tanh => unary(zip_map(g, output, |gi, y| gi * (1.0 - y * y))),
        PrimitiveKind::Relu => unary(zip_map(g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })),
        PrimitiveKind::Softplus => unary(zip_map(g, x, |gi, xi| gi * sigmoid(xi))),
        PrimitiveKind::Abs => unary(zip_map(g, x, |gi, xi| {
            if xi > 0.0 {
                gi
            } else if xi < 0.0 {
                -gi
            } else {
                0.0
            }
        })),
        // subgradient 0 at the origin
        PrimitiveKind::Sqrt => unary(zip_map(g, output, |gi, y| {
            if y > 0.0 {
                gi / (2.0 * y)
            } else {
                0.0
            }
        })),
        PrimitiveKind::Scale(c) => unary(map(g, |gi| gi * c)),
        PrimitiveKind::AddScalar(_) => unary(g.clone()),
        PrimitiveKind::Softmax { axis } => unary(softmax_vjp(output, g, *axis)),
        PrimitiveKind::Sum { axis } => unary(expand_axis(g, x.shape(), *axis, 1.0)),
        PrimitiveKind::Mean { axis } => unary(expand_axis(
            g,
            x.shape(),
            *axis,
            1.0 / x.shape()[*axis] as f64,
        )),
        PrimitiveKind::SumAll => unary(Tensor::full(x.shape(), g.data()[0])),
        PrimitiveKind::Concat { axis } => concat_vjp(inputs, g, *axis, need),
        PrimitiveKind::Reshape { .. } => {
            unary(Tensor::from_parts(x.shape().to_vec(), g.data().to_vec()))
        }
        PrimitiveKind::Transpose { a, b } => unary(transpose_forward(g, *a, *b)),
        PrimitiveKind::Slice { axis, start, len } => {
            unary(slice_vjp(x.shape(), g, *axis, *start, *len))
        }
    }
}
