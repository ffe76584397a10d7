//! Elementwise, reduction and shape operations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{BinaryKind, GradSink, Op, Tape, UnaryKind, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Numpy-style broadcast of two shapes (trailing alignment).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out`, the offset of the broadcast source element in
/// a tensor of shape `inp`. `None` when the shapes are identical.
pub(crate) fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let rank = out.len();
    let in_strides = strides(inp);
    let mut bstride = vec![0usize; rank];
    for i in 0..inp.len() {
        let o = i + rank - inp.len();
        if inp[i] != 1 {
            bstride[o] = in_strides[i];
        }
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += bstride[d];
            if idx[d] < out[d] {
                break;
            }
            off -= bstride[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

/// `(outer, n, inner)` sizes around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::AxisOutOfRange { op, axis, rank })
    } else {
        Ok(())
    }
}

impl Tape {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: "elementwise",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let ma = broadcast_map(&out_shape, sa);
        let mb = broadcast_map(&out_shape, sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let n = numel(&out_shape);
        let data = (0..n).map(|i| f(da[at(&ma, i)], db[at(&mb, i)])).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Relu => |x| if x > 0.0 || x.is_nan() { x } else { 0.0 },
            UnaryKind::Sigmoid => |x| 1.0 / (1.0 + libm::exp(-x)),
            UnaryKind::Tanh => libm::tanh,
            UnaryKind::Sqrt => libm::sqrt,
            UnaryKind::Exp => libm::exp,
            UnaryKind::Log => libm::log,
            UnaryKind::Neg => |x| -x,
        };
        let value = self.value(a).map(f);
        Ok(self.push(value, Op::Unary { kind, a }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_var(a)?;
        let value = self.value(a).map(|x| x * factor);
        Ok(self.push(value, Op::Scale { a, factor }))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_var(a)?;
        let value = self.value(a).map(|x| x + c);
        Ok(self.push(value, Op::Offset { a }))
    }

    /// `max(a, min)` elementwise; gradient passes where `a > min`.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var> {
        self.check_var(a)?;
        let value = self
            .value(a)
            .map(|x| if x > min || x.is_nan() { x } else { min });
        Ok(self.push(value, Op::ClampMin { a, min }))
    }

    fn reduce(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        self.check_var(a)?;
        let op = if mean { "reduce_mean" } else { "reduce_sum" };
        let shape = self.shape(a).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(Error::RepeatedAxis { op, axis: w[0] });
            }
        }
        for &ax in &sorted {
            check_axis(op, ax, shape.len())?;
        }
        let mut cur_shape = shape.clone();
        let mut cur = self.value(a).data().to_vec();
        let mut count = 1usize;
        for &ax in sorted.iter().rev() {
            let (outer, n, inner) = split_axis(&cur_shape, ax);
            let mut next = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &cur[(o * n + k) * inner..(o * n + k + 1) * inner];
                    let dst = &mut next[o * inner..(o + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            count *= n;
            cur_shape.remove(ax);
            cur = next;
        }
        if mean {
            let inv = 1.0 / count as f64;
            cur.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(cur_shape, cur)?;
        Ok(self.push(
            value,
            Op::Reduce {
                a,
                axes: sorted,
                mean,
            },
        ))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    /// Arithmetic mean over `axes`; the axes are removed from the shape.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_var(a)?;
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check_var(a)?;
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() {
            return Err(invalid(
                "permute",
                format!("permutation {perm:?} for rank {}", shape.len()),
            ));
        }
        for &p in perm {
            check_axis("permute", p, shape.len())?;
            if core::mem::replace(&mut seen[p], true) {
                return Err(Error::RepeatedAxis {
                    op: "permute",
                    axis: p,
                });
            }
        }
        let data = permute_data(self.value(a).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty { op: "concat" })?;
        for &v in inputs {
            self.check_var(v)?;
        }
        let base = self.shape(first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                data.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Gathers `indices` along `axis` (indices may repeat).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_var(a)?;
        let shape = self.shape(a).to_vec();
        check_axis("index_select", axis, shape.len())?;
        if indices.is_empty() {
            return Err(Error::Empty { op: "index_select" });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(invalid(
                "index_select",
                format!("index {bad} out of range {n}"),
            ));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                data.extend_from_slice(&src[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::IndexSelect {
                a,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_var(a)?;
        let shape = self.shape(a).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = libm::exp(x[idx(k)] - max);
                    y[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[idx(k)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, y)?;
        Ok(self.push(value, Op::Softmax { a, axis }))
    }

    /// Euclidean norm along `axis` (axis removed).
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_var(a)?;
        let shape = self.shape(a).to_vec();
        check_axis("l2_norm", axis, shape.len())?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = x[(o * n + k) * inner + i];
                    out[o * inner + i] += v * v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = libm::sqrt(*v));
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::L2Norm { a, axis }))
    }
}

// ---- backward rules ----

pub(super) fn binary_backward(sink: &mut GradSink, kind: BinaryKind, a: Var, b: Var, g: &[f64]) {
    let (ta, tb) = (sink.value(a), sink.value(b));
    let out_shape = broadcast_shape(ta.shape(), tb.shape()).expect("checked in forward");
    let ma = broadcast_map(&out_shape, ta.shape());
    let mb = broadcast_map(&out_shape, tb.shape());
    let (da, db) = (ta.data(), tb.data());
    let (na, nb) = (da.len(), db.len());
    let want_a = sink.wants(a);
    let want_b = sink.wants(b);
    let mut ga = if want_a { vec![0.0; na] } else { Vec::new() };
    let mut gb = if want_b { vec![0.0; nb] } else { Vec::new() };
    for (i, &gi) in g.iter().enumerate() {
        let (ia, ib) = (at(&ma, i), at(&mb, i));
        let (x, y) = (da[ia], db[ib]);
        let (dx, dy) = match kind {
            BinaryKind::Add => (gi, gi),
            BinaryKind::Sub => (gi, -gi),
            BinaryKind::Mul => (gi * y, gi * x),
            BinaryKind::Div => (gi / y, -gi * x / (y * y)),
        };
        if want_a {
            ga[ia] += dx;
        }
        if want_b {
            gb[ib] += dy;
        }
    }
    if want_a {
        sink.add(a, ga);
    }
    if want_b {
        sink.add(b, gb);
    }
}

pub(super) fn unary_backward(
    sink: &mut GradSink,
    kind: UnaryKind,
    a: Var,
    out: &Tensor,
    g: &[f64],
) {
    let x = sink.value(a).data();
    let y = out.data();
    let ga = (0..g.len())
        .map(|i| {
            let d = match kind {
                UnaryKind::Relu => {
                    if x[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                UnaryKind::Tanh => 1.0 - y[i] * y[i],
                UnaryKind::Sqrt => {
                    if y[i] > 0.0 {
                        0.5 / y[i]
                    } else {
                        0.0
                    }
                }
                UnaryKind::Exp => y[i],
                UnaryKind::Log => 1.0 / x[i],
                UnaryKind::Neg => -1.0,
            };
            g[i] * d
        })
        .collect();
    sink.add(a, ga);
}

pub(super) fn reduce_backward(sink: &mut GradSink, a: Var, axes: &[usize], mean: bool, g: &[f64]) {
    let in_shape = sink.value(a).shape().to_vec();
    let mut kept = in_shape.clone();
    let mut count = 1usize;
    for &ax in axes {
        count *= kept[ax];
        kept[ax] = 1;
    }
    let scale = if mean { 1.0 / count as f64 } else { 1.0 };
    let ga = match broadcast_map(&in_shape, &kept) {
        Some(map) => map.iter().map(|&j| g[j] * scale).collect(),
        None => g.iter().map(|v| v * scale).collect(),
    };
    sink.add(a, ga);
}

pub(super) fn permute_backward(sink: &mut GradSink, a: Var, perm: &[usize], g: &[f64]) {
    let in_shape = sink.value(a).shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let ga = permute_data(g, &out_shape, &inverse);
    sink.add(a, ga);
}

pub(super) fn concat_backward(sink: &mut GradSink, inputs: &[Var], axis: usize, g: &[f64]) {
    let shapes: Vec<Vec<usize>> = inputs
        .iter()
        .map(|&v| sink.value(v).shape().to_vec())
        .collect();
    let (outer, _, inner) = split_axis(&shapes[0], axis);
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut grads: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(numel(s)))
        .collect();
    for o in 0..outer {
        let mut offset = 0;
        for (k, s) in shapes.iter().enumerate() {
            let n = s[axis];
            let start = (o * total + offset) * inner;
            grads[k].extend_from_slice(&g[start..start + n * inner]);
            offset += n;
        }
    }
    for (&v, gv) in inputs.iter().zip(grads) {
        sink.add(v, gv);
    }
}

pub(super) fn index_select_backward(
    sink: &mut GradSink,
    a: Var,
    axis: usize,
    indices: &[usize],
    g: &[f64],
) {
    let shape = sink.value(a).shape().to_vec();
    let (outer, n, inner) = split_axis(&shape, axis);
    let m = indices.len();
    let mut ga = vec![0.0; numel(&shape)];
    for o in 0..outer {
        for (j, &i) in indices.iter().enumerate() {
            let src = &g[(o * m + j) * inner..(o * m + j + 1) * inner];
            let dst = &mut ga[(o * n + i) * inner..(o * n + i + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    sink.add(a, ga);
}

pub(super) fn softmax_backward(sink: &mut GradSink, a: Var, axis: usize, out: &Tensor, g: &[f64]) {
    let (outer, n, inner) = split_axis(out.shape(), axis);
    let y = out.data();
    let mut ga = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
            for k in 0..n {
                ga[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
    sink.add(a, ga);
}

pub(super) fn l2norm_backward(sink: &mut GradSink, a: Var, axis: usize, out: &Tensor, g: &[f64]) {
    let x = sink.value(a);
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let norms = out.data();
    let mut ga = vec![0.0; xd.len()];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                let nrm = norms[o * inner + i];
                if nrm > 0.0 {
                    let j = (o * n + k) * inner + i;
                    ga[j] = g[o * inner + i] * xd[j] / nrm;
                }
            }
        }
    }
    sink.add(a, ga);
}
