//! Neural-network operations: matrix products, convolution, normalization
//! and classification loss.

use alloc::vec;
use alloc::vec::Vec;

use super::{GradSink, Op, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of one training batch (variance is unbiased).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running mean/variance used by batch norm in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average with momentum [`BN_MOMENTUM`].
    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    Train,
    Eval(&'a RunningStats),
}

fn conv_geom(
    xs: &[usize],
    ws: &[usize],
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if xs[1] != ws[1] {
        return Err(Error::DimMismatch {
            op: "conv2d",
            dim: "input channels (C_in)",
            expected: ws[1],
            got: xs[1],
        });
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(invalid("conv2d", "stride must be at least 1"));
    }
    let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
    if kh > h + 2 * padding.0 || kw > w + 2 * padding.1 {
        return Err(invalid("conv2d", "kernel larger than padded input"));
    }
    Ok(ConvGeom {
        batch: xs[0],
        c_in: xs[1],
        h,
        w,
        c_out: ws[0],
        kh,
        kw,
        sh: stride.0,
        sw: stride.1,
        ph: padding.0,
        pw: padding.1,
        ho: (h + 2 * padding.0 - kh) / stride.0 + 1,
        wo: (w + 2 * padding.1 - kw) / stride.1 + 1,
    })
}

impl Tape {
    /// Batched matrix product over the last two axes; leading axes must match.
    pub fn matmul_batched(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul_batched",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let r = sa.len();
        let (m, n, n2, p) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if n != n2 {
            return Err(mismatch());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * p];
        for i in 0..batch {
            kernels::gemm(
                m,
                n,
                p,
                &da[i * m * n..],
                false,
                &db[i * n * p..],
                false,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, p]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// `y = x·Wᵀ + b` over the trailing axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: xs,
                rhs: ws,
            });
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            self.check_var(b)?;
            if self.shape(b) != [m] {
                return Err(Error::ShapeMismatch {
                    op: "affine bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / n;
        let mut out = vec![0.0; rows * m];
        kernels::gemm(
            rows,
            n,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(m) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    /// 2-D cross-correlation with zero padding. `x` is `[B, C_in, F, T]`,
    /// `kernel` is `[C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(kernel)?;
        let g = conv_geom(self.shape(x), self.shape(kernel), stride, padding)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(kernel).data(), &g);
        let value = Tensor::new([g.batch, g.c_out, g.ho, g.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w: kernel,
                stride,
                padding,
            },
        ))
    }

    /// Applies a per-time-bin `L×L` matrix to the latent channels of `z`.
    ///
    /// `z` is `[B, L, F, T']`, `phi` is `[B, T, L, L]`; output bin `t'` uses
    /// `phi[:, t'·time_step]`.
    pub fn latent_mix(&mut self, z: Var, phi: Var, time_step: usize) -> Result<Var> {
        self.check_var(z)?;
        self.check_var(phi)?;
        let (zs, ps) = (self.shape(z).to_vec(), self.shape(phi).to_vec());
        let ok = zs.len() == 4
            && ps.len() == 4
            && zs[0] == ps[0]
            && ps[2] == zs[1]
            && ps[3] == zs[1]
            && time_step >= 1
            && (zs[3] - 1) * time_step < ps[1];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "latent_mix",
                lhs: zs,
                rhs: ps,
            });
        }
        let (b, l, f, t_out, t_in) = (zs[0], zs[1], zs[2], zs[3], ps[1]);
        let zd = self.value(z).data();
        let pd = self.value(phi).data();
        let mut out = vec![0.0; zd.len()];
        let mut coef = vec![0.0; t_out];
        for bi in 0..b {
            for i in 0..l {
                for j in 0..l {
                    for (tp, c) in coef.iter_mut().enumerate() {
                        *c = pd[((bi * t_in + tp * time_step) * l + i) * l + j];
                    }
                    for fi in 0..f {
                        let src = &zd[((bi * l + j) * f + fi) * t_out..][..t_out];
                        let dst = &mut out[((bi * l + i) * f + fi) * t_out..][..t_out];
                        for ((d, s), c) in dst.iter_mut().zip(src).zip(&coef) {
                            *d += c * s;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(zs, out)?;
        Ok(self.push(value, Op::LatentMix { z, phi, time_step }))
    }

    /// Batch normalization over every axis except the channel axis 1.
    /// Returns the batch statistics in training mode.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.check_var(x)?;
        self.check_var(gamma)?;
        self.check_var(beta)?;
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(invalid("batch_norm2d", "input needs a channel axis"));
        }
        let c = xs[1];
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::DimMismatch {
                    op: "batch_norm2d",
                    dim: "channels",
                    expected: c,
                    got: self.value(v).numel(),
                });
            }
        }
        let outer = xs[0];
        let inner: usize = xs[2..].iter().product();
        let count = outer * inner;
        let xd = self.value(x).data();
        let (mean, var_biased, stats) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(invalid(
                        "batch_norm2d",
                        "training needs at least two values per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for o in 0..outer {
                        s += xd[(o * c + ch) * inner..][..inner].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for o in 0..outer {
                        ss += xd[(o * c + ch) * inner..][..inner]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| v * count as f64 / (count - 1) as f64)
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval(rs) => {
                if rs.mean.len() != c || rs.var.len() != c {
                    return Err(Error::DimMismatch {
                        op: "batch_norm2d",
                        dim: "running stats",
                        expected: c,
                        got: rs.mean.len(),
                    });
                }
                (rs.mean.clone(), rs.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased
            .iter()
            .map(|v| 1.0 / libm::sqrt(v + BN_EPS))
            .collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for k in base..base + inner {
                    let h = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = gd[ch] * h + bd[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let train = matches!(mode, BatchNormMode::Train);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((v, stats))
    }

    /// Mean softmax cross-entropy of `logits` `[B, C]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_var(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::DimMismatch {
                op: "cross_entropy",
                dim: "batch",
                expected: labels.len(),
                got: s.first().copied().unwrap_or(0),
            });
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
            let lse = max + libm::log(z);
            loss += lse - row[label];
            for k in 0..c {
                probs[i * c + k] = libm::exp(row[k] - lse);
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

// ---- backward rules ----

pub(super) fn matmul_backward(sink: &mut GradSink, a: Var, b: Var, g: &[f64]) {
    let sa = sink.value(a).shape().to_vec();
    let sb = sink.value(b).shape().to_vec();
    let r = sa.len();
    let (m, n, p) = (sa[r - 2], sa[r - 1], sb[r - 1]);
    let batch: usize = sa[..r - 2].iter().product();
    if sink.wants(a) {
        let db = sink.value(b).data();
        let mut ga = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                p,
                n,
                &g[i * m * p..],
                false,
                &db[i * n * p..],
                true,
                &mut ga[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        sink.add(a, ga);
    }
    if sink.wants(b) {
        let da = sink.value(a).data();
        let mut gb = vec![0.0; batch * n * p];
        for i in 0..batch {
            kernels::gemm(
                n,
                m,
                p,
                &da[i * m * n..],
                true,
                &g[i * m * p..],
                false,
                &mut gb[i * n * p..(i + 1) * n * p],
                false,
            );
        }
        sink.add(b, gb);
    }
}

pub(super) fn affine_backward(sink: &mut GradSink, x: Var, w: Var, b: Option<Var>, g: &[f64]) {
    let ws = sink.value(w).shape().to_vec();
    let (m, n) = (ws[0], ws[1]);
    let rows = g.len() / m;
    if sink.wants(x) {
        let mut gx = vec![0.0; rows * n];
        kernels::gemm(
            rows,
            m,
            n,
            g,
            false,
            sink.value(w).data(),
            false,
            &mut gx,
            false,
        );
        sink.add(x, gx);
    }
    if sink.wants(w) {
        let mut gw = vec![0.0; m * n];
        kernels::gemm(
            m,
            rows,
            n,
            g,
            true,
            sink.value(x).data(),
            false,
            &mut gw,
            false,
        );
        sink.add(w, gw);
    }
    if let Some(b) = b {
        if sink.wants(b) {
            let mut gb = vec![0.0; m];
            for row in g.chunks(m) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            sink.add(b, gb);
        }
    }
}

pub(super) fn conv2d_backward(
    sink: &mut GradSink,
    x: Var,
    w: Var,
    stride: (usize, usize),
    padding: (usize, usize),
    g: &[f64],
) {
    let (tx, tw) = (sink.value(x), sink.value(w));
    let geom = conv_geom(tx.shape(), tw.shape(), stride, padding).expect("checked in forward");
    let (dx, dw) =
        kernels::conv2d_backward(tx.data(), tw.data(), g, &geom, sink.wants(x), sink.wants(w));
    if let Some(dx) = dx {
        sink.add(x, dx);
    }
    if let Some(dw) = dw {
        sink.add(w, dw);
    }
}

pub(super) fn latent_mix_backward(
    sink: &mut GradSink,
    z: Var,
    phi: Var,
    time_step: usize,
    g: &[f64],
) {
    let zs = sink.value(z).shape().to_vec();
    let (b, l, f, t_out) = (zs[0], zs[1], zs[2], zs[3]);
    let t_in = sink.value(phi).shape()[1];
    let zd = sink.value(z).data();
    let pd = sink.value(phi).data();
    let want_z = sink.wants(z);
    let want_phi = sink.wants(phi);
    let mut gz = if want_z {
        vec![0.0; zd.len()]
    } else {
        Vec::new()
    };
    let mut gphi = if want_phi {
        vec![0.0; pd.len()]
    } else {
        Vec::new()
    };
    let mut coef = vec![0.0; t_out];
    let mut acc = vec![0.0; t_out];
    for bi in 0..b {
        for i in 0..l {
            for j in 0..l {
                let phi_at = |tp: usize| ((bi * t_in + tp * time_step) * l + i) * l + j;
                if want_z {
                    for (tp, c) in coef.iter_mut().enumerate() {
                        *c = pd[phi_at(tp)];
                    }
                }
                acc.iter_mut().for_each(|v| *v = 0.0);
                for fi in 0..f {
                    let go = &g[((bi * l + i) * f + fi) * t_out..][..t_out];
                    let zoff = ((bi * l + j) * f + fi) * t_out;
                    if want_z {
                        let dst = &mut gz[zoff..zoff + t_out];
                        for ((d, gv), c) in dst.iter_mut().zip(go).zip(&coef) {
                            *d += c * gv;
                        }
                    }
                    if want_phi {
                        for ((a, gv), zv) in acc.iter_mut().zip(go).zip(&zd[zoff..zoff + t_out]) {
                            *a += gv * zv;
                        }
                    }
                }
                if want_phi {
                    for (tp, a) in acc.iter().enumerate() {
                        gphi[phi_at(tp)] += a;
                    }
                }
            }
        }
    }
    if want_z {
        sink.add(z, gz);
    }
    if want_phi {
        sink.add(phi, gphi);
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward(
    sink: &mut GradSink,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    train: bool,
    g: &[f64],
) {
    let xs = sink.value(x).shape().to_vec();
    let (outer, c) = (xs[0], xs[1]);
    let inner: usize = xs[2..].iter().product();
    let count = (outer * inner) as f64;
    let gd = sink.value(gamma).data().to_vec();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for k in base..base + inner {
                sum_g[ch] += g[k];
                sum_gx[ch] += g[k] * xhat[k];
            }
        }
    }
    if sink.wants(x) {
        let mut gx = vec![0.0; g.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let s = gd[ch] * inv_std[ch];
                for k in base..base + inner {
                    gx[k] = if train {
                        s * (g[k] - sum_g[ch] / count - xhat[k] * sum_gx[ch] / count)
                    } else {
                        s * g[k]
                    };
                }
            }
        }
        sink.add(x, gx);
    }
    sink.add(gamma, sum_gx);
    sink.add(beta, sum_g);
}

pub(super) fn cross_entropy_backward(
    sink: &mut GradSink,
    logits: Var,
    labels: &[usize],
    probs: &[f64],
    g: &[f64],
) {
    let b = labels.len();
    let c = probs.len() / b;
    let scale = g[0] / b as f64;
    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
    for (i, &label) in labels.iter().enumerate() {
        gl[i * c + label] -= scale;
    }
    sink.add(logits, gl);
}
