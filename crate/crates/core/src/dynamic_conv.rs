//! Temporal dynamic convolution layers.
//!
//! A DTDY layer uses the per-time-bin kernel `W(t) = W0 + P·Φ(t)·Qᵀ`, computed
//! in factored form: a static `k×k` convolution with `W0`, a `k×k` compression
//! `Q` into `L` latent channels, a per-time-bin `L×L` mix `Φ(t)` and a `1×1`
//! expansion `P`. `Φ(t)` comes from a two-layer generator on a pooled
//! descriptor of time bin `t`, squashed elementwise by `tanh`.
//!
//! The TDY layer is the attention-over-basis alternative: `K` basis kernels
//! mixed per time bin by softmax weights from the same kind of descriptor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Basis kernel count of the TDY layer.
pub const TDY_BASIS: usize = 6;
/// Reduction ratio of the TDY attention generator.
pub const TDY_REDUCTION: f64 = 0.125;

/// `round(√(2·c_in + 2·c_out))`, at least 1.
pub fn latent_dim(c_in: usize, c_out: usize) -> usize {
    let l = libm::round(libm::sqrt((2 * c_in + 2 * c_out) as f64)) as usize;
    l.max(1)
}

/// Rule for the hidden width of the `Φ` generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HiddenWidth {
    /// `round((C_in + F)·r)`: the reduction applied to the descriptor length.
    PooledSum,
    /// `round(C_in·F·r)`.
    #[default]
    ChannelFreqProduct,
}

impl HiddenWidth {
    pub fn width(self, c_in: usize, f_nom: usize, reduction: f64) -> usize {
        let base = match self {
            HiddenWidth::PooledSum => c_in + f_nom,
            HiddenWidth::ChannelFreqProduct => c_in * f_nom,
        };
        (libm::round(base as f64 * reduction) as usize).max(1)
    }
}

/// Square-kernel convolution geometry. `stride` and `padding` are
/// `(frequency, time)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    /// Output `(F', T')` for an `(F, T)` input.
    pub fn output_size(&self, f: usize, t: usize) -> (usize, usize) {
        let out = |n: usize, s: usize, p: usize| (n + 2 * p).saturating_sub(self.kernel) / s + 1;
        (
            out(f, self.stride.0, self.padding.0),
            out(t, self.stride.1, self.padding.1),
        )
    }

    fn kernel_numel(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.kernel == 0 {
            return Err(invalid(op, "channels and kernel size must be positive"));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(invalid(op, "stride must be at least 1"));
        }
        Ok(())
    }
}

/// Kaiming-style uniform bound for a fan-in of `fan_in`.
pub(crate) fn conv_bound(fan_in: usize) -> f64 {
    libm::sqrt(6.0 / fan_in as f64)
}

pub(crate) fn linear_bound(fan_in: usize) -> f64 {
    1.0 / libm::sqrt(fan_in as f64)
}

/// Per-time-bin descriptor `[B, T, F + C]`: the channel mean (length `F`)
/// followed by the frequency mean (length `C`).
fn descriptor(tape: &mut Tape, x: Var) -> Result<Var> {
    let over_c = tape.mean(x, &[1])?;
    let over_f = tape.mean(x, &[2])?;
    let d = tape.concat(&[over_c, over_f], 1)?;
    tape.permute(d, &[0, 2, 1])
}

fn check_input(
    tape: &Tape,
    op: &'static str,
    x: Var,
    c_in: usize,
    f_nom: Option<usize>,
) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(invalid(
            op,
            format!("expected [B, C, F, T] input, got {s:?}"),
        ));
    }
    if s[1] != c_in {
        return Err(Error::DimMismatch {
            op,
            dim: "input channels (C_in)",
            expected: c_in,
            got: s[1],
        });
    }
    if let Some(f) = f_nom {
        if s[2] != f {
            return Err(Error::DimMismatch {
                op,
                dim: "frequency bins (F_nom)",
                expected: f,
                got: s[2],
            });
        }
    }
    Ok(())
}

/// Input time indices sampled by each output bin.
fn output_time_indices(t_out: usize, step: usize) -> Vec<usize> {
    (0..t_out).map(|t| t * step).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DtdySpec {
    pub conv: ConvSpec,
    /// Frequency size the generator is built for.
    pub f_nom: usize,
    pub reduction: f64,
    pub hidden: HiddenWidth,
}

impl DtdySpec {
    pub fn latent(&self) -> usize {
        latent_dim(self.conv.c_in, self.conv.c_out)
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
            .width(self.conv.c_in, self.f_nom, self.reduction)
    }

    pub fn descriptor_len(&self) -> usize {
        self.conv.c_in + self.f_nom
    }

    pub fn param_count(&self) -> usize {
        let c = &self.conv;
        let (l, h, d) = (self.latent(), self.hidden_width(), self.descriptor_len());
        c.kernel_numel()
            + l * c.c_in * c.kernel * c.kernel
            + c.c_out * l
            + h * d
            + h
            + l * l * h
            + l * l
    }
}

/// Parameter handles of one DTDY layer.
#[derive(Clone, Debug)]
pub struct DtdyConv {
    spec: DtdySpec,
    pub w0: ParamId,
    pub q: ParamId,
    pub p: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl DtdyConv {
    /// Registers freshly initialized parameters under `prefix`. The second
    /// generator layer starts at zero, so the layer starts as a static
    /// convolution with `W0`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: DtdySpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.conv.validate("dtdy_conv")?;
        if spec.f_nom == 0 || !(spec.reduction > 0.0) {
            return Err(invalid("dtdy_conv", "F_nom and reduction must be positive"));
        }
        let c = spec.conv;
        let k2 = c.kernel * c.kernel;
        let (l, h, d) = (spec.latent(), spec.hidden_width(), spec.descriptor_len());
        let w0 = store.add(
            format!("{prefix}.w0"),
            Tensor::uniform(
                [c.c_out, c.c_in, c.kernel, c.kernel],
                conv_bound(c.c_in * k2),
                rng,
            ),
        );
        let q = store.add(
            format!("{prefix}.q"),
            Tensor::uniform(
                [l, c.c_in, c.kernel, c.kernel],
                conv_bound(c.c_in * k2),
                rng,
            ),
        );
        let p = store.add(
            format!("{prefix}.p"),
            Tensor::uniform([c.c_out, l, 1, 1], conv_bound(l), rng),
        );
        let fc1_w = store.add(
            format!("{prefix}.fc1_w"),
            Tensor::uniform([h, d], linear_bound(d), rng),
        );
        let fc1_b = store.add(
            format!("{prefix}.fc1_b"),
            Tensor::uniform([h], linear_bound(d), rng),
        );
        let fc2_w = store.add(format!("{prefix}.fc2_w"), Tensor::zeros([l * l, h]));
        let fc2_b = store.add(format!("{prefix}.fc2_b"), Tensor::zeros([l * l]));
        Ok(DtdyConv {
            spec,
            w0,
            q,
            p,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        })
    }

    pub fn spec(&self) -> &DtdySpec {
        &self.spec
    }

    pub fn param_ids(&self) -> [ParamId; 7] {
        [
            self.w0, self.q, self.p, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
        ]
    }

    /// `Φ` for every input time bin, `[B, T, L, L]`.
    pub fn phi_generator(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        check_input(
            tape,
            "phi_generator",
            x,
            self.spec.conv.c_in,
            Some(self.spec.f_nom),
        )?;
        let (b, t) = (tape.shape(x)[0], tape.shape(x)[3]);
        let l = self.spec.latent();
        let d = descriptor(tape, x)?;
        let h = tape.affine(d, params.var(self.fc1_w), Some(params.var(self.fc1_b)))?;
        let h = tape.relu(h)?;
        let phi = tape.affine(h, params.var(self.fc2_w), Some(params.var(self.fc2_b)))?;
        // Bounded so the residual stays at most linear in x; a linear head makes
        // y quadratic in x and a loud transient can run away in eval mode.
        let phi = tape.tanh(phi)?;
        tape.reshape(phi, &[b, t, l, l])
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let phi = self.phi_generator(tape, params, x)?;
        self.forward_with_phi(tape, params, x, phi)
    }

    /// Forward pass with an externally supplied `Φ` of shape `[B, T, L, L]`.
    pub fn forward_with_phi(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        phi: Var,
    ) -> Result<Var> {
        let c = self.spec.conv;
        check_input(tape, "dtdy_forward", x, c.c_in, Some(self.spec.f_nom))?;
        let base = tape.conv2d(x, params.var(self.w0), c.stride, c.padding)?;
        let z = tape.conv2d(x, params.var(self.q), c.stride, c.padding)?;
        let mixed = tape.latent_mix(z, phi, c.stride.1)?;
        let residual = tape.conv2d(mixed, params.var(self.p), (1, 1), (0, 0))?;
        tape.add(base, residual)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdySpec {
    pub conv: ConvSpec,
    pub f_nom: usize,
    pub basis: usize,
    pub reduction: f64,
}

impl TdySpec {
    pub fn new(conv: ConvSpec, f_nom: usize) -> Self {
        TdySpec {
            conv,
            f_nom,
            basis: TDY_BASIS,
            reduction: TDY_REDUCTION,
        }
    }

    pub fn hidden_width(&self) -> usize {
        HiddenWidth::PooledSum.width(self.conv.c_in, self.f_nom, self.reduction)
    }

    pub fn descriptor_len(&self) -> usize {
        self.conv.c_in + self.f_nom
    }

    pub fn param_count(&self) -> usize {
        let (k, h, d) = (self.basis, self.hidden_width(), self.descriptor_len());
        k * self.conv.kernel_numel() + k * self.conv.c_out + h * d + h + k * h + k
    }
}

/// Parameter handles of one TDY layer.
#[derive(Clone, Debug)]
pub struct TdyConv {
    spec: TdySpec,
    /// `[K, C_out, C_in, k, k]`
    pub basis: ParamId,
    /// `[K, C_out]`
    pub biases: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl TdyConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: TdySpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.conv.validate("tdy_conv")?;
        if spec.basis == 0 || spec.f_nom == 0 || !(spec.reduction > 0.0) {
            return Err(invalid(
                "tdy_conv",
                "basis count, F_nom and reduction must be positive",
            ));
        }
        let c = spec.conv;
        let fan_in = c.c_in * c.kernel * c.kernel;
        let (k, h, d) = (spec.basis, spec.hidden_width(), spec.descriptor_len());
        let basis = store.add(
            format!("{prefix}.basis"),
            Tensor::uniform(
                [k, c.c_out, c.c_in, c.kernel, c.kernel],
                conv_bound(fan_in),
                rng,
            ),
        );
        let biases = store.add(format!("{prefix}.biases"), Tensor::zeros([k, c.c_out]));
        let fc1_w = store.add(
            format!("{prefix}.fc1_w"),
            Tensor::uniform([h, d], linear_bound(d), rng),
        );
        let fc1_b = store.add(
            format!("{prefix}.fc1_b"),
            Tensor::uniform([h], linear_bound(d), rng),
        );
        let fc2_w = store.add(
            format!("{prefix}.fc2_w"),
            Tensor::uniform([k, h], linear_bound(h), rng),
        );
        let fc2_b = store.add(format!("{prefix}.fc2_b"), Tensor::zeros([k]));
        Ok(TdyConv {
            spec,
            basis,
            biases,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        })
    }

    pub fn spec(&self) -> &TdySpec {
        &self.spec
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.basis,
            self.biases,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }

    /// Softmax attention over the basis for every input time bin, `[B, T, K]`.
    pub fn attention(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        check_input(
            tape,
            "tdy_attention",
            x,
            self.spec.conv.c_in,
            Some(self.spec.f_nom),
        )?;
        let d = descriptor(tape, x)?;
        let h = tape.affine(d, params.var(self.fc1_w), Some(params.var(self.fc1_b)))?;
        let h = tape.relu(h)?;
        let logits = tape.affine(h, params.var(self.fc2_w), Some(params.var(self.fc2_b)))?;
        tape.softmax(logits, 2)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let att = self.attention(tape, params, x)?;
        self.forward_with_attention(tape, params, x, att)
    }

    /// Forward pass with externally supplied attention `[B, T, K]`.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        attention: Var,
    ) -> Result<Var> {
        let c = self.spec.conv;
        let k = self.spec.basis;
        check_input(tape, "tdy_forward", x, c.c_in, None)?;
        let b = tape.shape(x)[0];
        let basis = tape.reshape(
            params.var(self.basis),
            &[k * c.c_out, c.c_in, c.kernel, c.kernel],
        )?;
        let y = tape.conv2d(x, basis, c.stride, c.padding)?;
        let (fo, to) = (tape.shape(y)[2], tape.shape(y)[3]);
        let bias = tape.reshape(params.var(self.biases), &[k * c.c_out, 1, 1])?;
        let y = tape.add(y, bias)?;
        let y = tape.reshape(y, &[b, k, c.c_out, fo, to])?;
        let att = tape.index_select(attention, 1, &output_time_indices(to, c.stride.1))?;
        let att = tape.permute(att, &[0, 2, 1])?;
        let att = tape.reshape(att, &[b, k, 1, 1, to])?;
        let weighted = tape.mul(y, att)?;
        tape.sum(weighted, &[1])
    }
}

/// A convolution of any supported kind.
#[derive(Clone, Debug)]
pub enum ConvLayer {
    Static { spec: ConvSpec, weight: ParamId },
    Dtdy(DtdyConv),
    Tdy(TdyConv),
}

impl ConvLayer {
    pub fn new_static<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate("conv")?;
        let fan_in = spec.c_in * spec.kernel * spec.kernel;
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::uniform(
                [spec.c_out, spec.c_in, spec.kernel, spec.kernel],
                conv_bound(fan_in),
                rng,
            ),
        );
        Ok(ConvLayer::Static { spec, weight })
    }

    pub fn conv_spec(&self) -> &ConvSpec {
        match self {
            ConvLayer::Static { spec, .. } => spec,
            ConvLayer::Dtdy(l) => &l.spec.conv,
            ConvLayer::Tdy(l) => &l.spec.conv,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            ConvLayer::Static { weight, .. } => vec![*weight],
            ConvLayer::Dtdy(l) => l.param_ids().to_vec(),
            ConvLayer::Tdy(l) => l.param_ids().to_vec(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        match self {
            ConvLayer::Static { spec, weight } => {
                tape.conv2d(x, params.var(*weight), spec.stride, spec.padding)
            }
            ConvLayer::Dtdy(l) => l.forward(tape, params, x),
            ConvLayer::Tdy(l) => l.forward(tape, params, x),
        }
    }
}

/// Exact number of scalar parameters held by `layer`.
pub fn count_layer_params(store: &ParamStore, layer: &ConvLayer) -> usize {
    layer
        .param_ids()
        .iter()
        .map(|&id| store.get(id).numel())
        .sum()
}

/// Plain-loop direct convolution of batch item `b` at a single output
/// location, with the kernel given as `[C_out, C_in, k, k]` data.
#[allow(clippy::too_many_arguments)]
fn direct_conv_at(
    x: &Tensor,
    b: usize,
    kernel: &[f64],
    spec: &ConvSpec,
    co: usize,
    fo: usize,
    to: usize,
) -> f64 {
    let (c_in, f, t) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = spec.kernel;
    let mut acc = 0.0;
    for ci in 0..c_in {
        for ki in 0..k {
            let fi = (fo * spec.stride.0 + ki) as isize - spec.padding.0 as isize;
            if fi < 0 || fi >= f as isize {
                continue;
            }
            for kj in 0..k {
                let ti = (to * spec.stride.1 + kj) as isize - spec.padding.1 as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                acc += kernel[((co * c_in + ci) * k + ki) * k + kj]
                    * x.data()[((b * c_in + ci) * f + fi as usize) * t + ti as usize];
            }
        }
    }
    acc
}

/// Plain-loop descriptor → hidden (relu) → output for one time bin.
fn naive_generator(
    x: &Tensor,
    b: usize,
    t: usize,
    fc1: (&Tensor, &Tensor),
    fc2: (&Tensor, &Tensor),
) -> Vec<f64> {
    let (c, f, nt) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let at = |ci: usize, fi: usize| x.data()[((b * c + ci) * f + fi) * nt + t];
    let mut d = Vec::with_capacity(f + c);
    for fi in 0..f {
        d.push((0..c).map(|ci| at(ci, fi)).sum::<f64>() / c as f64);
    }
    for ci in 0..c {
        d.push((0..f).map(|fi| at(ci, fi)).sum::<f64>() / f as f64);
    }
    let affine = |w: &Tensor, bias: &Tensor, v: &[f64]| -> Vec<f64> {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        (0..rows)
            .map(|r| {
                bias.data()[r]
                    + (0..cols)
                        .map(|j| w.data()[r * cols + j] * v[j])
                        .sum::<f64>()
            })
            .collect()
    };
    let hidden: Vec<f64> = affine(fc1.0, fc1.1, &d)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    affine(fc2.0, fc2.1, &hidden)
}

fn check_oracle_input(x: &Tensor, c_in: usize, f_nom: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != c_in || s[2] != f_nom {
        return Err(Error::ShapeMismatch {
            op: "explicit_oracle",
            lhs: s.to_vec(),
            rhs: vec![0, c_in, f_nom, 0],
        });
    }
    Ok(())
}

/// Reference DTDY output: assembles `W(t') = W0 + P·Φ(t'·s_t)·Qᵀ` for every
/// output time bin and convolves with plain loops. Meant for small shapes.
pub fn dtdy_explicit_oracle(x: &Tensor, layer: &DtdyConv, store: &ParamStore) -> Result<Tensor> {
    let spec = layer.spec;
    let c = spec.conv;
    check_oracle_input(x, c.c_in, spec.f_nom)?;
    let (b, f, t) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (fo, to) = c.output_size(f, t);
    let (l, k2) = (spec.latent(), c.kernel * c.kernel);
    let (w0, q, p) = (store.get(layer.w0), store.get(layer.q), store.get(layer.p));
    let fc1 = (store.get(layer.fc1_w), store.get(layer.fc1_b));
    let fc2 = (store.get(layer.fc2_w), store.get(layer.fc2_b));
    let mut out = Tensor::zeros([b, c.c_out, fo, to]);
    for bi in 0..b {
        for tj in 0..to {
            let phi: Vec<f64> = naive_generator(x, bi, tj * c.stride.1, fc1, fc2)
                .into_iter()
                .map(libm::tanh)
                .collect();
            let mut kernel = w0.data().to_vec();
            for co in 0..c.c_out {
                for ci in 0..c.c_in {
                    for s in 0..k2 {
                        let mut acc = 0.0;
                        for i in 0..l {
                            for j in 0..l {
                                acc += p.data()[co * l + i]
                                    * phi[i * l + j]
                                    * q.data()[(j * c.c_in + ci) * k2 + s];
                            }
                        }
                        kernel[(co * c.c_in + ci) * k2 + s] += acc;
                    }
                }
            }
            for co in 0..c.c_out {
                for fj in 0..fo {
                    let v = direct_conv_at(x, bi, &kernel, &c, co, fj, tj);
                    out.set(&[bi, co, fj, tj], v);
                }
            }
        }
    }
    Ok(out)
}

/// Reference TDY output: per output time bin, the attention-weighted basis
/// kernel and bias applied with plain loops.
pub fn tdy_explicit_oracle(x: &Tensor, layer: &TdyConv, store: &ParamStore) -> Result<Tensor> {
    let spec = layer.spec;
    let c = spec.conv;
    check_oracle_input(x, c.c_in, spec.f_nom)?;
    let (b, f, t) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (fo, to) = c.output_size(f, t);
    let kn = c.kernel_numel();
    let (basis, biases) = (store.get(layer.basis), store.get(layer.biases));
    let fc1 = (store.get(layer.fc1_w), store.get(layer.fc1_b));
    let fc2 = (store.get(layer.fc2_w), store.get(layer.fc2_b));
    let mut out = Tensor::zeros([b, c.c_out, fo, to]);
    for bi in 0..b {
        for tj in 0..to {
            let logits = naive_generator(x, bi, tj * c.stride.1, fc1, fc2);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| libm::exp(v - m)).collect();
            let z: f64 = e.iter().sum();
            let mut kernel = vec![0.0; kn];
            let mut bias = vec![0.0; c.c_out];
            for (k, ek) in e.iter().enumerate() {
                let w = ek / z;
                for (dst, src) in kernel.iter_mut().zip(&basis.data()[k * kn..(k + 1) * kn]) {
                    *dst += w * src;
                }
                for (co, dst) in bias.iter_mut().enumerate() {
                    *dst += w * biases.data()[k * c.c_out + co];
                }
            }
            for co in 0..c.c_out {
                for fj in 0..fo {
                    let v = direct_conv_at(x, bi, &kernel, &c, co, fj, tj) + bias[co];
                    out.set(&[bi, co, fj, tj], v);
                }
            }
        }
    }
    Ok(out)
}
