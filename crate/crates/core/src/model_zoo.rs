//! Width-scaled ResNet-34 speaker embedding backbones.
//!
//! Stem: vanilla 3×3 convolution, batch norm, relu. Four stages of basic
//! residual blocks, the first block of stages 2–4 striding by 2 in frequency
//! and time. A pooling head collapses time and an affine layer produces the
//! embedding. Every convolution except the stem uses the configured kind.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::autodiff::{BatchNormMode, BatchStats, RunningStats, Tape, Var};
use crate::dynamic_conv::{
    linear_bound, ConvLayer, ConvSpec, DtdyConv, DtdySpec, HiddenWidth, TdyConv, TdySpec,
    TDY_BASIS, TDY_REDUCTION,
};
use crate::error::{invalid, Error, Result};
use crate::features::N_MELS;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BASE_CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub const RESNET34_BLOCKS: [usize; 4] = [3, 4, 6, 3];
pub const DEFAULT_EMB_DIM: usize = 512;
pub const DEFAULT_REDUCTION: f64 = 0.125;
/// Hidden width of the attentive statistics pooling scorer.
pub const DEFAULT_ASP_HIDDEN: usize = 128;
/// Floor on the pooled variance before the square root.
pub const ASP_VAR_FLOOR: f64 = 1e-9;
/// Product of the time strides of the backbone.
pub const TIME_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Vanilla,
    Tdy,
    Dtdy,
}

impl ConvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvKind::Vanilla => "vanilla",
            ConvKind::Tdy => "tdy",
            ConvKind::Dtdy => "dtdy",
        }
    }
}

impl fmt::Display for ConvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ConvKind::Vanilla),
            "tdy" => Ok(ConvKind::Tdy),
            "dtdy" => Ok(ConvKind::Dtdy),
            _ => Err(invalid("conv_kind", format!("unknown kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Tap,
    Asp,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Tap => "tap",
            Pooling::Asp => "asp",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tap" => Ok(Pooling::Tap),
            "asp" => Ok(Pooling::Asp),
            _ => Err(invalid("pooling", format!("unknown pooling {s:?}"))),
        }
    }
}

impl FromStr for HiddenWidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(HiddenWidth::PooledSum),
            "product" => Ok(HiddenWidth::ChannelFreqProduct),
            _ => Err(invalid("hidden_width", format!("unknown rule {s:?}"))),
        }
    }
}

/// `round(width·[64, 128, 256, 512])`.
pub fn stage_channels(width: f64) -> [usize; 4] {
    BASE_CHANNELS.map(|c| libm::round(width * c as f64) as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub width_mult: f64,
    pub stage_channels: [usize; 4],
    pub stage_blocks: [usize; 4],
    pub conv_kind: ConvKind,
    /// Φ generator reduction ratio (DTDY).
    pub reduction: f64,
    pub hidden: HiddenWidth,
    /// Basis kernel count (TDY).
    pub basis: usize,
    pub pooling: Pooling,
    pub emb_dim: usize,
    pub asp_hidden: usize,
    pub n_mels: usize,
}

impl ModelConfig {
    pub fn resnet34(kind: ConvKind, width: f64) -> Self {
        ModelConfig {
            width_mult: width,
            stage_channels: stage_channels(width),
            stage_blocks: RESNET34_BLOCKS,
            conv_kind: kind,
            reduction: DEFAULT_REDUCTION,
            hidden: HiddenWidth::default(),
            basis: TDY_BASIS,
            pooling: Pooling::Tap,
            emb_dim: DEFAULT_EMB_DIM,
            asp_hidden: DEFAULT_ASP_HIDDEN,
            n_mels: N_MELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(invalid(
                "model_config",
                format!("channel counts {:?} must be positive", self.stage_channels),
            ));
        }
        if self.stage_blocks.contains(&0) {
            return Err(invalid(
                "model_config",
                "every stage needs at least one block",
            ));
        }
        if self.emb_dim < 8 {
            return Err(invalid("model_config", "embedding size must be at least 8"));
        }
        if !(self.reduction > 0.0) || self.basis == 0 || self.asp_hidden == 0 || self.n_mels == 0 {
            return Err(invalid(
                "model_config",
                "reduction, basis count, ASP width and Mel count must be positive",
            ));
        }
        Ok(())
    }

    /// Short identifier such as `dtdy-resnet34-x0.25`.
    pub fn name(&self) -> String {
        let depth = if self.stage_blocks == RESNET34_BLOCKS {
            String::from("resnet34")
        } else {
            let b = self.stage_blocks;
            format!("resnet{}-{}-{}-{}", b[0], b[1], b[2], b[3])
        };
        format!("{}-{}-x{}", self.conv_kind, depth, self.width_mult)
    }

    /// Frequency size seen by each stage `[stem, stage 1, …, stage 4]`.
    pub fn stage_freqs(&self) -> [usize; 5] {
        let mut f = [self.n_mels; 5];
        for s in 1..4 {
            f[s + 1] = f[s].div_ceil(2);
        }
        f
    }

    /// Output time bins for `t` input frames.
    pub fn output_frames(&self, t: usize) -> usize {
        (0..3).fold(t, |t, _| t.div_ceil(2))
    }

    fn pooled_dim(&self) -> usize {
        let d = self.stage_channels[3] * self.stage_freqs()[4];
        match self.pooling {
            Pooling::Tap => d,
            Pooling::Asp => 2 * d,
        }
    }
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    fn new(params: &mut ParamStore, buffers: &mut ParamStore, prefix: &str, c: usize) -> Self {
        BatchNorm {
            gamma: params.add(format!("{prefix}.gamma"), Tensor::full([c], 1.0)),
            beta: params.add(format!("{prefix}.beta"), Tensor::zeros([c])),
            running_mean: buffers.add(format!("{prefix}.running_mean"), Tensor::zeros([c])),
            running_var: buffers.add(format!("{prefix}.running_var"), Tensor::full([c], 1.0)),
        }
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    name: String,
    conv1: ConvLayer,
    bn1: BatchNorm,
    conv2: ConvLayer,
    bn2: BatchNorm,
    shortcut: Option<(ConvLayer, BatchNorm)>,
}

#[derive(Clone, Debug)]
enum PoolHead {
    Tap,
    Asp { w: ParamId, b: ParamId, v: ParamId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics gathered by one training-mode forward pass.
#[derive(Clone, Debug, Default)]
pub struct StatsUpdate {
    entries: Vec<(ParamId, ParamId, BatchStats)>,
}

impl StatsUpdate {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, emb_dim]`
    pub embedding: Var,
    /// Last stage feature map `[B, C, F', T']`.
    pub features: Var,
    /// Post-activation outputs by layer name: `stem`, then every block.
    pub taps: Vec<(String, Var)>,
    pub stats: StatsUpdate,
}

impl ModelOutput {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    buffers: ParamStore,
    stem: ConvLayer,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
    pool: PoolHead,
    embed_w: ParamId,
    embed_b: ParamId,
    classifier: Option<(ParamId, ParamId)>,
}

fn make_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    spec: ConvSpec,
    f_nom: usize,
    rng: &mut R,
) -> Result<ConvLayer> {
    Ok(match cfg.conv_kind {
        ConvKind::Vanilla => ConvLayer::new_static(store, prefix, spec, rng)?,
        ConvKind::Dtdy => ConvLayer::Dtdy(DtdyConv::new(
            store,
            prefix,
            DtdySpec {
                conv: spec,
                f_nom,
                reduction: cfg.reduction,
                hidden: cfg.hidden,
            },
            rng,
        )?),
        ConvKind::Tdy => ConvLayer::Tdy(TdyConv::new(
            store,
            prefix,
            TdySpec {
                conv: spec,
                f_nom,
                basis: cfg.basis,
                reduction: TDY_REDUCTION,
            },
            rng,
        )?),
    })
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let ch = config.stage_channels;
        let freqs = config.stage_freqs();
        let stem = ConvLayer::new_static(
            &mut params,
            "stem.conv",
            ConvSpec::new(1, ch[0], 3, 1, 1),
            rng,
        )?;
        let stem_bn = BatchNorm::new(&mut params, &mut buffers, "stem.bn", ch[0]);
        let mut blocks = Vec::new();
        let mut c_in = ch[0];
        for s in 0..4 {
            let c = ch[s];
            for i in 0..config.stage_blocks[s] {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let f_in = if i == 0 { freqs[s] } else { freqs[s + 1] };
                let name = format!("stages.{s}.{i}");
                let conv1 = make_conv(
                    &mut params,
                    &format!("{name}.conv1"),
                    &config,
                    ConvSpec::new(c_in, c, 3, stride, 1),
                    f_in,
                    rng,
                )?;
                let bn1 = BatchNorm::new(&mut params, &mut buffers, &format!("{name}.bn1"), c);
                let conv2 = make_conv(
                    &mut params,
                    &format!("{name}.conv2"),
                    &config,
                    ConvSpec::new(c, c, 3, 1, 1),
                    freqs[s + 1],
                    rng,
                )?;
                let bn2 = BatchNorm::new(&mut params, &mut buffers, &format!("{name}.bn2"), c);
                let shortcut = if stride != 1 || c_in != c {
                    let conv = ConvLayer::new_static(
                        &mut params,
                        &format!("{name}.shortcut.conv"),
                        ConvSpec::new(c_in, c, 1, stride, 0),
                        rng,
                    )?;
                    let bn = BatchNorm::new(
                        &mut params,
                        &mut buffers,
                        &format!("{name}.shortcut.bn"),
                        c,
                    );
                    Some((conv, bn))
                } else {
                    None
                };
                blocks.push(BasicBlock {
                    name,
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                });
                c_in = c;
            }
        }
        let frame_dim = ch[3] * freqs[4];
        let pool = match config.pooling {
            Pooling::Tap => PoolHead::Tap,
            Pooling::Asp => {
                let a = config.asp_hidden;
                PoolHead::Asp {
                    w: params.add(
                        "pool.w",
                        Tensor::uniform([a, frame_dim], linear_bound(frame_dim), rng),
                    ),
                    b: params.add("pool.b", Tensor::zeros([a])),
                    v: params.add("pool.v", Tensor::uniform([1, a], linear_bound(a), rng)),
                }
            }
        };
        let d = config.pooled_dim();
        let embed_w = params.add(
            "embed.weight",
            Tensor::uniform([config.emb_dim, d], linear_bound(d), rng),
        );
        let embed_b = params.add(
            "embed.bias",
            Tensor::uniform([config.emb_dim], linear_bound(d), rng),
        );
        Ok(Model {
            config,
            params,
            buffers,
            stem,
            stem_bn,
            blocks,
            pool,
            embed_w,
            embed_b,
            classifier: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    /// Exact number of scalar parameters, heads included (running statistics
    /// excluded).
    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Names of the layers whose activations are exposed as taps.
    pub fn tap_names(&self) -> Vec<String> {
        let mut names = vec![String::from("stem")];
        names.extend(self.blocks.iter().map(|b| b.name.clone()));
        names
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        core::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| {
            [
                Some(&b.conv1),
                Some(&b.conv2),
                b.shortcut.as_ref().map(|(c, _)| c),
            ]
            .into_iter()
            .flatten()
        }))
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind_where(tape, |_| false)
    }

    fn batch_norm(
        &self,
        tape: &mut Tape,
        params: &Bound,
        bn: &BatchNorm,
        x: Var,
        mode: Mode,
        stats: &mut StatsUpdate,
    ) -> Result<Var> {
        let (gamma, beta) = (params.var(bn.gamma), params.var(bn.beta));
        match mode {
            Mode::Train => {
                let (y, s) = tape.batch_norm2d(x, gamma, beta, BatchNormMode::Train)?;
                if let Some(s) = s {
                    stats.entries.push((bn.running_mean, bn.running_var, s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let running = RunningStats {
                    mean: self.buffers.get(bn.running_mean).data().to_vec(),
                    var: self.buffers.get(bn.running_var).data().to_vec(),
                };
                let (y, _) = tape.batch_norm2d(x, gamma, beta, BatchNormMode::Eval(&running))?;
                Ok(y)
            }
        }
    }

    /// Runs the backbone and head on `x` `[B, 1, n_mels, T]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<ModelOutput> {
        self.forward_with_hook(tape, params, x, mode, &mut |_, _, v| Ok(v))
    }

    /// [`Model::forward`] where every tap output passes through `hook`
    /// (called with the tap name) before the network continues from it.
    pub fn forward_with_hook(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        mode: Mode,
        hook: &mut dyn FnMut(&str, &mut Tape, Var) -> Result<Var>,
    ) -> Result<ModelOutput> {
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1] != 1 {
            return Err(invalid(
                "forward_embedding",
                format!("expected [B, 1, F, T] input, got {xs:?}"),
            ));
        }
        if xs[2] != self.config.n_mels {
            return Err(Error::DimMismatch {
                op: "forward_embedding",
                dim: "Mel bins",
                expected: self.config.n_mels,
                got: xs[2],
            });
        }
        let mut stats = StatsUpdate::default();
        let mut taps = Vec::with_capacity(self.blocks.len() + 1);
        let h = self.stem.forward(tape, params, x)?;
        let h = self.batch_norm(tape, params, &self.stem_bn, h, mode, &mut stats)?;
        let h = tape.relu(h)?;
        let mut h = hook("stem", tape, h)?;
        taps.push((String::from("stem"), h));
        for block in &self.blocks {
            let y = block.conv1.forward(tape, params, h)?;
            let y = self.batch_norm(tape, params, &block.bn1, y, mode, &mut stats)?;
            let y = tape.relu(y)?;
            let y = block.conv2.forward(tape, params, y)?;
            let y = self.batch_norm(tape, params, &block.bn2, y, mode, &mut stats)?;
            let skip = match &block.shortcut {
                Some((conv, bn)) => {
                    let s = conv.forward(tape, params, h)?;
                    self.batch_norm(tape, params, bn, s, mode, &mut stats)?
                }
                None => h,
            };
            let y = tape.add(y, skip)?;
            let y = tape.relu(y)?;
            h = hook(&block.name, tape, y)?;
            taps.push((block.name.clone(), h));
        }
        let pooled = match &self.pool {
            PoolHead::Tap => tap_pool(tape, h)?,
            PoolHead::Asp { w, b, v } => {
                let frames = frames_by_time(tape, h)?;
                asp_pool(tape, frames, params.var(*w), params.var(*b), params.var(*v))?
            }
        };
        let embedding = tape.affine(
            pooled,
            params.var(self.embed_w),
            Some(params.var(self.embed_b)),
        )?;
        Ok(ModelOutput {
            embedding,
            features: h,
            taps,
            stats,
        })
    }

    /// Per-time-bin embeddings `[B, T', emb_dim]` from a last-stage feature
    /// map: each bin's `C·F'` feature vector goes through the embedding layer
    /// (with ASP, through the mean half of it).
    pub fn frame_embeddings(&self, tape: &mut Tape, params: &Bound, features: Var) -> Result<Var> {
        let frames = frames_by_time(tape, features)?;
        let (w, b) = (params.var(self.embed_w), params.var(self.embed_b));
        match self.pool {
            PoolHead::Tap => tape.affine(frames, w, Some(b)),
            PoolHead::Asp { .. } => {
                let d = tape.shape(frames)[2];
                let w_mean = self.embed_mean_half(tape, w, d)?;
                tape.affine(frames, w_mean, Some(b))
            }
        }
    }

    fn embed_mean_half(&self, tape: &mut Tape, w: Var, d: usize) -> Result<Var> {
        let idx: Vec<usize> = (0..d).collect();
        tape.index_select(w, 1, &idx)
    }

    /// Eval-mode embeddings `[B, emb_dim]` for a `[B, 1, F, T]` batch.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv, Mode::Eval)?;
        Ok(tape.value(out.embedding).clone())
    }

    /// Eval-mode frame embeddings `[B, T', emb_dim]`.
    pub fn embed_frames(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv, Mode::Eval)?;
        let frames = self.frame_embeddings(&mut tape, &params, out.features)?;
        Ok(tape.value(frames).clone())
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, update: &StatsUpdate) {
        for (mean_id, var_id, batch) in &update.entries {
            let mut running = RunningStats {
                mean: self.buffers.get(*mean_id).data().to_vec(),
                var: self.buffers.get(*var_id).data().to_vec(),
            };
            running.update(batch);
            self.buffers
                .get_mut(*mean_id)
                .data_mut()
                .copy_from_slice(&running.mean);
            self.buffers
                .get_mut(*var_id)
                .data_mut()
                .copy_from_slice(&running.var);
        }
    }

    /// Adds an `emb_dim → n_speakers` classification layer named
    /// `classifier.*`. A zero head starts at uniform class probabilities.
    pub fn attach_classifier<R: Rng + ?Sized>(
        &mut self,
        n_speakers: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Result<()> {
        if n_speakers < 2 {
            return Err(invalid("attach_classifier", "need at least two speakers"));
        }
        if self.classifier.is_some() {
            return Err(invalid("attach_classifier", "classifier already attached"));
        }
        let e = self.config.emb_dim;
        let (w, b) = if zero_init {
            (Tensor::zeros([n_speakers, e]), Tensor::zeros([n_speakers]))
        } else {
            (
                Tensor::uniform([n_speakers, e], linear_bound(e), rng),
                Tensor::uniform([n_speakers], linear_bound(e), rng),
            )
        };
        let wid = self.params.add("classifier.weight", w);
        let bid = self.params.add("classifier.bias", b);
        self.classifier = Some((wid, bid));
        Ok(())
    }

    /// Re-links a classifier whose tensors are already in the store (after
    /// loading a checkpoint).
    pub fn link_classifier(&mut self) -> Result<()> {
        let w = self.params.find("classifier.weight");
        let b = self.params.find("classifier.bias");
        match (w, b) {
            (Some(w), Some(b)) => {
                self.classifier = Some((w, b));
                Ok(())
            }
            _ => Err(invalid(
                "link_classifier",
                "no classifier tensors in the store",
            )),
        }
    }

    pub fn classifier(&self) -> Option<(ParamId, ParamId)> {
        self.classifier
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.classifier.map(|(w, _)| self.params.get(w).shape()[0])
    }

    pub fn classifier_logits(
        &self,
        tape: &mut Tape,
        params: &Bound,
        embedding: Var,
    ) -> Result<Var> {
        let (w, b) = self
            .classifier
            .ok_or_else(|| invalid("classifier_logits", "no classifier attached"))?;
        tape.affine(embedding, params.var(w), Some(params.var(b)))
    }

    /// The same network with every dynamic convolution replaced by a static
    /// one holding its `W0` kernel. Other tensors are copied by name.
    pub fn to_static(&self) -> Result<Model> {
        if self.config.conv_kind == ConvKind::Tdy {
            return Err(invalid("to_static", "TDY layers have no static kernel"));
        }
        let cfg = ModelConfig {
            conv_kind: ConvKind::Vanilla,
            ..self.config.clone()
        };
        let mut out = Model::new(cfg, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        if let Some((w, _)) = self.classifier {
            let n = self.params.get(w).shape()[0];
            out.attach_classifier(n, true, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        }
        for id in out.params.ids().collect::<Vec<_>>() {
            let name = String::from(out.params.name(id));
            let src = self.params.find(&name).or_else(|| {
                name.strip_suffix(".weight")
                    .and_then(|p| self.params.find(&format!("{p}.w0")))
            });
            let src = src.ok_or_else(|| invalid("to_static", format!("no source for {name}")))?;
            *out.params.get_mut(id) = self.params.get(src).clone();
        }
        out.buffers = self.buffers.clone();
        Ok(out)
    }
}

/// `[B, C, F', T']` → `[B, T', C·F']`.
pub fn frames_by_time(tape: &mut Tape, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 {
        return Err(invalid(
            "frames_by_time",
            format!("expected rank 4, got {s:?}"),
        ));
    }
    let p = tape.permute(features, &[0, 3, 1, 2])?;
    tape.reshape(p, &[s[0], s[3], s[1] * s[2]])
}

/// Temporal average pooling `[B, C, F', T']` → `[B, C·F']`.
pub fn tap_pool(tape: &mut Tape, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 {
        return Err(invalid("tap_pool", format!("expected rank 4, got {s:?}")));
    }
    let m = tape.mean(features, &[3])?;
    tape.reshape(m, &[s[0], s[1] * s[2]])
}

/// Attentive statistics pooling of `frames` `[B, T', D]` → `[B, 2D]`.
///
/// `e_t = v·tanh(W·h_t + b)`, `α = softmax_t(e)`, output `[μ, σ]` with
/// `μ = Σ α_t h_t` and `σ = √max(Σ α_t h_t² − μ², 1e-9)`.
pub fn asp_pool(tape: &mut Tape, frames: Var, w: Var, b: Var, v: Var) -> Result<Var> {
    let s = tape.shape(frames).to_vec();
    if s.len() != 3 {
        return Err(invalid(
            "asp_pool",
            format!("expected [B, T, D] frames, got {s:?}"),
        ));
    }
    let hid = tape.affine(frames, w, Some(b))?;
    let hid = tape.tanh(hid)?;
    let e = tape.affine(hid, v, None)?;
    let alpha = tape.softmax(e, 1)?;
    let weighted = tape.mul(frames, alpha)?;
    let mu = tape.sum(weighted, &[1])?;
    let sq = tape.mul(frames, frames)?;
    let weighted_sq = tape.mul(sq, alpha)?;
    let second = tape.sum(weighted_sq, &[1])?;
    let mu_sq = tape.mul(mu, mu)?;
    let var = tape.sub(second, mu_sq)?;
    let var = tape.clamp_min(var, ASP_VAR_FLOOR)?;
    let sigma = tape.sqrt(var)?;
    tape.concat(&[mu, sigma], 1)
}
