//! Losses, optimizer, learning-rate schedule, batch planning and the
//! single-step update shared by every training front end.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::dynamic_conv::linear_bound;
use crate::error::{invalid, Error, Result};
use crate::model_zoo::{Mode, Model, StatsUpdate};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const AP_INIT_W: f64 = 10.0;
pub const AP_INIT_B: f64 = -5.0;
pub const AP_MIN_W: f64 = 1e-6;
pub const BASE_LR: f64 = 1e-3;
pub const LR_DECAY: f64 = 0.75;
pub const LR_DECAY_EVERY: usize = 10;

/// Angular prototypical loss of `emb` `[N, 2, D]`.
///
/// Row `i` uses `emb[i, 0]` as query and `emb[j, 1]` as prototypes;
/// `S = max(w, 1e-6)·cos(q_i, c_j) + b` and the loss is the mean
/// cross-entropy of `S_i` against class `i`. `w` and `b` are scalars.
pub fn angular_prototypical_loss(tape: &mut Tape, emb: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.shape(emb).to_vec();
    if s.len() != 3 || s[1] != 2 {
        return Err(invalid(
            "angular_prototypical_loss",
            format!("expected [N, 2, D], got {s:?}"),
        ));
    }
    let (n, d) = (s[0], s[2]);
    if n < 2 {
        return Err(invalid(
            "angular_prototypical_loss",
            "need at least two speakers",
        ));
    }
    let unit = |tape: &mut Tape, slot: usize| -> Result<Var> {
        let v = tape.index_select(emb, 1, &[slot])?;
        let v = tape.reshape(v, &[n, d])?;
        let norm = tape.l2_norm(v, 1)?;
        if tape.value(norm).data().contains(&0.0) {
            return Err(Error::ZeroNorm {
                op: "angular_prototypical_loss",
            });
        }
        let norm = tape.reshape(norm, &[n, 1])?;
        tape.div(v, norm)
    };
    let query = unit(tape, 0)?;
    let proto = unit(tape, 1)?;
    let proto_t = tape.permute(proto, &[1, 0])?;
    let cos = tape.matmul_batched(query, proto_t)?;
    let scale = tape.clamp_min(w, AP_MIN_W)?;
    let scaled = tape.mul(cos, scale)?;
    let logits = tape.add(scaled, b)?;
    let labels: Vec<usize> = (0..n).collect();
    tape.cross_entropy(logits, &labels)
}

/// Mean cross-entropy of `emb·Wᵀ + bias` against `labels`.
pub fn softmax_loss(
    tape: &mut Tape,
    emb: Var,
    weight: Var,
    bias: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = tape.affine(emb, weight, Some(bias))?;
    tape.cross_entropy(logits, labels)
}

/// Unweighted sum of the two losses.
pub fn combined_loss(tape: &mut Tape, ap: Var, sm: Var) -> Result<Var> {
    tape.add(ap, sm)
}

/// `1e-3 · 0.75^⌊epoch / 10⌋`.
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}

/// Step decay: `base · decay^⌊epoch / every⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: BASE_LR,
            decay: LR_DECAY,
            every: LR_DECAY_EVERY,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.base * libm::pow(self.decay, (epoch / self.every.max(1)) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay·θ` before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

/// Adam moments for the tensors of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `grads[i]` belongs to the `i`-th tensor of `store`;
    /// tensors without a gradient are left untouched.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(invalid(
                "adam_step",
                format!(
                    "{} gradients and {} moment buffers for {} parameters",
                    grads.len(),
                    self.m.len(),
                    store.len()
                ),
            ));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let theta = store.get_mut(id);
            if g.shape() != theta.shape() || self.m[i].shape() != theta.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: theta.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi + c.weight_decay * *p;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let delta = lr * m_hat / (libm::sqrt(v_hat) + c.eps);
                // Skipping a zero step keeps signed zeros intact.
                if delta != 0.0 {
                    *p -= delta;
                }
            }
        }
        Ok(())
    }
}

/// Speakers per batch; every speaker contributes two distinct utterances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub speakers_per_batch: usize,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        2 * self.speakers_per_batch
    }
}

/// One batch: `pairs[i]` holds two distinct utterance indices of
/// `speakers[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub speakers: Vec<usize>,
    pub pairs: Vec<[usize; 2]>,
}

impl Batch {
    /// Utterance indices in row order `(s0,u0), (s0,u1), (s1,u0), …`.
    pub fn rows(&self) -> Vec<usize> {
        self.pairs.iter().flat_map(|p| p.iter().copied()).collect()
    }

    /// Speaker id of every row.
    pub fn row_speakers(&self) -> Vec<usize> {
        self.speakers.iter().flat_map(|&s| [s, s]).collect()
    }
}

/// One epoch of batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Batch>,
    /// Speakers left out for having fewer than two utterances.
    pub skipped: Vec<usize>,
}

/// Shuffles the eligible speakers and splits them into batches of
/// `plan.speakers_per_batch`, drawing two distinct utterances for each.
/// `utterances[s]` lists the utterance indices of speaker `s`. A trailing
/// partial batch is dropped.
pub fn make_batches<R: Rng + ?Sized>(
    utterances: &[Vec<usize>],
    plan: BatchPlan,
    rng: &mut R,
) -> Result<EpochPlan> {
    let n = plan.speakers_per_batch;
    if n < 2 {
        return Err(invalid(
            "make_batches",
            "need at least two speakers per batch",
        ));
    }
    let mut eligible = Vec::new();
    let mut skipped = Vec::new();
    for (s, utts) in utterances.iter().enumerate() {
        if utts.len() >= 2 {
            eligible.push(s);
        } else {
            skipped.push(s);
        }
    }
    if eligible.len() < n {
        return Err(invalid(
            "make_batches",
            format!(
                "{} speakers with two or more utterances, batch needs {n}",
                eligible.len()
            ),
        ));
    }
    eligible.shuffle(rng);
    let batches = eligible
        .chunks_exact(n)
        .map(|chunk| {
            let pairs = chunk
                .iter()
                .map(|&s| {
                    let picked: Vec<usize> =
                        utterances[s].choose_multiple(rng, 2).copied().collect();
                    [picked[0], picked[1]]
                })
                .collect();
            Batch {
                speakers: chunk.to_vec(),
                pairs,
            }
        })
        .collect();
    Ok(EpochPlan { batches, skipped })
}

/// Training-only parameters: the prototypical scale/offset and the softmax
/// classification layer over training speakers.
#[derive(Clone, Debug)]
pub struct LossHead {
    pub store: ParamStore,
    pub ap_w: ParamId,
    pub ap_b: ParamId,
    pub sm_w: ParamId,
    pub sm_b: ParamId,
}

impl LossHead {
    pub fn new<R: Rng + ?Sized>(emb_dim: usize, n_speakers: usize, rng: &mut R) -> Result<Self> {
        if n_speakers < 2 {
            return Err(invalid("loss_head", "need at least two training speakers"));
        }
        let mut store = ParamStore::new();
        let ap_w = store.add("loss.ap_w", Tensor::scalar(AP_INIT_W));
        let ap_b = store.add("loss.ap_b", Tensor::scalar(AP_INIT_B));
        let bound = linear_bound(emb_dim);
        let sm_w = store.add(
            "loss.sm_weight",
            Tensor::uniform([n_speakers, emb_dim], bound, rng),
        );
        let sm_b = store.add("loss.sm_bias", Tensor::zeros([n_speakers]));
        Ok(LossHead {
            store,
            ap_w,
            ap_b,
            sm_w,
            sm_b,
        })
    }

    /// Rebuilds the handles from a store holding the four named tensors.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .find(n)
                .ok_or_else(|| invalid("loss_head", format!("missing {n}")))
        };
        Ok(LossHead {
            ap_w: get("loss.ap_w")?,
            ap_b: get("loss.ap_b")?,
            sm_w: get("loss.sm_weight")?,
            sm_b: get("loss.sm_bias")?,
            store,
        })
    }
}

/// Model, loss head and optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub head: LossHead,
    pub model_opt: Adam,
    pub head_opt: Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub ap: f64,
    pub sm: f64,
    pub total: f64,
}

impl TrainState {
    pub fn new(model: Model, head: LossHead, config: AdamConfig) -> Self {
        let model_opt = Adam::new(model.params(), config);
        let head_opt = Adam::new(&head.store, config);
        TrainState {
            model,
            head,
            model_opt,
            head_opt,
        }
    }

    /// Forward pass and losses on a batch without updating anything.
    /// `x` is `[2N, 1, F, T]` with rows ordered as in [`Batch::rows`];
    /// `labels` are the softmax classes of the rows.
    pub fn losses(&self, x: &Tensor, labels: &[usize]) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let (_, losses, _, _) = self.graph(&mut tape, x, labels)?;
        Ok(losses)
    }

    fn graph(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<(Var, StepLosses, StatsUpdate, (Bound, Bound))> {
        let rows = x.shape().first().copied().unwrap_or(0);
        if rows % 2 != 0 || rows != labels.len() {
            return Err(invalid(
                "train_step",
                format!("{rows} rows for {} labels; rows must pair up", labels.len()),
            ));
        }
        let params = self.model.bind(tape);
        let head = self.head.store.bind(tape);
        let xv = tape.constant(x.clone());
        let out = self.model.forward(tape, &params, xv, Mode::Train)?;
        let d = self.model.config().emb_dim;
        let pairs = tape.reshape(out.embedding, &[rows / 2, 2, d])?;
        let ap = angular_prototypical_loss(
            tape,
            pairs,
            head.var(self.head.ap_w),
            head.var(self.head.ap_b),
        )?;
        let sm = softmax_loss(
            tape,
            out.embedding,
            head.var(self.head.sm_w),
            head.var(self.head.sm_b),
            labels,
        )?;
        let total = combined_loss(tape, ap, sm)?;
        let losses = StepLosses {
            ap: tape.value(ap).item(),
            sm: tape.value(sm).item(),
            total: tape.value(total).item(),
        };
        Ok((total, losses, out.stats, (params, head)))
    }

    /// Forward, backward and one Adam update at learning rate `lr`.
    pub fn step(&mut self, x: &Tensor, labels: &[usize], lr: f64) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let (total, losses, stats, (params, head)) = self.graph(&mut tape, x, labels)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                context: format!(
                    "loss ap={} sm={} at optimizer step {}",
                    losses.ap,
                    losses.sm,
                    self.model_opt.step + 1
                ),
            });
        }
        tape.backward(total)?;
        let model_grads: Vec<Option<Tensor>> =
            params.vars().iter().map(|&v| tape.grad(v)).collect();
        let head_grads: Vec<Option<Tensor>> = head.vars().iter().map(|&v| tape.grad(v)).collect();
        drop(tape);
        self.model_opt
            .update(self.model.params_mut(), &model_grads, lr)?;
        self.head_opt
            .update(&mut self.head.store, &head_grads, lr)?;
        self.model.update_running_stats(&stats);
        Ok(losses)
    }
}

/// Named tensors of an optimizer, e.g. `adam.m.<param>` and `adam.v.<param>`.
pub fn adam_tensors<'a>(
    prefix: &'a str,
    store: &'a ParamStore,
    opt: &'a Adam,
) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::with_capacity(2 * store.len());
    for (i, (name, _)) in store.iter().enumerate() {
        out.push((format!("{prefix}.m.{name}"), &opt.m[i]));
        out.push((format!("{prefix}.v.{name}"), &opt.v[i]));
    }
    out
}

/// Restores moments written by [`adam_tensors`].
pub fn restore_adam(
    prefix: &str,
    store: &ParamStore,
    opt: &mut Adam,
    lookup: impl Fn(&str) -> Option<Tensor>,
) -> Result<()> {
    for (i, (name, t)) in store.iter().enumerate() {
        for (slot, buf) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let key = format!("{prefix}.{slot}.{name}");
            let value =
                lookup(&key).ok_or_else(|| invalid("restore_adam", format!("missing {key}")))?;
            if value.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "restore_adam",
                    lhs: t.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            *buf = value;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0), 1e-3);
        assert!((lr_schedule(10) - 7.5e-4).abs() < 1e-18);
        assert!((lr_schedule(25) - 5.625e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(9), 1e-3);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(0.5));
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        opt.update(&mut store, &[Some(Tensor::scalar(1.0))], 1e-3)
            .unwrap();
        let delta = store.iter().next().unwrap().1.item() - 0.5;
        // m̂/√v̂ = 1, so the step is lr up to the ε guard.
        assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((delta + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn partition_covers_all_speakers() {
        let utts: Vec<Vec<usize>> = (0..4).map(|s| vec![2 * s, 2 * s + 1, 100 + s]).collect();
        let plan = make_batches(
            &utts,
            BatchPlan {
                speakers_per_batch: 2,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(plan.batches.len(), 2);
        let mut all: Vec<usize> = plan
            .batches
            .iter()
            .flat_map(|b| b.speakers.clone())
            .collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }
}
