//! Speaker activation maps (Grad-CAM on an early layer) and frame-level
//! similarity analysis by phoneme group.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tape;
use crate::error::{invalid, Error, Result};
use crate::model_zoo::{Mode, Model, TIME_STRIDE};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{Adam, AdamConfig};

pub const DEFAULT_SAM_LAYER: &str = "stem";

/// A map in `[0, 1]` over the `F × T` grid of the tapped layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerActivationMap {
    pub values: Vec<f64>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub speaker: usize,
    pub layer: String,
    /// Per-channel gradient means that weighted the activations.
    pub channel_weights: Vec<f64>,
}

impl SpeakerActivationMap {
    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }
}

/// Grad-CAM for the `speaker` logit of a single `[1, 1, F, T]` input, taken
/// at the named tap.
pub fn compute_sam(
    model: &Model,
    x: &Tensor,
    speaker: usize,
    layer: &str,
) -> Result<SpeakerActivationMap> {
    let classes = model
        .n_classes()
        .ok_or_else(|| invalid("compute_sam", "no classifier attached"))?;
    if speaker >= classes {
        return Err(Error::LabelOutOfRange {
            label: speaker,
            classes,
        });
    }
    if x.shape().first() != Some(&1) {
        return Err(invalid(
            "compute_sam",
            format!("expected a single input, got {:?}", x.shape()),
        ));
    }
    if !model.tap_names().iter().any(|t| t == layer) {
        return Err(invalid("compute_sam", format!("unknown layer {layer:?}")));
    }

    let mut tape = Tape::new();
    let params = model.bind_frozen(&mut tape);
    // A grad-enabled input makes every activation differentiable while the
    // weights stay constant.
    let xv = tape.leaf(x.clone());
    let out = model.forward(&mut tape, &params, xv, Mode::Eval)?;
    let a = out.tap(layer).expect("tap names checked above");
    tape.retain_grad(a);
    let logits = model.classifier_logits(&mut tape, &params, out.embedding)?;
    let y = tape.index_select(logits, 1, &[speaker])?;
    let y = tape.sum(y, &[0, 1])?;
    tape.backward(y)?;

    let act = tape.value(a);
    let grad = tape
        .grad(a)
        .unwrap_or_else(|| Tensor::zeros(act.shape().to_vec()));
    let (c, f, t) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let plane = f * t;
    let channel_weights: Vec<f64> = grad
        .data()
        .chunks(plane)
        .map(|g| g.iter().sum::<f64>() / plane as f64)
        .collect();

    let mut values = alloc::vec![0.0; plane];
    for ch in 0..c {
        let alpha = channel_weights[ch];
        for (v, &av) in values
            .iter_mut()
            .zip(&act.data()[ch * plane..(ch + 1) * plane])
        {
            *v += alpha * av;
        }
    }
    for v in values.iter_mut() {
        *v = if *v > 0.0 { *v } else { 0.0 };
    }
    let peak = values.iter().cloned().fold(0.0, f64::max);
    if !peak.is_finite() {
        return Err(Error::NonFinite {
            context: "compute_sam".into(),
        });
    }
    if peak > 0.0 {
        for v in values.iter_mut() {
            *v /= peak;
        }
    }
    Ok(SpeakerActivationMap {
        values,
        n_mels: f,
        n_frames: t,
        speaker,
        layer: layer.to_string(),
        channel_weights,
    })
}

/// Mean of the rows of `embeddings` `[N, D]` other than `exclude`.
pub fn utterance_reference_embedding(embeddings: &Tensor, exclude: usize) -> Result<Vec<f64>> {
    let s = embeddings.shape();
    if s.len() != 2 {
        return Err(invalid(
            "utterance_reference_embedding",
            "expected [N, D] embeddings",
        ));
    }
    if s[0] < 2 {
        return Err(invalid(
            "utterance_reference_embedding",
            "speaker has fewer than two utterances",
        ));
    }
    if exclude >= s[0] {
        return Err(invalid(
            "utterance_reference_embedding",
            format!("utterance {exclude} out of range"),
        ));
    }
    let mut mean = alloc::vec![0.0; s[1]];
    for (i, row) in embeddings.data().chunks(s[1]).enumerate() {
        if i != exclude {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    let n = (s[0] - 1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PhonemeGroup {
    Vowels,
    Semivowels,
    Nasals,
    Fricatives,
    Stops,
}

impl PhonemeGroup {
    pub const ALL: [PhonemeGroup; 5] = [
        PhonemeGroup::Vowels,
        PhonemeGroup::Semivowels,
        PhonemeGroup::Nasals,
        PhonemeGroup::Fricatives,
        PhonemeGroup::Stops,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PhonemeGroup::Vowels => "vowels",
            PhonemeGroup::Semivowels => "semivowels",
            PhonemeGroup::Nasals => "nasals",
            PhonemeGroup::Fricatives => "fricatives",
            PhonemeGroup::Stops => "stops",
        }
    }
}

impl fmt::Display for PhonemeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhonemeGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PhonemeGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| invalid("phoneme_group", format!("unknown group {s:?}")))
    }
}

/// One aligned segment covering input frames `start..end`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSegment {
    pub start: usize,
    pub end: usize,
    pub phoneme: String,
    pub group: PhonemeGroup,
}

/// Checks that segments are non-empty, sorted and non-overlapping.
pub fn validate_alignment(segments: &[AlignmentSegment]) -> Result<()> {
    for (i, s) in segments.iter().enumerate() {
        if s.end <= s.start {
            return Err(invalid(
                "alignment",
                format!("segment {i} is empty ({}..{})", s.start, s.end),
            ));
        }
        if i > 0 && s.start < segments[i - 1].end {
            return Err(invalid(
                "alignment",
                format!("segment {i} overlaps its predecessor"),
            ));
        }
    }
    Ok(())
}

/// Model frame holding input frame `input_frame`.
pub fn model_frame_of(input_frame: usize) -> usize {
    input_frame / TIME_STRIDE
}

/// Input frame at the centre of model frame `j`.
pub fn model_frame_center(j: usize) -> usize {
    j * TIME_STRIDE + TIME_STRIDE / 2
}

/// Group of the segment containing each model frame's centre; `None` marks
/// uncovered frames.
pub fn assign_groups(
    segments: &[AlignmentSegment],
    n_model_frames: usize,
) -> Vec<Option<PhonemeGroup>> {
    (0..n_model_frames)
        .map(|j| {
            let c = model_frame_center(j);
            segments
                .iter()
                .find(|s| s.start <= c && c < s.end)
                .map(|s| s.group)
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|v| v * v).sum());
    let nb = libm::sqrt(b.iter().map(|v| v * v).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm { op: "frame_scores" });
    }
    Ok(dot / (na * nb))
}

/// Cosine of every row of `frames` `[T', D]` against `reference`.
pub fn frame_scores(frames: &Tensor, reference: &[f64]) -> Result<Vec<f64>> {
    let s = frames.shape();
    if s.len() != 2 || s[1] != reference.len() {
        return Err(Error::ShapeMismatch {
            op: "frame_scores",
            lhs: s.to_vec(),
            rhs: alloc::vec![reference.len()],
        });
    }
    frames
        .data()
        .chunks(s[1])
        .map(|row| cosine(row, reference))
        .collect()
}

/// Frame scores gathered per phoneme group, plus uncovered frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupScores {
    pub groups: BTreeMap<PhonemeGroup, Vec<f64>>,
    pub other: Vec<f64>,
}

impl GroupScores {
    pub fn add(&mut self, scores: &[f64], groups: &[Option<PhonemeGroup>]) {
        for (&s, g) in scores.iter().zip(groups) {
            match g {
                Some(g) => self.groups.entry(*g).or_default().push(s),
                None => self.other.push(s),
            }
        }
    }

    pub fn merge(&mut self, other: GroupScores) {
        for (g, v) in other.groups {
            self.groups.entry(g).or_default().extend(v);
        }
        self.other.extend(other.other);
    }

    pub fn summaries(&self) -> Vec<GroupSummary> {
        PhonemeGroup::ALL
            .into_iter()
            .filter_map(|g| self.groups.get(&g).and_then(|v| summarize(g, v)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSummary {
    pub group: PhonemeGroup,
    pub n_frames: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Linearly interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary statistics, computed on sorted values so they do not depend on
/// the order scores were gathered in.
pub fn summarize(group: PhonemeGroup, scores: &[f64]) -> Option<GroupSummary> {
    if scores.is_empty() {
        return None;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Some(GroupSummary {
        group,
        n_frames: s.len(),
        mean: s.iter().sum::<f64>() / s.len() as f64,
        median: quantile(&s, 0.5),
        q25: quantile(&s, 0.25),
        q75: quantile(&s, 0.75),
    })
}

/// Per-speaker utterance indices for head training and testing.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSplit {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

/// Shuffles each speaker's utterances and takes `n_train` then `n_test`.
pub fn split_utterances<R: Rng + ?Sized>(
    per_speaker: &[Vec<usize>],
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<HeadSplit> {
    let short: Vec<String> = per_speaker
        .iter()
        .enumerate()
        .filter(|(_, u)| u.len() < n_train + n_test)
        .map(|(s, _)| s.to_string())
        .collect();
    if !short.is_empty() {
        return Err(invalid(
            "train_classifier_head",
            format!(
                "speakers with fewer than {} utterances: {}",
                n_train + n_test,
                short.join(" ")
            ),
        ));
    }
    let mut split = HeadSplit {
        train: Vec::with_capacity(per_speaker.len()),
        test: Vec::with_capacity(per_speaker.len()),
    };
    for utts in per_speaker {
        let mut u = utts.clone();
        u.shuffle(rng);
        split.train.push(u[..n_train].to_vec());
        split.test.push(u[n_train..n_train + n_test].to_vec());
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadTraining {
    pub steps: usize,
    pub lr: f64,
}

impl Default for HeadTraining {
    fn default() -> Self {
        HeadTraining {
            steps: 300,
            lr: 1e-2,
        }
    }
}

/// Fits a fresh `classifier.*` layer on frozen embeddings `[N, D]` with
/// full-batch softmax training and attaches it to `model`. Returns the final
/// training loss.
pub fn train_classifier_head<R: Rng + ?Sized>(
    model: &mut Model,
    embeddings: &Tensor,
    labels: &[usize],
    n_speakers: usize,
    opts: HeadTraining,
    rng: &mut R,
) -> Result<f64> {
    if embeddings.shape().first() != Some(&labels.len()) {
        return Err(invalid(
            "train_classifier_head",
            "one label per embedding required",
        ));
    }
    model.attach_classifier(n_speakers, false, rng)?;
    let (wid, bid) = model.classifier().expect("just attached");
    let mut head = ParamStore::new();
    let w = head.add("weight", model.params().get(wid).clone());
    let b = head.add("bias", model.params().get(bid).clone());
    let mut opt = Adam::new(
        &head,
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    let mut loss = f64::NAN;
    for _ in 0..opts.steps {
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape);
        let e = tape.constant(embeddings.clone());
        let logits = tape.affine(e, bound.var(w), Some(bound.var(b)))?;
        let l = tape.cross_entropy(logits, labels)?;
        loss = tape.value(l).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "train_classifier_head".into(),
            });
        }
        tape.backward(l)?;
        let grads: Vec<Option<Tensor>> = bound.vars().iter().map(|&v| tape.grad(v)).collect();
        opt.update(&mut head, &grads, opts.lr)?;
    }
    *model.params_mut().get_mut(wid) = head.get(w).clone();
    *model.params_mut().get_mut(bid) = head.get(b).clone();
    Ok(loss)
}

/// Fraction of rows whose highest classifier logit is the true label.
pub fn head_accuracy(model: &Model, embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.bind_frozen(&mut tape);
    let e = tape.constant(embeddings.clone());
    let logits = model.classifier_logits(&mut tape, &params, e)?;
    let l = tape.value(logits);
    let k = l.shape()[1];
    let correct = l
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                );
            best.0 == y
        })
        .count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn seg(start: usize, end: usize, group: PhonemeGroup) -> AlignmentSegment {
        AlignmentSegment {
            start,
            end,
            phoneme: String::from("x"),
            group,
        }
    }

    #[test]
    fn frame_83_lands_in_model_frame_10() {
        assert_eq!(model_frame_of(83), 10);
        let a = vec![
            seg(0, 80, PhonemeGroup::Stops),
            seg(80, 90, PhonemeGroup::Nasals),
        ];
        let g = assign_groups(&a, 12);
        assert_eq!(g[model_frame_of(83)], Some(PhonemeGroup::Nasals));
        assert_eq!(g[11], None);
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.5);
        assert_eq!(quantile(&s, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn overlapping_alignment_rejected() {
        let a = vec![
            seg(0, 10, PhonemeGroup::Vowels),
            seg(9, 12, PhonemeGroup::Stops),
        ];
        assert!(validate_alignment(&a).is_err());
        assert!(validate_alignment(&[seg(3, 3, PhonemeGroup::Vowels)]).is_err());
    }

    #[test]
    fn group_names_round_trip() {
        for g in PhonemeGroup::ALL {
            assert_eq!(g.as_str().parse::<PhonemeGroup>().unwrap(), g);
        }
        assert!("other".parse::<PhonemeGroup>().is_err());
    }
}
