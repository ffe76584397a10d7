//! Verification metrics and the ten-segment trial scoring protocol.
//!
//! Both metrics use the step-function convention: a target is rejected when
//! its score is `< θ` and a nontarget is accepted when its score is `>= θ`.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::features::{
    batch_tensor, eval_segment_starts, featurize, sample_eval_segments, LogMelExtractor, Waveform,
};
use crate::model_zoo::Model;
use crate::tensor::Tensor;

pub const P_TARGET: f64 = 0.05;
pub const C_MISS: f64 = 1.0;
pub const C_FA: f64 = 1.0;

/// Cost parameters of the detection cost function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: P_TARGET,
            c_miss: C_MISS,
            c_fa: C_FA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub dcf_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

fn check_scores(op: &'static str, targets: &[f64], nontargets: &[f64]) -> Result<()> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Empty { op });
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { context: op.into() });
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Counts of `sorted` strictly below `theta`.
fn count_below(sorted: &[f64], theta: f64) -> usize {
    sorted.partition_point(|&s| s < theta)
}

/// Error rates at `theta`: (miss rate over targets, false-accept rate over nontargets).
fn rates(t: &[f64], n: &[f64], theta: f64) -> (f64, f64) {
    let miss = count_below(t, theta) as f64 / t.len() as f64;
    let fa = (n.len() - count_below(n, theta)) as f64 / n.len() as f64;
    (miss, fa)
}

/// Equal error rate and the threshold where the miss and false-accept step
/// functions cross.
///
/// Thresholds are swept over the distinct scores and then past the largest
/// one. The crossing is linearly interpolated between the last threshold with
/// `FRR < FAR` and the first with `FRR >= FAR`.
pub fn compute_eer(targets: &[f64], nontargets: &[f64]) -> Result<(f64, f64)> {
    check_scores("compute_eer", targets, nontargets)?;
    let (t, n) = (sorted(targets), sorted(nontargets));
    let mut thresholds: Vec<f64> = sorted(&[targets, nontargets].concat());
    thresholds.dedup();

    // At the smallest score FAR is 1 and FRR is 0, so the first point is
    // always strictly below the crossing.
    let mut prev = (thresholds[0], 0.0, 1.0);
    for &theta in &thresholds[1..] {
        let (frr, far) = rates(&t, &n, theta);
        if frr >= far {
            return Ok(interpolate(prev, (theta, frr, far)));
        }
        prev = (theta, frr, far);
    }
    // Above every score all targets are rejected and nothing is accepted.
    let (eer, _) = interpolate_rates(prev, (1.0, 0.0));
    Ok((eer, prev.0))
}

fn interpolate_rates(lo: (f64, f64, f64), hi: (f64, f64)) -> (f64, f64) {
    let d0 = lo.1 - lo.2;
    let d1 = hi.0 - hi.1;
    let alpha = -d0 / (d1 - d0);
    (lo.1 + alpha * (hi.0 - lo.1), alpha)
}

fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> (f64, f64) {
    let (eer, alpha) = interpolate_rates(lo, (hi.1, hi.2));
    (eer, lo.0 + alpha * (hi.0 - lo.0))
}

/// Normalized minimum detection cost and its threshold.
///
/// Candidates are the midpoints between consecutive distinct scores plus
/// `-inf` (accept all) and `+inf` (reject all). Ties keep the lowest threshold.
pub fn compute_min_dcf(targets: &[f64], nontargets: &[f64], p: DcfParams) -> Result<(f64, f64)> {
    check_scores("compute_min_dcf", targets, nontargets)?;
    if !(p.p_target > 0.0 && p.p_target < 1.0) || p.c_miss <= 0.0 || p.c_fa <= 0.0 {
        return Err(invalid(
            "compute_min_dcf",
            "p_target must lie in (0, 1) and costs must be positive",
        ));
    }
    let (t, n) = (sorted(targets), sorted(nontargets));
    let mut scores = sorted(&[targets, nontargets].concat());
    scores.dedup();
    let norm = libm::fmin(p.c_miss * p.p_target, p.c_fa * (1.0 - p.p_target));

    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    candidates.extend(scores.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(f64::INFINITY);

    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for theta in candidates {
        let (miss, fa) = rates(&t, &n, theta);
        let cost = (p.c_miss * p.p_target * miss + p.c_fa * (1.0 - p.p_target) * fa) / norm;
        if cost < best.0 {
            best = (cost, theta);
        }
    }
    Ok(best)
}

/// One point of the detection error trade-off curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Miss and false-accept rates at every distinct score.
pub fn det_curve(targets: &[f64], nontargets: &[f64]) -> Result<Vec<DetPoint>> {
    check_scores("det_curve", targets, nontargets)?;
    let (t, n) = (sorted(targets), sorted(nontargets));
    let mut thresholds = sorted(&[targets, nontargets].concat());
    thresholds.dedup();
    Ok(thresholds
        .into_iter()
        .map(|threshold| {
            let (p_miss, p_fa) = rates(&t, &n, threshold);
            DetPoint {
                threshold,
                p_miss,
                p_fa,
            }
        })
        .collect())
}

/// EER and minDCF from labelled scores (`true` = target).
pub fn report(labels: &[bool], scores: &[f64]) -> Result<EvalReport> {
    if labels.len() != scores.len() {
        return Err(Error::DimMismatch {
            op: "evaluate",
            dim: "scores",
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let (mut t, mut n) = (Vec::new(), Vec::new());
    for (&l, &s) in labels.iter().zip(scores) {
        if l {
            t.push(s)
        } else {
            n.push(s)
        }
    }
    let (eer, eer_threshold) = compute_eer(&t, &n)?;
    let (min_dcf, dcf_threshold) = compute_min_dcf(&t, &n, DcfParams::default())?;
    Ok(EvalReport {
        eer,
        eer_threshold,
        min_dcf,
        dcf_threshold,
        n_target: t.len(),
        n_nontarget: n.len(),
    })
}

/// Score of one trial together with the number of similarities averaged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialScore {
    pub score: f64,
    pub n_pairs: usize,
}

fn unit_rows(e: &Tensor) -> Result<Vec<Vec<f64>>> {
    let s = e.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(invalid(
            "score_trial",
            "expected a non-empty [N, D] embedding matrix",
        ));
    }
    e.data()
        .chunks(s[1])
        .map(|row| {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm { op: "score_trial" });
            }
            Ok(row.iter().map(|v| v / norm).collect())
        })
        .collect()
}

/// Mean cosine similarity over every pair of rows of `a` and `b`.
pub fn score_embeddings(a: &Tensor, b: &Tensor) -> Result<TrialScore> {
    if a.shape().get(1) != b.shape().get(1) {
        return Err(Error::ShapeMismatch {
            op: "score_trial",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ua, ub) = (unit_rows(a)?, unit_rows(b)?);
    let mut total = 0.0;
    let mut n_pairs = 0;
    for ra in &ua {
        for rb in &ub {
            total += ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>();
            n_pairs += 1;
        }
    }
    Ok(TrialScore {
        score: total / n_pairs as f64,
        n_pairs,
    })
}

/// Raw embeddings of the ten evaluation segments of an utterance, `[10, D]`.
///
/// Utterances no longer than one segment yield ten identical crops; each
/// distinct crop is embedded once.
pub fn segment_embeddings(
    model: &Model,
    extractor: &LogMelExtractor,
    w: &Waveform,
) -> Result<Tensor> {
    let crops = sample_eval_segments(w)?;
    let starts = eval_segment_starts(w.len());
    let mut unique: Vec<usize> = Vec::new();
    let slot: Vec<usize> = starts
        .iter()
        .enumerate()
        .map(
            |(i, s)| match unique.iter().position(|&u| starts[u] == *s) {
                Some(p) => p,
                None => {
                    unique.push(i);
                    unique.len() - 1
                }
            },
        )
        .collect();
    let feats = unique
        .iter()
        .map(|&i| featurize(extractor, &crops[i]))
        .collect::<Result<Vec<_>>>()?;
    let emb = model.embed(&batch_tensor(&feats)?)?;
    let d = emb.shape()[1];
    let mut data = Vec::with_capacity(slot.len() * d);
    for &p in &slot {
        data.extend_from_slice(&emb.data()[p * d..(p + 1) * d]);
    }
    Tensor::new([slot.len(), d], data)
}

pub fn score_trial(
    model: &Model,
    extractor: &LogMelExtractor,
    a: &Waveform,
    b: &Waveform,
) -> Result<TrialScore> {
    score_embeddings(
        &segment_embeddings(model, extractor, a)?,
        &segment_embeddings(model, extractor, b)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn bracketing_examples() {
        assert_eq!(
            compute_eer(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1]).unwrap().0,
            0.0
        );
        assert_eq!(compute_eer(&[0.8, 0.2], &[0.7, 0.1]).unwrap().0, 0.5);
        let same = [0.4, 0.1, 0.9, 0.3, 0.7];
        assert_eq!(compute_eer(&same, &same).unwrap().0, 0.5);
    }

    #[test]
    fn inverted_scores_give_full_error() {
        let (eer, _) = compute_eer(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        assert_eq!(eer, 1.0);
    }

    #[test]
    fn dcf_degenerate_cases() {
        let p = DcfParams::default();
        assert_eq!(compute_min_dcf(&[0.9, 0.8], &[0.1, 0.2], p).unwrap().0, 0.0);
        assert_eq!(compute_min_dcf(&[0.5; 3], &[0.5; 4], p).unwrap().0, 1.0);
    }

    #[test]
    fn empty_lists_rejected() {
        assert!(compute_eer(&[], &[0.1]).is_err());
        assert!(compute_min_dcf(&[0.1], &[], DcfParams::default()).is_err());
    }

    #[test]
    fn identical_embeddings_score_one() {
        let e = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let s = score_embeddings(&e, &e).unwrap();
        assert_eq!(s.n_pairs, 4);
        let cross = (-1.0 + 1.0 + 6.0) / (14f64.sqrt() * 5.25f64.sqrt());
        assert!((s.score - (2.0 + 2.0 * cross) / 4.0).abs() < 1e-15);
    }
}
