//! Metrics against brute-force threshold sweeps, plus the trial protocol.

use dtdy_core::dynamic_conv::HiddenWidth;
use dtdy_core::evaluation::{
    compute_eer, compute_min_dcf, det_curve, report, score_embeddings, score_trial,
    segment_embeddings, DcfParams,
};
use dtdy_core::features::{LogMelExtractor, Waveform, EVAL_SEGMENTS, SAMPLE_RATE};
use dtdy_core::model_zoo::{ConvKind, Model, ModelConfig, Pooling};
use dtdy_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rates by direct counting, no sorting or searching.
fn naive_rates(t: &[f64], n: &[f64], theta: f64) -> (f64, f64) {
    let mut miss = 0usize;
    for &s in t {
        if s < theta {
            miss += 1;
        }
    }
    let mut fa = 0usize;
    for &s in n {
        if s >= theta {
            fa += 1;
        }
    }
    (miss as f64 / t.len() as f64, fa as f64 / n.len() as f64)
}

fn distinct(t: &[f64], n: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = Vec::new();
    for &s in t.iter().chain(n) {
        if !all.contains(&s) {
            all.push(s);
        }
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all
}

fn oracle_eer(t: &[f64], n: &[f64]) -> f64 {
    let mut points: Vec<(f64, f64)> = distinct(t, n)
        .into_iter()
        .map(|th| naive_rates(t, n, th))
        .collect();
    points.push((1.0, 0.0));
    let k = points.iter().position(|&(frr, far)| frr >= far).unwrap();
    let (lo, hi) = (points[k - 1], points[k]);
    let (d0, d1) = (lo.0 - lo.1, hi.0 - hi.1);
    let alpha = -d0 / (d1 - d0);
    lo.0 + alpha * (hi.0 - lo.0)
}

fn oracle_min_dcf(t: &[f64], n: &[f64]) -> f64 {
    let s = distinct(t, n);
    let mut thetas = vec![f64::NEG_INFINITY, f64::INFINITY];
    for i in 1..s.len() {
        thetas.push(0.5 * (s[i - 1] + s[i]));
    }
    thetas
        .into_iter()
        .map(|th| {
            let (miss, fa) = naive_rates(t, n, th);
            (1.0 * 0.05 * miss + 1.0 * 0.95 * fa) / 0.05
        })
        .fold(f64::INFINITY, f64::min)
}

fn random_scores(
    rng: &mut ChaCha8Rng,
    nt: usize,
    nn: usize,
    quantize: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut draw = |shift: f64| {
        let v: f64 = rng.gen_range(-1.0..1.0) + shift;
        if quantize {
            (v * 4.0).round() / 4.0
        } else {
            v
        }
    };
    let t = (0..nt).map(|_| draw(0.4)).collect();
    let n = (0..nn).map(|_| draw(0.0)).collect();
    (t, n)
}

#[test]
fn metrics_match_exhaustive_sweep_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let (nt, nn) = (rng.gen_range(1..60), rng.gen_range(1..60));
        // Every third set is quantized so ties are exercised.
        let (t, n) = random_scores(&mut rng, nt, nn, i % 3 == 0);
        assert_eq!(
            compute_eer(&t, &n).unwrap().0,
            oracle_eer(&t, &n),
            "set {i}"
        );
        assert_eq!(
            compute_min_dcf(&t, &n, DcfParams::default()).unwrap().0,
            oracle_min_dcf(&t, &n),
            "set {i}"
        );
    }
}

#[test]
fn fifty_fifty_scores_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (t, n) = random_scores(&mut rng, 50, 50, false);
    assert_eq!(
        compute_min_dcf(&t, &n, DcfParams::default()).unwrap().0,
        oracle_min_dcf(&t, &n)
    );
}

#[test]
fn degenerate_metric_cases() {
    assert_eq!(
        compute_eer(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1]).unwrap().0,
        0.0
    );
    assert_eq!(
        compute_min_dcf(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1], DcfParams::default())
            .unwrap()
            .0,
        0.0
    );
    assert_eq!(compute_eer(&[0.8, 0.2], &[0.7, 0.1]).unwrap().0, 0.5);
    for len in [1, 2, 7, 40] {
        let same: Vec<f64> = (0..len).map(|i| ((i * 37) % 11) as f64 * 0.1).collect();
        assert_eq!(compute_eer(&same, &same).unwrap().0, 0.5, "len {len}");
    }
    assert_eq!(
        compute_min_dcf(&[0.3; 5], &[0.3; 9], DcfParams::default())
            .unwrap()
            .0,
        1.0
    );
}

#[test]
fn eer_threshold_lies_between_classes_when_separable() {
    let (_, th) = compute_eer(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1]).unwrap();
    assert!(th > 0.3 && th <= 0.7);
    let (_, dth) =
        compute_min_dcf(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1], DcfParams::default()).unwrap();
    assert_eq!(dth, 0.5);
}

#[test]
fn report_counts_and_swap_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, n) = random_scores(&mut rng, 30, 45, false);
    let labels: Vec<bool> = t
        .iter()
        .map(|_| true)
        .chain(n.iter().map(|_| false))
        .collect();
    let scores: Vec<f64> = t.iter().chain(&n).copied().collect();
    let r = report(&labels, &scores).unwrap();
    assert_eq!((r.n_target, r.n_nontarget), (30, 45));
    assert_eq!(r, report(&labels, &scores).unwrap());

    // Swapping the roles reverses the ranking; negating restores it.
    let neg_t: Vec<f64> = t.iter().map(|v| -v).collect();
    let neg_n: Vec<f64> = n.iter().map(|v| -v).collect();
    let swapped = compute_eer(&neg_n, &neg_t).unwrap().0;
    assert_eq!(swapped, oracle_eer(&neg_n, &neg_t));
    assert!((swapped - r.eer).abs() <= 1.0 / 30.0 + 1.0 / 45.0);
}

#[test]
fn det_curve_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, n) = random_scores(&mut rng, 20, 20, true);
    let det = det_curve(&t, &n).unwrap();
    for w in det.windows(2) {
        assert!(w[0].threshold < w[1].threshold);
        assert!(w[0].p_miss <= w[1].p_miss && w[0].p_fa >= w[1].p_fa);
    }
}

proptest! {
    #[test]
    fn metrics_are_rank_statistics(
        t in prop::collection::vec(-5.0f64..5.0, 1..30),
        n in prop::collection::vec(-5.0f64..5.0, 1..30),
    ) {
        // Rounding can merge neighbouring scores; such draws are skipped.
        let f = |v: &Vec<f64>| v.iter().map(|x| 3.0 * x * x * x + 2.0 * x + 7.0).collect::<Vec<_>>();
        let (ft, fnt) = (f(&t), f(&n));
        prop_assume!(distinct(&t, &n).len() == distinct(&ft, &fnt).len());
        prop_assert_eq!(compute_eer(&t, &n).unwrap().0, compute_eer(&ft, &fnt).unwrap().0);
        let p = DcfParams::default();
        prop_assert_eq!(compute_min_dcf(&t, &n, p).unwrap().0, compute_min_dcf(&ft, &fnt, p).unwrap().0);
    }

    #[test]
    fn min_dcf_never_exceeds_reject_all(
        t in prop::collection::vec(-5.0f64..5.0, 1..30),
        n in prop::collection::vec(-5.0f64..5.0, 1..30),
    ) {
        let (d, _) = compute_min_dcf(&t, &n, DcfParams::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let (e, _) = compute_eer(&t, &n).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }
}

fn small_model() -> Model {
    let cfg = ModelConfig {
        width_mult: 0.0,
        stage_channels: [2, 2, 4, 4],
        stage_blocks: [1, 1, 1, 1],
        conv_kind: ConvKind::Dtdy,
        reduction: 0.5,
        hidden: HiddenWidth::PooledSum,
        basis: 2,
        pooling: Pooling::Tap,
        emb_dim: 16,
        asp_hidden: 4,
        n_mels: 64,
    };
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

fn tone(seconds: f64, hz: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let s = (0..n)
        .map(|i| {
            (2.0 * std::f64::consts::PI * hz * i as f64 / SAMPLE_RATE as f64).sin()
                + 0.1 * rng.gen_range(-1.0..1.0)
        })
        .collect();
    Waveform::new(s, SAMPLE_RATE).unwrap()
}

#[test]
fn trial_protocol_audit() {
    let model = small_model();
    let ex = LogMelExtractor::new();
    let a = tone(3.0, 220.0, 6);
    let b = tone(5.5, 480.0, 7);
    let ea = segment_embeddings(&model, &ex, &a).unwrap();
    assert_eq!(ea.shape(), &[EVAL_SEGMENTS, 16]);

    let same = score_trial(&model, &ex, &a, &a).unwrap();
    assert_eq!(same.n_pairs, 100);
    assert!((same.score - 1.0).abs() < 1e-9);

    let cross = score_trial(&model, &ex, &a, &b).unwrap();
    assert_eq!(cross.n_pairs, 100);
    assert!((-1.0..=1.0).contains(&cross.score));
    let eb = segment_embeddings(&model, &ex, &b).unwrap();
    assert_eq!(cross, score_embeddings(&ea, &eb).unwrap());
}

#[test]
fn scoring_normalizes_raw_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::randn([3, 5], &mut rng);
    let b = Tensor::randn([4, 5], &mut rng);
    let s = score_embeddings(&a, &b).unwrap();
    let scaled = score_embeddings(&a.map(|v| v * 40.0), &b).unwrap();
    assert!((s.score - scaled.score).abs() < 1e-14);
    assert_eq!(s.n_pairs, 12);
    assert!(score_embeddings(&Tensor::zeros([1, 5]), &b).is_err());
}
