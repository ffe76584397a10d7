//! Log-Mel front end against an O(n²) DFT-by-definition oracle, plus the
//! segment sampling contracts.

use dtdy_core::features::{
    log_mel, mel_centers_hz, mel_filterbank, normalize, sample_eval_segments, sample_train_segment,
    LogMelSegment, Waveform, EVAL_SAMPLES, SAMPLE_RATE, TRAIN_SAMPLES,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{PI, TAU};

/// Independent reference: reflect-padded framing, periodic Hamming window,
/// DFT by definition, HTK triangles evaluated directly.
fn log_mel_oracle(x: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let frames = n / 160;
    let reflect = |i: isize| -> f64 {
        let mut j = i;
        while j < 0 || j >= n as isize {
            if j < 0 {
                j = -j;
            }
            if j >= n as isize {
                j = 2 * (n as isize - 1) - j;
            }
        }
        x[j as usize]
    };
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (ml, mh) = (mel(20.0), mel(7600.0));
    let pts: Vec<f64> = (0..66)
        .map(|i| inv(ml + (mh - ml) * i as f64 / 65.0))
        .collect();
    let mut out = vec![vec![0.0; frames]; 64];
    for t in 0..frames {
        let frame: Vec<f64> = (0..400)
            .map(|i| {
                let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / 400.0).cos();
                w * reflect(t as isize * 160 - 200 + i as isize)
            })
            .collect();
        let power: Vec<f64> = (0..257)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in frame.iter().enumerate() {
                    let a = -TAU * (k * i) as f64 / 512.0;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect();
        for m in 0..64 {
            let mut e = 0.0;
            for (k, p) in power.iter().enumerate() {
                let f = k as f64 * 16000.0 / 512.0;
                let w = if f > pts[m] && f <= pts[m + 1] {
                    (f - pts[m]) / (pts[m + 1] - pts[m])
                } else if f > pts[m + 1] && f < pts[m + 2] {
                    (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1])
                } else {
                    0.0
                };
                e += w * p;
            }
            out[m][t] = (e + 1e-6).ln();
        }
    }
    out
}

fn sine(freq: f64, seconds: f64) -> Waveform {
    let n = (seconds * 16000.0) as usize;
    Waveform::new(
        (0..n)
            .map(|i| 0.5 * (TAU * freq * i as f64 / 16000.0).sin())
            .collect(),
        SAMPLE_RATE,
    )
    .unwrap()
}

#[test]
fn sine_peak_lands_in_nearest_mel_bin_and_matches_dft_oracle() {
    let w = sine(1000.0, 0.25);
    let m = log_mel(&w).unwrap();
    let oracle = log_mel_oracle(w.samples());
    for f in 0..64 {
        for t in 0..m.n_frames() {
            assert!(
                (m.at(f, t) - oracle[f][t]).abs() < 1e-9,
                "bin {f} frame {t}"
            );
        }
    }
    let centers = mel_centers_hz();
    let nearest = (0..64)
        .min_by(|&a, &b| {
            (centers[a] - 1000.0)
                .abs()
                .total_cmp(&(centers[b] - 1000.0).abs())
        })
        .unwrap();
    for t in 2..m.n_frames() - 2 {
        let argmax = (0..64)
            .max_by(|&a, &b| m.at(a, t).total_cmp(&m.at(b, t)))
            .unwrap();
        let oracle_argmax = (0..64)
            .max_by(|&a, &b| oracle[a][t].total_cmp(&oracle[b][t]))
            .unwrap();
        assert_eq!(argmax, nearest, "frame {t}");
        assert_eq!(oracle_argmax, nearest);
    }
}

#[test]
fn random_waveform_matches_dft_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Waveform::new(
        (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        SAMPLE_RATE,
    )
    .unwrap();
    let m = log_mel(&w).unwrap();
    let oracle = log_mel_oracle(w.samples());
    assert_eq!(m.n_frames(), 6);
    for f in 0..64 {
        for t in 0..6 {
            assert!((m.at(f, t) - oracle[f][t]).abs() < 1e-9);
        }
    }
}

#[test]
fn hop_shift_shifts_interior_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..16000).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let a = log_mel(&Waveform::new(x.clone(), SAMPLE_RATE).unwrap()).unwrap();
    let b = log_mel(&Waveform::new(x[160..].to_vec(), SAMPLE_RATE).unwrap()).unwrap();
    let mut worst = 0.0f64;
    for f in 0..64 {
        for t in 2..b.n_frames() - 2 {
            worst = worst.max((b.at(f, t) - a.at(f, t + 1)).abs());
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn filterbank_is_nonnegative_and_covers_the_band() {
    let fb = mel_filterbank();
    assert_eq!(fb.len(), 64);
    assert!(fb
        .iter()
        .all(|row| row.len() == 257 && row.iter().all(|&v| v >= 0.0)));
    for k in 0..257 {
        let f = k as f64 * 16000.0 / 512.0;
        if f > 20.0 && f < 7600.0 {
            assert!(
                fb.iter().any(|row| row[k] > 0.0),
                "bin {k} ({f} Hz) uncovered"
            );
        }
    }
}

#[test]
fn normalized_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = LogMelSegment::new(
        64,
        50,
        (0..3200).map(|_| rng.gen_range(-20.0..5.0)).collect(),
    )
    .unwrap();
    let n = normalize(&m).unwrap();
    for f in 0..64 {
        let row = n.row(f);
        let mean = row.iter().sum::<f64>() / 50.0;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);
    }
    let c = normalize(&LogMelSegment::new(2, 3, vec![4.0; 6]).unwrap()).unwrap();
    assert!(c.bins().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn normalize_is_idempotent(data in prop::collection::vec(-30.0f64..10.0, 4 * 12)) {
        let m = LogMelSegment::new(4, 12, data).unwrap();
        let once = normalize(&m).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.bins().iter().zip(twice.bins()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn short_utterance_is_tiled_for_training() {
    let x: Vec<f64> = (0..16000)
        .map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5)
        .collect();
    let w = Waveform::new(x.clone(), SAMPLE_RATE).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seg = sample_train_segment(&w, &mut rng).unwrap();
    assert_eq!(seg.len(), TRAIN_SAMPLES);
    for (i, v) in seg.samples().iter().enumerate() {
        assert_eq!(*v, x[i % 16000]);
    }
}

#[test]
fn seeded_train_crop_is_deterministic() {
    let w = sine(220.0, 4.0);
    let a = sample_train_segment(&w, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = sample_train_segment(&w, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), TRAIN_SAMPLES);
}

#[test]
fn eval_segments_contract() {
    let exact = sine(300.0, 4.0);
    let segs = sample_eval_segments(&exact).unwrap();
    assert_eq!(segs.len(), 10);
    assert!(segs.iter().all(|s| s == &exact));

    for secs in [0.3, 3.0, 4.5, 13.0] {
        let segs = sample_eval_segments(&sine(300.0, secs)).unwrap();
        assert_eq!(segs.len(), 10);
        assert!(segs.iter().all(|s| s.len() == EVAL_SAMPLES));
    }

    let ramp = Waveform::new(
        (0..13 * 16000).map(|i| i as f64 / 208000.0).collect(),
        SAMPLE_RATE,
    )
    .unwrap();
    let segs = sample_eval_segments(&ramp).unwrap();
    for (i, s) in segs.iter().enumerate() {
        assert_eq!(s.samples()[0], (i * 16000) as f64 / 208000.0);
    }
}
