//! Log-Mel input features and segment sampling.
//!
//! 25 ms Hamming frames every 10 ms, 512-point FFT, 64 HTK Mel filters over
//! 20–7600 Hz, `log(power + 1e-6)`, then per-frequency mean/variance
//! normalization over the segment.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOP: usize = 160;
pub const WIN: usize = 400;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 64;
pub const F_MIN: f64 = 20.0;
pub const F_MAX: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-6;
pub const NORM_GUARD: f64 = 1e-8;
/// Training crops are 2 s.
pub const TRAIN_SAMPLES: usize = 32_000;
/// Evaluation crops are 4 s.
pub const EVAL_SAMPLES: usize = 64_000;
pub const EVAL_SEGMENTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty { op: "waveform" });
        }
        if sample_rate == 0 {
            return Err(crate::error::invalid(
                "waveform",
                "sample rate must be positive",
            ));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Repeats the signal until it holds at least `min_len` samples.
    fn tiled_to(&self, min_len: usize) -> Vec<f64> {
        if self.samples.len() >= min_len {
            return self.samples.clone();
        }
        (0..min_len)
            .map(|i| self.samples[i % self.samples.len()])
            .collect()
    }
}

/// `F × T` log-Mel matrix, row-major with one row per Mel bin.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSegment {
    bins: Vec<f64>,
    n_mels: usize,
    n_frames: usize,
}

impl LogMelSegment {
    pub fn new(n_mels: usize, n_frames: usize, bins: Vec<f64>) -> Result<Self> {
        if n_mels == 0 || n_frames == 0 || bins.len() != n_mels * n_frames {
            return Err(Error::InvalidShape {
                shape: vec![n_mels, n_frames],
                len: bins.len(),
            });
        }
        Ok(LogMelSegment {
            bins,
            n_mels,
            n_frames,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.bins[mel * self.n_frames + frame]
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.bins[mel * self.n_frames..(mel + 1) * self.n_frames]
    }

    /// `[1, 1, F, T]` model input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 1, self.n_mels, self.n_frames], self.bins.clone())
            .expect("consistent shape")
    }
}

/// Stacks equally sized segments into a `[B, 1, F, T]` batch.
pub fn batch_tensor(segments: &[LogMelSegment]) -> Result<Tensor> {
    let first = segments
        .first()
        .ok_or(Error::Empty { op: "batch_tensor" })?;
    let (f, t) = (first.n_mels, first.n_frames);
    let mut data = Vec::with_capacity(segments.len() * f * t);
    for s in segments {
        if s.n_mels != f || s.n_frames != t {
            return Err(Error::ShapeMismatch {
                op: "batch_tensor",
                lhs: vec![f, t],
                rhs: vec![s.n_mels, s.n_frames],
            });
        }
        data.extend_from_slice(&s.bins);
    }
    Tensor::new([segments.len(), 1, f, t], data)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Edge frequencies of the Mel filters: `n_mels + 2` points equally spaced on
/// the Mel scale; filter `m` spans `[edges[m], edges[m+2]]` with apex `edges[m+1]`.
pub fn mel_edges_hz() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Centre frequency of each Mel filter.
pub fn mel_centers_hz() -> Vec<f64> {
    mel_edges_hz()[1..=N_MELS].to_vec()
}

/// `N_MELS × (N_FFT/2 + 1)` triangular filters with unit apex.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let edges = mel_edges_hz();
    let n_bins = N_FFT / 2 + 1;
    (0..N_MELS)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                    let up = (f - lo) / (c - lo);
                    let down = (hi - f) / (hi - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hamming window.
pub fn hamming_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * libm::cos(core::f64::consts::TAU * i as f64 / n as f64))
        .collect()
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// In-place iterative radix-2 FFT; `re.len()` must be a power of two.
struct Fft {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Fft {
    fn new(n: usize) -> Self {
        assert!(n.is_power_of_two());
        let (cos, sin) = (0..n / 2)
            .map(|k| {
                let a = -core::f64::consts::TAU * k as f64 / n as f64;
                (libm::cos(a), libm::sin(a))
            })
            .unzip();
        Fft { n, cos, sin }
    }

    fn run(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (wr, wi) = (self.cos[k * step], self.sin[k * step]);
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len *= 2;
        }
    }
}

/// Reusable log-Mel front end (window, FFT tables and filterbank).
pub struct LogMelExtractor {
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Fft,
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelExtractor {
    pub fn new() -> Self {
        LogMelExtractor {
            window: hamming_window(WIN),
            filters: mel_filterbank(),
            fft: Fft::new(N_FFT),
        }
    }

    /// Un-normalized log-Mel energies; `T = floor(len / 160)`.
    pub fn extract(&self, w: &Waveform) -> Result<LogMelSegment> {
        if w.sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate {
                expected: SAMPLE_RATE,
                got: w.sample_rate,
            });
        }
        let n = w.samples.len();
        if n < HOP {
            return Err(crate::error::invalid(
                "log_mel",
                "waveform shorter than one hop",
            ));
        }
        let n_frames = n / HOP;
        let pad = (WIN / 2) as isize;
        let n_bins = N_FFT / 2 + 1;
        let mut out = vec![0.0; N_MELS * n_frames];
        let mut re = vec![0.0; N_FFT];
        let mut im = vec![0.0; N_FFT];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            re.iter_mut().for_each(|v| *v = 0.0);
            im.iter_mut().for_each(|v| *v = 0.0);
            let start = (t * HOP) as isize - pad;
            for (i, wv) in self.window.iter().enumerate() {
                re[i] = w.samples[reflect_index(start + i as isize, n)] * wv;
            }
            self.fft.run(&mut re, &mut im);
            for (k, p) in power.iter_mut().enumerate() {
                *p = re[k] * re[k] + im[k] * im[k];
            }
            for (m, filt) in self.filters.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                out[m * n_frames + t] = libm::log(e + LOG_FLOOR);
            }
        }
        LogMelSegment::new(N_MELS, n_frames, out)
    }
}

/// Log-Mel spectrogram of a 16 kHz waveform (before normalization).
pub fn log_mel(w: &Waveform) -> Result<LogMelSegment> {
    LogMelExtractor::new().extract(w)
}

/// Per-frequency mean and variance normalization over the segment. Rows whose
/// standard deviation is below [`NORM_GUARD`] map to zero.
pub fn normalize(m: &LogMelSegment) -> Result<LogMelSegment> {
    let t = m.n_frames;
    if t < 2 {
        return Err(crate::error::invalid(
            "normalize",
            "need at least two frames",
        ));
    }
    let mut bins = m.bins.clone();
    for row in bins.chunks_mut(t) {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let std = libm::sqrt(var);
        for v in row.iter_mut() {
            *v = if std < NORM_GUARD {
                0.0
            } else {
                (*v - mean) / std
            };
        }
    }
    LogMelSegment::new(m.n_mels, t, bins)
}

/// A uniformly placed 2 s crop; shorter utterances are tiled to 2 s first.
pub fn sample_train_segment<R: Rng + ?Sized>(w: &Waveform, rng: &mut R) -> Result<Waveform> {
    crop_random(w, TRAIN_SAMPLES, rng)
}

pub fn crop_random<R: Rng + ?Sized>(w: &Waveform, len: usize, rng: &mut R) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::Empty {
            op: "sample_segment",
        });
    }
    let tiled = w.tiled_to(len);
    let start = rng.gen_range(0..=tiled.len() - len);
    Waveform::new(tiled[start..start + len].to_vec(), w.sample_rate)
}

/// Start offsets of the ten evaluation crops for an utterance of `len` samples.
pub fn eval_segment_starts(len: usize) -> Vec<usize> {
    let span = len.max(EVAL_SAMPLES) - EVAL_SAMPLES;
    (0..EVAL_SEGMENTS)
        .map(|i| libm::round(i as f64 * span as f64 / (EVAL_SEGMENTS - 1) as f64) as usize)
        .collect()
}

/// Ten equally spaced 4 s crops; shorter utterances are tiled to 4 s first.
pub fn sample_eval_segments(w: &Waveform) -> Result<Vec<Waveform>> {
    if w.is_empty() {
        return Err(Error::Empty {
            op: "sample_eval_segments",
        });
    }
    let tiled = w.tiled_to(EVAL_SAMPLES);
    eval_segment_starts(tiled.len())
        .into_iter()
        .map(|s| Waveform::new(tiled[s..s + EVAL_SAMPLES].to_vec(), w.sample_rate))
        .collect()
}

/// Log-Mel followed by normalization.
pub fn featurize(extractor: &LogMelExtractor, w: &Waveform) -> Result<LogMelSegment> {
    normalize(&extractor.extract(w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn two_seconds_gives_64_by_200() {
        let w = Waveform::new(vec![0.0; 32_000], SAMPLE_RATE).unwrap();
        let m = log_mel(&w).unwrap();
        assert_eq!((m.n_mels(), m.n_frames()), (64, 200));
    }

    #[test]
    fn silence_hits_log_floor() {
        let w = Waveform::new(vec![0.0; 8_000], SAMPLE_RATE).unwrap();
        let m = log_mel(&w).unwrap();
        assert!(m.bins().iter().all(|&v| v == libm::log(LOG_FLOOR)));
    }

    #[test]
    fn wrong_sample_rate_rejected() {
        let w = Waveform::new(vec![0.0; 8_000], 8_000).unwrap();
        assert!(matches!(
            log_mel(&w),
            Err(Error::SampleRate { got: 8_000, .. })
        ));
    }

    #[test]
    fn normalize_hand_cases() {
        let m = LogMelSegment::new(2, 2, vec![1.0, 3.0, 5.0, 5.0]).unwrap();
        let n = normalize(&m).unwrap();
        assert!((n.at(0, 0) + 1.0).abs() < 1e-8 && (n.at(0, 1) - 1.0).abs() < 1e-8);
        assert_eq!(n.row(1), &[0.0, 0.0]);
        let one = LogMelSegment::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(normalize(&one).is_err());
    }

    #[test]
    fn empty_waveform_rejected() {
        assert!(Waveform::new(vec![], SAMPLE_RATE).is_err());
    }

    #[test]
    fn exact_train_length_is_returned_unchanged() {
        let w = Waveform::new(
            (0..TRAIN_SAMPLES).map(|i| i as f64 * 1e-5).collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_train_segment(&w, &mut rng).unwrap(), w);
    }

    #[test]
    fn eval_starts_for_thirteen_seconds() {
        let starts = eval_segment_starts(13 * 16_000);
        assert_eq!(starts, (0..10).map(|i| i * 16_000).collect::<Vec<_>>());
        assert_eq!(eval_segment_starts(EVAL_SAMPLES), vec![0; 10]);
    }

    #[test]
    fn fft_matches_direct_dft() {
        let fft = Fft::new(16);
        let x: Vec<f64> = (0..16)
            .map(|i| libm::sin(i as f64 * 0.7) + 0.1 * i as f64)
            .collect();
        let (mut re, mut im) = (x.clone(), vec![0.0; 16]);
        fft.run(&mut re, &mut im);
        for k in 0..16 {
            let (mut r, mut i) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let a = -core::f64::consts::TAU * (k * n) as f64 / 16.0;
                r += v * libm::cos(a);
                i += v * libm::sin(a);
            }
            assert!((re[k] - r).abs() < 1e-12 && (im[k] - i).abs() < 1e-12);
        }
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-9, 5), 1);
    }
}
