//! Synthetic speakers: source-filter voices speaking random phoneme strings,
//! with frame-level alignments.

use std::f64::consts::PI;
use std::path::Path;

use dtdy_core::explainability::{AlignmentSegment, PhonemeGroup};
use dtdy_core::features::{Waveform, HOP, SAMPLE_RATE};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::write_wav;
use crate::data::{
    create_dir, save_alignment, save_trials, write_text, Manifest, Split, Trial, Utterance,
};
use crate::error::{Error, Result};

pub const F0_RANGE: (f64, f64) = (80.0, 300.0);
/// Two speakers must differ by at least this much in F0 ...
pub const MIN_F0_GAP: f64 = 10.0;
/// ... or by this much in some formant.
pub const MIN_FORMANT_GAP: f64 = 100.0;
const FADE_S: f64 = 0.005;
const NOISE_FLOOR: f64 = 1e-3;
const LEVEL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utterances: usize,
    pub test_utterances: usize,
    pub seconds: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_speakers: 20,
            utterances: 10,
            test_utterances: 2,
            seconds: 3.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Config("synth.speakers must be at least 2".into()));
        }
        if self.utterances < 2 || self.test_utterances >= self.utterances {
            return Err(Error::Config(
                "synth.utterances must be at least 2 and exceed synth.test_utterances".into(),
            ));
        }
        if !(self.seconds >= 0.5) {
            return Err(Error::Config("synth.seconds must be at least 0.5".into()));
        }
        Ok(())
    }
}

/// Per-speaker voice parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    /// Pole of the one-pole low-pass shaping the glottal source.
    pub tilt: f64,
    pub fricative: f64,
}

impl Voice {
    pub fn distinct_from(&self, other: &Voice) -> bool {
        (self.f0 - other.f0).abs() >= MIN_F0_GAP
            || self
                .formants
                .iter()
                .zip(&other.formants)
                .any(|(a, b)| (a - b).abs() >= MIN_FORMANT_GAP)
    }

    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Voice {
        // Log-uniform F0; F1 sits above the second harmonic.
        let f0 = F0_RANGE.0 * (F0_RANGE.1 / F0_RANGE.0).powf(rng.gen::<f64>());
        let f1 = rng.gen_range((2.0 * f0).max(300.0)..950.0_f64.max(2.0 * f0 + 50.0));
        let f2 = rng.gen_range((f1 + 500.0).max(1000.0)..2500.0_f64.max(f1 + 600.0));
        let f3 = rng.gen_range((f2 + 500.0).max(2300.0)..3700.0_f64.max(f2 + 600.0));
        let bw = |base: f64, rng: &mut R| base * rng.gen_range(0.8..1.2);
        Voice {
            f0,
            formants: [f1, f2, f3],
            bandwidths: [bw(80.0, rng), bw(100.0, rng), bw(140.0, rng)],
            tilt: rng.gen_range(0.6..0.9),
            fricative: rng.gen_range(3500.0..6500.0),
        }
    }

    /// Small per-utterance variation around the speaker's voice.
    fn perturbed<R: Rng + ?Sized>(&self, rng: &mut R) -> Voice {
        let mut v = *self;
        v.f0 *= rng.gen_range(0.93..1.07);
        for f in v.formants.iter_mut() {
            *f *= rng.gen_range(0.97..1.03);
        }
        v.fricative *= rng.gen_range(0.95..1.05);
        v
    }
}

/// Draws `n` voices, redrawing any that are too close to an earlier one.
pub fn sample_voices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Voice> {
    let mut voices: Vec<Voice> = Vec::with_capacity(n);
    while voices.len() < n {
        let v = Voice::sample(rng);
        if voices.iter().all(|o| v.distinct_from(o)) {
            voices.push(v);
        }
    }
    voices
}

/// Two-pole resonator with unit gain at DC.
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tuned(f: f64, bw: f64) -> Self {
        let mut r = Resonator::default();
        r.tune(f, bw);
        r
    }

    fn tune(&mut self, f: f64, bw: f64) {
        let t = 1.0 / SAMPLE_RATE as f64;
        self.c = -(-2.0 * PI * bw * t).exp();
        self.b = 2.0 * (-PI * bw * t).exp() * (2.0 * PI * f * t).cos();
        self.a = 1.0 - self.b - self.c;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Band-limited pulse train with a time-varying fundamental, low-passed by
/// the voice tilt, plus a little aspiration noise.
fn glottal<R: Rng + ?Sized>(
    v: &Voice,
    contour: impl Fn(f64) -> f64,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let nyq = 0.95 * fs / 2.0;
    let mut phase = rng.gen_range(0.0..2.0 * PI);
    let mut lp = 0.0;
    (0..n)
        .map(|i| {
            let f0 = v.f0 * contour(i as f64 / n.max(1) as f64);
            let harmonics = (nyq / f0).floor().max(1.0);
            let half = 0.5 * phase;
            let s = half.sin();
            let pulse = if s.abs() < 1e-9 {
                1.0
            } else {
                ((harmonics + 0.5) * phase).sin() / (2.0 * s * harmonics) - 0.5 / harmonics
            };
            phase = (phase + 2.0 * PI * f0 / fs) % (2.0 * PI);
            lp = (1.0 - v.tilt) * pulse + v.tilt * lp;
            lp + 0.02 * rng.gen_range(-1.0..1.0)
        })
        .collect()
}

fn normalize_rms(x: &mut [f64], level: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= level / rms);
    }
}

fn fade(x: &mut [f64]) {
    let len = ((FADE_S * SAMPLE_RATE as f64) as usize).min(x.len() / 2);
    for i in 0..len {
        let g = 0.5 - 0.5 * (PI * i as f64 / len as f64).cos();
        x[i] *= g;
        let j = x.len() - 1 - i;
        x[j] *= g;
    }
}

fn vowel_contour(label: &str) -> fn(f64) -> f64 {
    match label {
        "aa" => |u| 1.15 - 0.3 * u,
        "iy" => |u| 0.85 + 0.3 * u,
        _ => |u| 0.85 + 0.6 * (u - 0.5).abs(),
    }
}

/// Phoneme inventory per group.
pub fn phonemes(group: PhonemeGroup) -> &'static [&'static str] {
    match group {
        PhonemeGroup::Vowels => &["aa", "iy", "uw"],
        PhonemeGroup::Semivowels => &["w", "y", "l"],
        PhonemeGroup::Nasals => &["m", "n"],
        PhonemeGroup::Fricatives => &["s", "f"],
        PhonemeGroup::Stops => &["p", "t", "k"],
    }
}

fn duration_ms(group: PhonemeGroup) -> (f64, f64) {
    match group {
        PhonemeGroup::Vowels => (120.0, 260.0),
        PhonemeGroup::Semivowels | PhonemeGroup::Nasals | PhonemeGroup::Stops => (60.0, 120.0),
        PhonemeGroup::Fricatives => (80.0, 160.0),
    }
}

/// Renders one phoneme of `n` samples, RMS-normalized and faded at the edges.
pub fn render_phoneme<R: Rng + ?Sized>(
    v: &Voice,
    group: PhonemeGroup,
    label: &str,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = match group {
        PhonemeGroup::Vowels => {
            let src = glottal(v, vowel_contour(label), n, rng);
            let mut rs: Vec<Resonator> = (0..3)
                .map(|k| Resonator::tuned(v.formants[k], v.bandwidths[k]))
                .collect();
            src.into_iter()
                .map(|x| rs.iter_mut().fold(x, |acc, r| r.tick(acc)))
                .collect::<Vec<_>>()
        }
        PhonemeGroup::Semivowels => {
            let start = match label {
                "w" => [0.6, 0.7, 0.9],
                "y" => [0.5, 1.3, 1.05],
                _ => [0.8, 0.8, 1.0],
            };
            let src = glottal(v, |_| 1.0, n, rng);
            let mut rs = [Resonator::default(); 3];
            src.into_iter()
                .enumerate()
                .map(|(i, x)| {
                    let u = i as f64 / n.max(1) as f64;
                    rs.iter_mut().enumerate().fold(x, |acc, (k, r)| {
                        r.tune(
                            v.formants[k] * (start[k] + (1.0 - start[k]) * u),
                            v.bandwidths[k],
                        );
                        r.tick(acc)
                    })
                })
                .collect()
        }
        PhonemeGroup::Nasals => {
            let murmur = if label == "m" { 250.0 } else { 320.0 };
            let src = glottal(v, |_| 1.0, n, rng);
            let mut low = Resonator::tuned(murmur, 100.0);
            let mut high = Resonator::tuned(v.formants[2], 300.0);
            src.into_iter()
                .map(|x| low.tick(x) + 0.1 * high.tick(x))
                .collect()
        }
        PhonemeGroup::Fricatives => {
            let (f, bw) = if label == "s" {
                (v.fricative, 1500.0)
            } else {
                (0.7 * v.fricative, 2500.0)
            };
            let mut r = Resonator::tuned(f, bw);
            let mut prev = 0.0;
            (0..n)
                .map(|_| {
                    let y = r.tick(rng.gen_range(-1.0..1.0));
                    let d = y - prev;
                    prev = y;
                    d
                })
                .collect()
        }
        PhonemeGroup::Stops => {
            let f = match label {
                "p" => v.formants[1],
                "t" => 0.8 * v.fricative,
                _ => 1.3 * v.formants[1],
            };
            let closure = (0.6 * n as f64) as usize;
            let tau = 0.006 * SAMPLE_RATE as f64;
            let mut r = Resonator::tuned(f, 800.0);
            (0..n)
                .map(|i| {
                    if i < closure {
                        0.0
                    } else {
                        r.tick(rng.gen_range(-1.0..1.0) * (-((i - closure) as f64) / tau).exp())
                    }
                })
                .collect()
        }
    };
    let level = match group {
        PhonemeGroup::Vowels => 1.0,
        PhonemeGroup::Semivowels => 0.7,
        PhonemeGroup::Nasals | PhonemeGroup::Stops => 0.5,
        PhonemeGroup::Fricatives => 0.35,
    };
    normalize_rms(&mut out, LEVEL * level);
    fade(&mut out);
    out
}

fn pick_group<R: Rng + ?Sized>(rng: &mut R) -> PhonemeGroup {
    let weights = [0.35, 0.15, 0.15, 0.15, 0.2];
    let mut u = rng.gen::<f64>();
    for (g, w) in PhonemeGroup::ALL.into_iter().zip(weights) {
        if u < w {
            return g;
        }
        u -= w;
    }
    PhonemeGroup::Stops
}

/// One utterance and its alignment in 10 ms input frames.
pub fn render_utterance<R: Rng + ?Sized>(
    voice: &Voice,
    seconds: f64,
    rng: &mut R,
) -> (Waveform, Vec<AlignmentSegment>) {
    let fs = SAMPLE_RATE as f64;
    let total = (seconds * fs).round() as usize;
    let v = voice.perturbed(rng);
    let mut samples = Vec::with_capacity(total);
    let mut alignment = Vec::new();
    while samples.len() < total {
        let group = pick_group(rng);
        let label = *phonemes(group).choose(rng).expect("non-empty inventory");
        let (lo, hi) = duration_ms(group);
        let n = ((rng.gen_range(lo..hi) / 1000.0) * fs) as usize;
        let n = n.min(total - samples.len());
        let start = samples.len();
        samples.extend(render_phoneme(&v, group, label, n, rng));
        let (a, b) = (start / HOP, samples.len() / HOP);
        if b > a {
            alignment.push(AlignmentSegment {
                start: a,
                end: b,
                phoneme: label.to_string(),
                group,
            });
        }
    }
    for s in samples.iter_mut() {
        *s += NOISE_FLOOR * rng.gen_range(-1.0..1.0);
    }
    let w = Waveform::new(samples, SAMPLE_RATE).expect("positive length at the native rate");
    (w, alignment)
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// Voices for a seed, independent of how many utterances are rendered.
pub fn voices_for_seed(spec: &SynthSpec, seed: u64) -> Vec<Voice> {
    sample_voices(spec.n_speakers, &mut stream(seed, 0))
}

pub fn speaker_name(s: usize) -> String {
    format!("spk{s:03}")
}

/// Writes WAVs, alignments, `manifest.csv`, `trials.txt` and `speakers.csv`
/// under `out`. Test-split utterances are the last `test_utterances` of each
/// speaker; the trial list pairs every two of them.
pub fn synth_dataset(spec: &SynthSpec, seed: u64, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    create_dir(&out.join("wav"))?;
    create_dir(&out.join("align"))?;
    let voices = voices_for_seed(spec, seed);
    let mut utterances = Vec::new();
    for (s, voice) in voices.iter().enumerate() {
        for u in 0..spec.utterances {
            let mut rng = stream(seed, 1 + (s * spec.utterances + u) as u64);
            let (w, align) = render_utterance(voice, spec.seconds, &mut rng);
            let stem = format!("{}_utt{u:02}", speaker_name(s));
            let wav = format!("wav/{stem}.wav");
            let alignment = format!("align/{stem}.csv");
            write_wav(&out.join(&wav), &w)?;
            save_alignment(&out.join(&alignment), &align)?;
            let split = if u + spec.test_utterances >= spec.utterances {
                Split::Test
            } else {
                Split::Train
            };
            utterances.push(Utterance {
                speaker: speaker_name(s),
                utterance: stem,
                split,
                wav,
                alignment,
            });
        }
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        utterances,
    };
    manifest.save(&out.join("manifest.csv"))?;

    let test: Vec<&Utterance> = manifest
        .utterances
        .iter()
        .filter(|u| u.split == Split::Test)
        .collect();
    let mut trials = Vec::new();
    for i in 0..test.len() {
        for j in i + 1..test.len() {
            trials.push(Trial {
                target: test[i].speaker == test[j].speaker,
                a: test[i].wav.clone(),
                b: test[j].wav.clone(),
            });
        }
    }
    save_trials(&out.join("trials.txt"), &trials)?;

    let mut table = String::from("speaker,f0,f1,f2,f3,tilt,fricative\n");
    for (s, v) in voices.iter().enumerate() {
        table.push_str(&format!(
            "{},{:.3},{:.3},{:.3},{:.3},{:.4},{:.3}\n",
            speaker_name(s),
            v.f0,
            v.formants[0],
            v.formants[1],
            v.formants[2],
            v.tilt,
            v.fricative
        ));
    }
    write_text(&out.join("speakers.csv"), &table)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voices_are_distinct_and_in_range() {
        let v = sample_voices(50, &mut stream(3, 0));
        for (i, a) in v.iter().enumerate() {
            assert!((F0_RANGE.0..=F0_RANGE.1).contains(&a.f0));
            assert!(a.formants[0] >= 2.0 * a.f0);
            assert!(a.formants[0] < a.formants[1] && a.formants[1] < a.formants[2]);
            for b in &v[i + 1..] {
                assert!(a.distinct_from(b));
            }
        }
    }

    #[test]
    fn alignment_tiles_the_utterance() {
        let v = sample_voices(1, &mut stream(4, 0))[0];
        let (w, a) = render_utterance(&v, 1.0, &mut stream(4, 1));
        assert_eq!(w.len(), 16_000);
        assert_eq!(a[0].start, 0);
        assert_eq!(a.last().unwrap().end, 100);
        for p in a.windows(2) {
            assert_eq!(p[0].end, p[1].start);
        }
        assert!(w.samples().iter().all(|s| s.abs() < 1.0));
    }
}
