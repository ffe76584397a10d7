//! End-to-end operations behind the command-line subcommands.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dtdy_core::evaluation::{det_curve, report, score_embeddings, segment_embeddings, EvalReport};
use dtdy_core::explainability::{
    assign_groups, compute_sam, frame_scores, head_accuracy, split_utterances,
    train_classifier_head, utterance_reference_embedding, GroupScores, GroupSummary, HeadTraining,
    SpeakerActivationMap,
};
use dtdy_core::features::{
    batch_tensor, featurize, sample_train_segment, LogMelExtractor, Waveform,
};
use dtdy_core::model_zoo::{ConvKind, Mode, Model};
use dtdy_core::training::{make_batches, BatchPlan, LossHead, TrainState};
use dtdy_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::read_wav;
use crate::checkpoint::{
    load_model, load_train_state, model_checkpoint, train_checkpoint, Checkpoint,
};
use crate::config::RunConfig;
use crate::data::{self, create_dir, load_alignment, load_trials, write_text, Manifest, Split};
use crate::error::{Error, Result};
use crate::synth::{synth_dataset, SynthSpec};

pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss.csv";

/// Independent random stream `index` of a seed.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

const INIT_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 1_000;
const CROP_STREAM: u64 = 100_000;

/// Runs `f` on a pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(f))
}

pub fn synth_spec(cfg: &RunConfig) -> Result<SynthSpec> {
    Ok(SynthSpec {
        n_speakers: cfg.usize("synth.speakers")?,
        utterances: cfg.usize("synth.utterances")?,
        test_utterances: cfg.usize("synth.test_utterances")?,
        seconds: cfg.f64("synth.seconds")?,
    })
}

pub fn synth(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Manifest> {
    let spec = synth_spec(cfg)?;
    create_dir(out)?;
    let m = synth_dataset(&spec, seed, out)?;
    cfg.save_into(out)?;
    Ok(m)
}

/// Utterances of one split, loaded, with speaker labels in order of first
/// appearance.
pub struct LoadedSet {
    pub speakers: Vec<String>,
    pub labels: Vec<usize>,
    pub waves: Vec<Waveform>,
    pub rows: Vec<usize>,
}

impl LoadedSet {
    pub fn by_speaker(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.speakers.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

pub fn load_split(m: &Manifest, split: Option<Split>) -> Result<LoadedSet> {
    let mut set = LoadedSet {
        speakers: Vec::new(),
        labels: Vec::new(),
        waves: Vec::new(),
        rows: Vec::new(),
    };
    for (row, u) in m.utterances.iter().enumerate() {
        if split.is_some_and(|s| s != u.split) {
            continue;
        }
        let label = match set.speakers.iter().position(|s| *s == u.speaker) {
            Some(l) => l,
            None => {
                set.speakers.push(u.speaker.clone());
                set.speakers.len() - 1
            }
        };
        set.waves.push(read_wav(&m.resolve(&u.wav))?);
        set.labels.push(label);
        set.rows.push(row);
    }
    if set.waves.is_empty() {
        return Err(Error::Config(format!(
            "manifest in {} has no usable rows",
            m.root.display()
        )));
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub last_loss: f64,
}

fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Trains on the `train` split of the manifest, writing `loss.csv` and a
/// full checkpoint after every epoch. `resume` continues from a checkpoint.
pub fn train(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    resume: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<TrainSummary> {
    let manifest = Manifest::load(&cfg.path("data.manifest")?)?;
    let set = load_split(&manifest, Some(Split::Train))?;
    let per_speaker = set.by_speaker();
    let plan = BatchPlan {
        speakers_per_batch: cfg.usize("train.speakers_per_batch")?,
    };
    let epochs = cfg.usize("train.epochs")?;
    let schedule = cfg.schedule()?;
    let adam = cfg.adam()?;
    create_dir(out)?;
    cfg.save_into(out)?;

    let (mut state, start) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let (state, epoch) = load_train_state(&ck, p, adam)?;
            (state, epoch + 1)
        }
        None => {
            let mut rng = stream(seed, INIT_STREAM);
            let model = Model::new(cfg.model_config()?, &mut rng)?;
            let head = LossHead::new(model.config().emb_dim, set.speakers.len(), &mut rng)?;
            (TrainState::new(model, head, adam), 0)
        }
    };

    let log_path = out.join(LOSS_LOG);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut loss_log = BufWriter::new(file);
    if resume.is_none() {
        data::append_line(
            &log_path,
            &mut loss_log,
            "step,epoch,lr,loss_ap,loss_sm,loss_total",
        )?;
    }

    let extractor = LogMelExtractor::new();
    let mut last_loss = f64::NAN;
    for epoch in start..epochs {
        let lr = schedule.at(epoch);
        let epoch_plan = make_batches(
            &per_speaker,
            plan,
            &mut stream(seed, BATCH_STREAM + epoch as u64),
        )?;
        if epoch_plan.batches.is_empty() {
            return Err(Error::Config(format!(
                "{} speakers with two or more utterances cannot fill a batch of {}",
                per_speaker.len() - epoch_plan.skipped.len(),
                plan.speakers_per_batch
            )));
        }
        let mut crop_rng = stream(seed, CROP_STREAM + epoch as u64);
        let mut epoch_loss = 0.0;
        for batch in &epoch_plan.batches {
            let feats = batch
                .rows()
                .iter()
                .map(|&u| {
                    featurize(
                        &extractor,
                        &sample_train_segment(&set.waves[u], &mut crop_rng)?,
                    )
                })
                .collect::<dtdy_core::Result<Vec<_>>>()?;
            let x = batch_tensor(&feats)?;
            let result = state.step(&x, &batch.row_speakers(), lr);
            let losses = match result {
                Ok(l) => l,
                Err(e) => {
                    loss_log.flush().map_err(|io| Error::io(&log_path, io))?;
                    return Err(e.into());
                }
            };
            data::append_line(
                &log_path,
                &mut loss_log,
                &format!(
                    "{},{},{:.9},{:.9},{:.9},{:.9}",
                    state.model_opt.step, epoch, lr, losses.ap, losses.sm, losses.total
                ),
            )?;
            epoch_loss += losses.total;
            last_loss = losses.total;
        }
        loss_log.flush().map_err(|e| Error::io(&log_path, e))?;
        save_atomic(
            &train_checkpoint(cfg, &state, epoch, seed),
            &out.join(CHECKPOINT),
        )?;
        log(&format!(
            "# epoch {epoch} lr {lr:.6} mean loss {:.6}",
            epoch_loss / epoch_plan.batches.len() as f64
        ));
    }
    Ok(TrainSummary {
        epochs,
        steps: state.model_opt.step,
        last_loss,
    })
}

pub fn load_checkpoint_model(path: &Path) -> Result<Model> {
    load_model(&Checkpoint::load(path)?, path)
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Scores every trial with the ten-segment protocol and writes
/// `scores.csv`, `det.csv` and `report.txt`.
pub fn evaluate(
    checkpoint: &Path,
    trials_path: &Path,
    out: &Path,
    threads: usize,
) -> Result<EvalReport> {
    let trials = load_trials(trials_path)?;
    let model = load_checkpoint_model(checkpoint)?;
    let root = parent_dir(trials_path);
    let mut unique: Vec<&str> = Vec::new();
    for t in &trials {
        for p in [t.a.as_str(), t.b.as_str()] {
            if !unique.contains(&p) {
                unique.push(p);
            }
        }
    }
    let waves = unique
        .iter()
        .map(|p| {
            read_wav(&root.join(p)).map_err(|e| {
                let row = trials
                    .iter()
                    .position(|t| t.a == *p || t.b == *p)
                    .unwrap_or(0)
                    + 1;
                Error::format(trials_path, format!("row {row}: {e}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let extractor = LogMelExtractor::new();
    let embeddings = with_threads(threads, || {
        waves
            .par_iter()
            .map(|w| segment_embeddings(&model, &extractor, w))
            .collect::<dtdy_core::Result<Vec<_>>>()
    })??;
    let index = |p: &str| {
        unique
            .iter()
            .position(|u| *u == p)
            .expect("collected above")
    };
    let scores = trials
        .iter()
        .map(|t| Ok(score_embeddings(&embeddings[index(&t.a)], &embeddings[index(&t.b)])?.score))
        .collect::<Result<Vec<f64>>>()?;
    let labels: Vec<bool> = trials.iter().map(|t| t.target).collect();
    let rep = report(&labels, &scores)?;

    create_dir(out)?;
    write_text(&out.join("scores.csv"), &data::scores_csv(&trials, &scores))?;
    let (t, n): (Vec<f64>, Vec<f64>) = {
        let t = scores
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l)
            .map(|(s, _)| *s)
            .collect();
        let n = scores
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| !l)
            .map(|(s, _)| *s)
            .collect();
        (t, n)
    };
    write_text(&out.join("det.csv"), &data::det_csv(&det_curve(&t, &n)?))?;
    write_text(&out.join("report.txt"), &report_text(&rep))?;
    Ok(rep)
}

pub fn report_text(r: &EvalReport) -> String {
    format!(
        "eer = {:.9}\neer_threshold = {:.9}\nmin_dcf = {:.9}\ndcf_threshold = {:.9}\nn_target = {}\nn_nontarget = {}\n",
        r.eer, r.eer_threshold, r.min_dcf, r.dcf_threshold, r.n_target, r.n_nontarget
    )
}

/// Whole-utterance input `[1, 1, 64, T]`.
pub fn utterance_input(w: &Waveform) -> Result<Tensor> {
    let feats = featurize(&LogMelExtractor::new(), w)?;
    Ok(batch_tensor(&[feats])?)
}

/// Whole-utterance embedding written as one CSV row.
pub fn embed(checkpoint: &Path, wav: &Path, out: &Path) -> Result<Vec<f64>> {
    let model = load_checkpoint_model(checkpoint)?;
    let e = model.embed(&utterance_input(&read_wav(wav)?)?)?;
    let cells: Vec<String> = e.data().iter().map(|v| format!("{v:.9}")).collect();
    write_text(out, &format!("{}\n", cells.join(",")))?;
    Ok(e.data().to_vec())
}

/// Utterance embedding and frame embeddings `[T', D]` from one forward pass.
pub fn utterance_and_frames(model: &Model, w: &Waveform) -> Result<(Vec<f64>, Tensor)> {
    let x = utterance_input(w)?;
    let mut tape = Tape::new();
    let params = model.bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, &params, xv, Mode::Eval)?;
    let frames = model.frame_embeddings(&mut tape, &params, out.features)?;
    let f = tape.value(frames);
    let (t, d) = (f.shape()[1], f.shape()[2]);
    Ok((
        tape.value(out.embedding).data().to_vec(),
        Tensor::new([t, d], f.data().to_vec())?,
    ))
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    Ok(Tensor::new([rows.len(), d], rows.concat())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamOutcome {
    pub map: SpeakerActivationMap,
    pub head_accuracy: Option<f64>,
}

/// Activation map for `speaker` on one utterance. Without a stored
/// classifier, one is first trained on frozen utterance embeddings and saved
/// as `model_head.ckpt`.
#[allow(clippy::too_many_arguments)]
pub fn sam(
    cfg: &RunConfig,
    seed: u64,
    checkpoint: &Path,
    wav: Option<&Path>,
    out: &Path,
    threads: usize,
) -> Result<SamOutcome> {
    let mut model = load_checkpoint_model(checkpoint)?;
    let speaker = cfg.usize("sam.speaker")?;
    let layer = cfg.get("sam.layer").to_string();
    create_dir(out)?;
    cfg.save_into(out)?;
    let mut accuracy = None;
    let manifest = match cfg.get("data.manifest") {
        "" => None,
        p => Some(Manifest::load(Path::new(p))?),
    };
    if model.classifier().is_none() {
        let m = manifest.as_ref().ok_or_else(|| {
            Error::Config(
                "missing config key data.manifest (needed to train a classifier head)".into(),
            )
        })?;
        let set = load_split(m, None)?;
        let embeddings = with_threads(threads, || {
            set.waves
                .par_iter()
                .map(|w| Ok(model.embed(&utterance_input(w)?)?.data().to_vec()))
                .collect::<Result<Vec<_>>>()
        })??;
        let n_train = cfg.usize("head.train_utterances")?;
        let n_test = cfg.usize("head.test_utterances")?;
        let mut rng = stream(seed, HEAD_STREAM);
        let split = split_utterances(&set.by_speaker(), n_train, n_test, &mut rng)?;
        let gather = |groups: &[Vec<usize>]| -> Result<(Tensor, Vec<usize>)> {
            let idx: Vec<usize> = groups.iter().flatten().copied().collect();
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| embeddings[i].clone()).collect();
            Ok((stack(&rows)?, idx.iter().map(|&i| set.labels[i]).collect()))
        };
        let (train_x, train_y) = gather(&split.train)?;
        let (test_x, test_y) = gather(&split.test)?;
        let opts = HeadTraining {
            steps: cfg.usize("head.steps")?,
            lr: cfg.f64("head.lr")?,
        };
        train_classifier_head(
            &mut model,
            &train_x,
            &train_y,
            set.speakers.len(),
            opts,
            &mut rng,
        )?;
        let acc = head_accuracy(&model, &test_x, &test_y)?;
        write_text(
            &out.join("head.txt"),
            &format!(
                "head_accuracy = {acc:.9}\nspeakers = {}\n",
                set.speakers.len()
            ),
        )?;
        model_checkpoint(
            &crate::checkpoint::header_config(&Checkpoint::load(checkpoint)?, checkpoint)?,
            &model,
        )
        .save(&out.join("model_head.ckpt"))?;
        accuracy = Some(acc);
    }
    let wave = match (wav, &manifest) {
        (Some(p), _) => read_wav(p)?,
        (None, Some(m)) => {
            let names = m.speakers();
            let name = names
                .get(speaker)
                .ok_or_else(|| Error::Config(format!("sam.speaker {speaker} out of range")))?;
            let u = m
                .utterances
                .iter()
                .find(|u| &u.speaker == name && u.split == Split::Test)
                .or_else(|| m.utterances.iter().find(|u| &u.speaker == name))
                .expect("speaker listed in the manifest");
            read_wav(&m.resolve(&u.wav))?
        }
        (None, None) => return Err(Error::Usage("sam needs --wav or data.manifest".into())),
    };
    let map = compute_sam(&model, &utterance_input(&wave)?, speaker, &layer)?;
    write_text(&out.join("sam.csv"), &data::sam_csv(&map))?;
    Ok(SamOutcome {
        map,
        head_accuracy: accuracy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnalysis {
    pub same: GroupScores,
    pub cross: GroupScores,
}

impl FrameAnalysis {
    pub fn mean(scores: &GroupScores) -> f64 {
        let all: Vec<f64> = scores.groups.values().flatten().copied().collect();
        let mut sorted = all.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.iter().sum::<f64>() / sorted.len().max(1) as f64
    }
}

/// Frame-vs-reference cosine scores for every test-split utterance, grouped
/// by phoneme class. The same-speaker reference averages the speaker's other
/// utterances; the cross reference averages all utterances of the next
/// speaker. Writes `frames.csv`, `frames_cross.csv` and `frames_summary.txt`.
pub fn frames(
    checkpoint: &Path,
    manifest_path: &Path,
    out: &Path,
    threads: usize,
) -> Result<FrameAnalysis> {
    let model = load_checkpoint_model(checkpoint)?;
    let m = Manifest::load(manifest_path)?;
    let set = load_split(&m, None)?;
    let per_utt = with_threads(threads, || {
        set.waves
            .par_iter()
            .map(|w| utterance_and_frames(&model, w))
            .collect::<Result<Vec<_>>>()
    })??;
    let by_speaker = set.by_speaker();
    let speaker_matrix = |s: usize| {
        stack(
            &by_speaker[s]
                .iter()
                .map(|&i| per_utt[i].0.clone())
                .collect::<Vec<_>>(),
        )
    };
    let mut analysis = FrameAnalysis {
        same: GroupScores::default(),
        cross: GroupScores::default(),
    };
    for (i, &row) in set.rows.iter().enumerate() {
        let u = &m.utterances[row];
        if u.split != Split::Test {
            continue;
        }
        let s = set.labels[i];
        let pos = by_speaker[s]
            .iter()
            .position(|&j| j == i)
            .expect("own speaker");
        let reference = utterance_reference_embedding(&speaker_matrix(s)?, pos)?;
        let other = (s + 1) % by_speaker.len();
        let others = speaker_matrix(other)?;
        let d = others.shape()[1];
        let mut cross_ref = vec![0.0; d];
        for r in others.data().chunks(d) {
            cross_ref.iter_mut().zip(r).for_each(|(c, v)| *c += v);
        }
        cross_ref
            .iter_mut()
            .for_each(|c| *c /= others.shape()[0] as f64);

        let frames = &per_utt[i].1;
        let alignment = load_alignment(&m.resolve(&u.alignment))?;
        let groups = assign_groups(&alignment, frames.shape()[0]);
        analysis
            .same
            .add(&frame_scores(frames, &reference)?, &groups);
        analysis
            .cross
            .add(&frame_scores(frames, &cross_ref)?, &groups);
    }
    create_dir(out)?;
    write_text(
        &out.join("frames.csv"),
        &data::groups_csv(&analysis.same.summaries()),
    )?;
    write_text(
        &out.join("frames_cross.csv"),
        &data::groups_csv(&analysis.cross.summaries()),
    )?;
    write_text(
        &out.join("frames_summary.txt"),
        &format!(
            "same_speaker_mean = {:.9}\ncross_speaker_mean = {:.9}\nuncovered_frames = {}\n",
            FrameAnalysis::mean(&analysis.same),
            FrameAnalysis::mean(&analysis.cross),
            analysis.same.other.len()
        ),
    )?;
    Ok(analysis)
}

pub fn summaries(g: &GroupScores) -> Vec<GroupSummary> {
    g.summaries()
}

/// `(model name, parameter count)` for every convolution kind at the
/// configured size.
pub fn params(cfg: &RunConfig) -> Result<Vec<(String, usize)>> {
    let base = cfg.model_config()?;
    [ConvKind::Vanilla, ConvKind::Tdy, ConvKind::Dtdy]
        .into_iter()
        .map(|kind| {
            let mc = dtdy_core::model_zoo::ModelConfig {
                conv_kind: kind,
                ..base.clone()
            };
            let model = Model::new(mc, &mut rand::rngs::mock::StepRng::new(0, 1))?;
            Ok((model.config().name(), model.count_params()))
        })
        .collect()
}
