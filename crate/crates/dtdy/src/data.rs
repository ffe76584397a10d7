//! Manifests, trial lists, alignments and the CSV artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dtdy_core::evaluation::DetPoint;
use dtdy_core::explainability::{
    AlignmentSegment, GroupSummary, PhonemeGroup, SpeakerActivationMap,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One manifest row. Paths are kept as written (relative to the manifest).
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: String,
    pub utterance: String,
    pub split: Split,
    pub wav: String,
    pub alignment: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub utterances: Vec<Utterance>,
}

const MANIFEST_HEADER: [&str; 5] = ["speaker", "utterance", "split", "wav", "alignment"];

fn parent_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::format(
                path,
                format!("expected header {}", MANIFEST_HEADER.join(",")),
            ));
        }
        let mut utterances = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let split = rec[2]
                .parse()
                .map_err(|m| Error::format(path, format!("row {}: {m}", i + 1)))?;
            utterances.push(Utterance {
                speaker: rec[0].to_string(),
                utterance: rec[1].to_string(),
                split,
                wav: rec[3].to_string(),
                alignment: rec[4].to_string(),
            });
        }
        if utterances.is_empty() {
            return Err(Error::Config(format!(
                "{}: manifest has no rows",
                path.display()
            )));
        }
        Ok(Manifest {
            root: parent_of(path),
            utterances,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(MANIFEST_HEADER)
            .map_err(|e| csv_err(path, e))?;
        for u in &self.utterances {
            w.write_record([
                &u.speaker,
                &u.utterance,
                u.split.as_str(),
                &u.wav,
                &u.alignment,
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Speaker names in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for u in &self.utterances {
            if !out.contains(&u.speaker) {
                out.push(u.speaker.clone());
            }
        }
        out
    }

    pub fn speaker_index(&self, name: &str) -> Option<usize> {
        self.speakers().iter().position(|s| s == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub target: bool,
    pub a: String,
    pub b: String,
}

/// `label path_a path_b` per line, blank lines and `#` comments skipped.
pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let target = match fields.as_slice() {
            ["1", _, _] => true,
            ["0", _, _] => false,
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected `label path_a path_b`", i + 1),
                ))
            }
        };
        trials.push(Trial {
            target,
            a: fields[1].to_string(),
            b: fields[2].to_string(),
        });
    }
    if trials.is_empty() {
        return Err(Error::Config(format!(
            "{}: trial list is empty",
            path.display()
        )));
    }
    let (t, n) = trials.iter().fold(
        (0, 0),
        |(t, n), r| if r.target { (t + 1, n) } else { (t, n + 1) },
    );
    if t == 0 || n == 0 {
        return Err(Error::Config(format!(
            "{}: need target and nontarget trials (got {t} and {n})",
            path.display()
        )));
    }
    Ok(trials)
}

pub fn save_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        s.push_str(&format!("{} {} {}\n", u8::from(t.target), t.a, t.b));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

const ALIGN_HEADER: [&str; 4] = ["start_frame", "end_frame", "phoneme", "group"];

pub fn load_alignment(path: &Path) -> Result<Vec<AlignmentSegment>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |m: String| Error::format(path, format!("row {}: {m}", i + 1));
        out.push(AlignmentSegment {
            start: rec[0].parse().map_err(|e| bad(format!("{e}")))?,
            end: rec[1].parse().map_err(|e| bad(format!("{e}")))?,
            phoneme: rec[2].to_string(),
            group: rec[3]
                .parse::<PhonemeGroup>()
                .map_err(|e| bad(e.to_string()))?,
        });
    }
    dtdy_core::explainability::validate_alignment(&out)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(out)
}

pub fn save_alignment(path: &Path, segments: &[AlignmentSegment]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(ALIGN_HEADER).map_err(|e| csv_err(path, e))?;
    for s in segments {
        w.write_record([
            s.start.to_string(),
            s.end.to_string(),
            s.phoneme.clone(),
            s.group.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `label,path_a,path_b,score` with nine decimals.
pub fn scores_csv(trials: &[Trial], scores: &[f64]) -> String {
    let mut s = String::from("label,path_a,path_b,score\n");
    for (t, v) in trials.iter().zip(scores) {
        s.push_str(&format!("{},{},{},{v:.9}\n", u8::from(t.target), t.a, t.b));
    }
    s
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut s = String::from("threshold,p_miss,p_fa\n");
    for p in points {
        s.push_str(&format!(
            "{:.9},{:.9},{:.9}\n",
            p.threshold, p.p_miss, p.p_fa
        ));
    }
    s
}

/// Header line then one row per Mel bin.
pub fn sam_csv(map: &SpeakerActivationMap) -> String {
    let mut s = format!(
        "# speaker={} layer={} F={} T={}\n",
        map.speaker, map.layer, map.n_mels, map.n_frames
    );
    for row in map.values.chunks(map.n_frames) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn groups_csv(summaries: &[GroupSummary]) -> String {
    let mut s = String::from("group,n_frames,mean,median,q25,q75\n");
    for g in summaries {
        s.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9},{:.9}\n",
            g.group, g.n_frames, g.mean, g.median, g.q25, g.q75
        ));
    }
    s
}

/// Appends one line to an open log, mapping failures to the file path.
pub fn append_line(path: &Path, out: &mut impl Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trial_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        fs::write(&p, "# comment\n1 a.wav b.wav\n\n0 a.wav c.wav\n").unwrap();
        let t = load_trials(&p).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t[0].target && !t[1].target);
        fs::write(&p, "").unwrap();
        assert!(matches!(load_trials(&p), Err(Error::Config(m)) if m.contains("t.txt")));
        fs::write(&p, "2 a b\n").unwrap();
        assert!(matches!(load_trials(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = Manifest {
            root: dir.path().to_path_buf(),
            utterances: vec![Utterance {
                speaker: "s0".into(),
                utterance: "u0".into(),
                split: Split::Test,
                wav: "wav/s0_u0.wav".into(),
                alignment: "align/s0_u0.csv".into(),
            }],
        };
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
    }

    #[test]
    fn alignment_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let a = vec![
            AlignmentSegment {
                start: 0,
                end: 12,
                phoneme: "aa".into(),
                group: PhonemeGroup::Vowels,
            },
            AlignmentSegment {
                start: 12,
                end: 20,
                phoneme: "s".into(),
                group: PhonemeGroup::Fricatives,
            },
        ];
        save_alignment(&p, &a).unwrap();
        assert_eq!(load_alignment(&p).unwrap(), a);
    }
}
