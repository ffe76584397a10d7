//! Checkpoint files: a text header of `key = value` lines followed by named
//! little-endian f64 tensors.
//!
//! ```text
//! DTDYCKPT v1
//! model.kind = dtdy
//! ...
//! tensors = <n>
//! end
//! <n × (u32 name_len, name, u32 rank, rank × u64 dim, numel × f64)>
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use dtdy_core::model_zoo::Model;
use dtdy_core::training::{adam_tensors, restore_adam, AdamConfig, LossHead, TrainState};
use dtdy_core::{ParamStore, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};

const MAGIC: &str = "DTDYCKPT v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.header {
            writeln!(w, "{k} = {v}")?;
        }
        writeln!(w, "tensors = {}", self.tensors.len())?;
        writeln!(w, "end")?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(bad("truncated header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut header = Vec::new();
        let mut count = None;
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once(" = ")
                .ok_or_else(|| bad("malformed header line"))?;
            if k == "tensors" {
                count = Some(v.parse::<usize>().map_err(|_| bad("bad tensor count"))?);
            } else {
                header.push((k.to_string(), v.to_string()));
            }
        }
        let count = count.ok_or_else(|| bad("missing tensor count"))?;
        let mut read_exact =
            |buf: &mut [u8]| r.read_exact(buf).map_err(|_| bad("truncated tensor data"));
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut u32b = [0u8; 4];
            read_exact(&mut u32b)?;
            let mut name = vec![0u8; u32::from_le_bytes(u32b) as usize];
            read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            read_exact(&mut u32b)?;
            let rank = u32::from_le_bytes(u32b) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut u64b = [0u8; 8];
                read_exact(&mut u64b)?;
                shape.push(u64::from_le_bytes(u64b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(bad("trailing bytes after tensors"));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f, path)
    }
}

fn push_store(out: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore) {
    for (name, t) in store.iter() {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

/// Model tensors and config, enough to rebuild it for inference.
pub fn model_checkpoint(cfg: &RunConfig, model: &Model) -> Checkpoint {
    let mut ck = Checkpoint {
        header: cfg
            .model_keys()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        tensors: Vec::new(),
    };
    push_store(&mut ck.tensors, "model", model.params());
    push_store(&mut ck.tensors, "buffer", model.buffers());
    ck
}

/// Full training state: model, loss head and both optimizers.
pub fn train_checkpoint(
    cfg: &RunConfig,
    state: &TrainState,
    epoch: usize,
    seed: u64,
) -> Checkpoint {
    let mut ck = model_checkpoint(cfg, &state.model);
    ck.header.push(("train.epoch".into(), epoch.to_string()));
    ck.header.push(("train.seed".into(), seed.to_string()));
    ck.header
        .push(("adam.step".into(), state.model_opt.step.to_string()));
    push_store(&mut ck.tensors, "loss", &state.head.store);
    for (prefix, store, opt) in [
        ("adam.model", state.model.params(), &state.model_opt),
        ("adam.loss", &state.head.store, &state.head_opt),
    ] {
        for (name, t) in adam_tensors(prefix, store, opt) {
            ck.tensors.push((name, t.clone()));
        }
    }
    ck
}

fn fill_store(ck: &Checkpoint, prefix: &str, store: &mut ParamStore, path: &Path) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = format!("{prefix}/{}", store.name(id));
        let t = ck
            .tensor(&name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::format(
                path,
                format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                ),
            ));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

/// Rebuilds the configuration stored in a checkpoint header.
pub fn header_config(ck: &Checkpoint, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in &ck.header {
        if k.starts_with("model.") {
            cfg.set(k, v)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
    }
    Ok(cfg)
}

/// Model (with classifier if stored) from a checkpoint.
pub fn load_model(ck: &Checkpoint, path: &Path) -> Result<Model> {
    let cfg = header_config(ck, path)?.model_config()?;
    let mut model = Model::new(cfg, &mut rand::rngs::mock::StepRng::new(0, 1))?;
    if let Some(w) = ck.tensor("model/classifier.weight") {
        model.attach_classifier(
            w.shape()[0],
            true,
            &mut rand::rngs::mock::StepRng::new(0, 1),
        )?;
    }
    fill_store(ck, "model", model.params_mut(), path)?;
    fill_store(ck, "buffer", model.buffers_mut(), path)?;
    Ok(model)
}

/// Training state and the epoch it was saved after.
pub fn load_train_state(
    ck: &Checkpoint,
    path: &Path,
    adam: AdamConfig,
) -> Result<(TrainState, usize)> {
    let model = load_model(ck, path)?;
    let mut store = ParamStore::new();
    for (name, t) in &ck.tensors {
        if let Some(n) = name.strip_prefix("loss/") {
            store.add(n, t.clone());
        }
    }
    let head = LossHead::from_store(store)?;
    let mut state = TrainState::new(model, head, adam);
    let lookup = |k: &str| ck.tensor(k).cloned();
    restore_adam(
        "adam.model",
        state.model.params(),
        &mut state.model_opt,
        lookup,
    )?;
    restore_adam("adam.loss", &state.head.store, &mut state.head_opt, lookup)?;
    let step: u64 = ck
        .meta("adam.step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, "missing adam.step"))?;
    state.model_opt.step = step;
    state.head_opt.step = step;
    let epoch = ck
        .meta("train.epoch")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, "missing train.epoch"))?;
    Ok((state, epoch))
}

/// Header metadata as a map, for reports.
pub fn header_map(ck: &Checkpoint) -> BTreeMap<String, String> {
    ck.header.iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint {
            header: vec![("model.kind".into(), "dtdy".into())],
            tensors: vec![
                (
                    "a".into(),
                    Tensor::new([2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
                ),
                ("s".into(), Tensor::scalar(2.0)),
            ],
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice(), Path::new("mem")).unwrap();
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(
            back.tensor("a").unwrap().data()[1].to_bits(),
            (-0.0f64).to_bits()
        );
    }

    #[test]
    fn truncation_detected() {
        let ck = Checkpoint {
            header: vec![],
            tensors: vec![("a".into(), Tensor::zeros([3]))],
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        bytes.pop();
        assert!(Checkpoint::read_from(bytes.as_slice(), Path::new("mem")).is_err());
        assert!(Checkpoint::read_from(&b"garbage\n"[..], Path::new("mem")).is_err());
    }
}
