//! Flat `key = value` run configuration with documented defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dtdy_core::dynamic_conv::HiddenWidth;
use dtdy_core::model_zoo::{stage_channels, ConvKind, ModelConfig, Pooling};
use dtdy_core::training::{AdamConfig, LrSchedule};

use crate::error::{Error, Result};

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(name: &'static str, default: &'static str, doc: &'static str) -> Key {
    Key { name, default, doc }
}

/// Every accepted key, in dump order.
pub const KEYS: &[Key] = &[
    key("seed", "7", "master seed; --seed overrides it"),
    key("model.kind", "dtdy", "vanilla | tdy | dtdy"),
    key(
        "model.width",
        "0.25",
        "channel multiplier of the 32-64-128-256 base",
    ),
    key(
        "model.channels",
        "auto",
        "explicit stage widths (a,b,c,d) or auto from model.width",
    ),
    key("model.blocks", "3,4,6,3", "residual blocks per stage"),
    key("model.reduction", "0.125", "generator reduction ratio r"),
    key(
        "model.hidden",
        "product",
        "generator hidden width rule: product | sum",
    ),
    key("model.basis", "6", "TDY basis kernels K"),
    key("model.pooling", "tap", "tap | asp"),
    key("model.emb_dim", "512", "embedding size"),
    key("model.asp_hidden", "128", "attention width of ASP"),
    key("train.epochs", "30", "training epochs"),
    key(
        "train.speakers_per_batch",
        "5",
        "speakers per batch, two utterances each",
    ),
    key("train.lr", "0.001", "base learning rate"),
    key("train.lr_decay", "0.75", "multiplicative decay"),
    key("train.lr_decay_every", "10", "epochs between decays"),
    key(
        "train.weight_decay",
        "0.00005",
        "weight decay added to gradients",
    ),
    key(
        "data.manifest",
        "",
        "manifest CSV (speaker,utterance,split,wav,alignment)",
    ),
    key("data.trials", "", "trial list (label path_a path_b)"),
    key(
        "sam.layer",
        "stem",
        "tap for activation maps: stem or stages.<s>.<i>",
    ),
    key(
        "sam.speaker",
        "0",
        "target speaker index for activation maps",
    ),
    key(
        "head.train_utterances",
        "8",
        "per-speaker utterances for classifier-head training",
    ),
    key(
        "head.test_utterances",
        "2",
        "per-speaker utterances held out for head accuracy",
    ),
    key("head.steps", "300", "full-batch steps of head training"),
    key("head.lr", "0.01", "head learning rate"),
    key("synth.speakers", "20", "synthetic speakers"),
    key("synth.utterances", "10", "utterances per synthetic speaker"),
    key(
        "synth.test_utterances",
        "2",
        "utterances per speaker marked as test split",
    ),
    key("synth.seconds", "3.0", "utterance length in seconds"),
];

fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Effective configuration: defaults overlaid with file values and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|k| (k.name, k.default.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `origin` names the
    /// source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`", i + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = find_key(name).ok_or_else(|| Error::Config(format!("unknown key {name:?}")))?;
        self.values.insert(k.name, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values
            .get(name)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key {name} is not declared"))
    }

    fn parsed<T: std::str::FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(name)
            .parse()
            .map_err(|e| Error::Config(format!("{name} = {:?}: {e}", self.get(name))))
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        self.parsed(name)
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        let v: f64 = self.parsed(name)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{name} must be finite")));
        }
        Ok(v)
    }

    /// A path key that must be set.
    pub fn path(&self, name: &str) -> Result<PathBuf> {
        match self.get(name) {
            "" => Err(Error::Config(format!("missing config key {name}"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    fn list4(&self, name: &str) -> Result<[usize; 4]> {
        let parts: Vec<usize> = self
            .get(name)
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        parts
            .try_into()
            .map_err(|_| Error::Config(format!("{name} needs four comma-separated values")))
    }

    /// Every key in declaration order with its documentation.
    pub fn dump(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for k in KEYS {
            s.push_str(&format!("# {}\n{} = {}\n", k.doc, k.name, self.get(k.name)));
        }
        s
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let kind: ConvKind = self.parsed("model.kind")?;
        let width = self.f64("model.width")?;
        let mut cfg = ModelConfig::resnet34(kind, width);
        if self.get("model.channels") != "auto" {
            cfg.stage_channels = self.list4("model.channels")?;
            cfg.width_mult = 0.0;
        } else if stage_channels(width).contains(&0) {
            return Err(Error::Config(format!(
                "model.width {width} leaves a stage without channels"
            )));
        }
        cfg.stage_blocks = self.list4("model.blocks")?;
        cfg.reduction = self.f64("model.reduction")?;
        cfg.hidden = self.parsed::<HiddenWidth>("model.hidden")?;
        cfg.basis = self.usize("model.basis")?;
        cfg.pooling = self.parsed::<Pooling>("model.pooling")?;
        cfg.emb_dim = self.usize("model.emb_dim")?;
        cfg.asp_hidden = self.usize("model.asp_hidden")?;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        Ok(LrSchedule {
            base: self.f64("train.lr")?,
            decay: self.f64("train.lr_decay")?,
            every: self.usize("train.lr_decay_every")?,
        })
    }

    pub fn adam(&self) -> Result<AdamConfig> {
        Ok(AdamConfig {
            weight_decay: self.f64("train.weight_decay")?,
            ..AdamConfig::default()
        })
    }

    /// Writes `config.txt` into `dir`.
    pub fn save_into(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join("config.txt");
        std::fs::write(&p, self.dump()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Model keys, for checkpoint headers.
    pub fn model_keys(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .filter(|k| k.name.starts_with("model."))
            .map(|k| (k.name, self.get(k.name).to_string()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::parse("model.kind = tdy # inline\n\ntrain.epochs=3\n", "t").unwrap();
        c.set_pair("data.manifest=m.csv").unwrap();
        let again = RunConfig::parse(&c.dump(), "dump").unwrap();
        assert_eq!(again, c);
        assert_eq!(again.dump(), c.dump());
        assert_eq!(c.get("model.kind"), "tdy");
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        let e = RunConfig::parse("model.knd = dtdy\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("cfg:1") && e.to_string().contains("model.knd"));
        assert!(RunConfig::parse("just words\n", "cfg").is_err());
        assert!(RunConfig::default().path("data.trials").is_err());
    }

    #[test]
    fn model_config_follows_keys() {
        let mut c = RunConfig::default();
        c.set("model.channels", "2,2,4,4").unwrap();
        c.set("model.blocks", "1,1,1,1").unwrap();
        c.set("model.hidden", "sum").unwrap();
        let m = c.model_config().unwrap();
        assert_eq!(m.stage_channels, [2, 2, 4, 4]);
        assert_eq!(m.hidden, HiddenWidth::PooledSum);
        c.set("model.blocks", "1,1").unwrap();
        assert!(matches!(c.model_config(), Err(Error::Config(_))));
    }

    #[test]
    fn every_default_parses() {
        let c = RunConfig::default();
        c.model_config().unwrap();
        c.schedule().unwrap();
        c.adam().unwrap();
        c.seed().unwrap();
    }
}
