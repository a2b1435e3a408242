//! The run configuration document: one TOML file with a section per stage of
//! the pipeline. Every field has a default, unknown keys are rejected, and
//! `section.key=value` overrides are applied before validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{FilterLimits, Source, DEFAULT_MAX_ASPECT, DEFAULT_MAX_CHARS};
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, DEFAULT_MAX_N};
use crate::lora::LoraConfig;
use crate::model::{ModelConfig, Strategy};
use crate::preprocess::Normalization;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus directory holding `index.tsv` and the images it names.
    pub corpus: Option<PathBuf>,
    pub profile: Source,
    /// Where `prepare-data` writes the split manifest and cleaning report.
    pub prepared: PathBuf,
    pub ratios: [f64; 3],
    pub split_seed: Option<u64>,
    pub max_chars: usize,
    pub max_aspect: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            profile: Source::Printed,
            prepared: PathBuf::from("prepared"),
            ratios: [0.8, 0.1, 0.1],
            split_seed: None,
            max_chars: DEFAULT_MAX_CHARS,
            max_aspect: DEFAULT_MAX_ASPECT,
        }
    }
}

impl DataConfig {
    pub fn limits(&self) -> FilterLimits {
        FilterLimits {
            max_chars: self.max_chars,
            max_aspect: self.max_aspect,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Token budget per formula, BOS and EOS included.
    pub max_len: usize,
    /// BPE merges learned from the training split; 0 keeps the byte-level vocabulary.
    pub bpe_merges: usize,
    /// GPT-2 `vocab.json` + `merges.txt` directory; overrides `bpe_merges`.
    pub gpt2_vocab: Option<PathBuf>,
    pub normalization: Normalization,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_len: 256,
            bpe_merges: 0,
            gpt2_vocab: None,
            normalization: Normalization::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Toy,
    FullScale,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    /// Encoder input side; the preset's value when unset.
    pub input_side: Option<usize>,
    /// Weights in checkpoint layout to start base training from.
    pub pretrained: Option<PathBuf>,
    pub init_seed: Option<u64>,
    pub compile: bool,
}

impl ModelSection {
    /// Architecture with the decoder vocabulary sized to the tokenizer.
    pub fn config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut cfg = match self.preset {
            Preset::Toy => ModelConfig::toy(),
            Preset::FullScale => ModelConfig::full_scale(),
        };
        if let Some(side) = self.input_side {
            cfg.encoder.input_side = side;
        }
        cfg.decoder.vocab_size = vocab_size;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target_patterns: Vec<String>,
    pub seed: Option<u64>,
    /// Base checkpoint the fine-tuning stage starts from.
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for LoraSection {
    fn default() -> Self {
        let a = LoraConfig::default();
        Self {
            r: a.r,
            alpha: a.alpha,
            dropout: a.dropout,
            target_patterns: a.target_patterns,
            seed: None,
            base_checkpoint: None,
        }
    }
}

impl LoraSection {
    pub fn adapter(&self) -> LoraConfig {
        LoraConfig {
            r: self.r,
            alpha: self.alpha,
            dropout: self.dropout,
            target_patterns: self.target_patterns.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub strategy: Strategy,
    pub max_len: usize,
    pub batch_size: usize,
    pub max_n: usize,
    /// `train`, `val` or `test`.
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_len: 256,
            batch_size: 32,
            max_n: DEFAULT_MAX_N,
            split: "test".into(),
        }
    }
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            strategy: self.strategy,
            max_len: self.max_len,
            batch_size: self.batch_size,
            max_n: self.max_n,
            ..EvalOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for every component whose own seed is unset.
    pub seed: u64,
    /// Run directory for checkpoints, history and evaluation outputs.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelSection,
    pub lora: LoraSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelSection::default(),
            lora: LoraSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse a document, apply `key=value` overrides (dotted keys), fill
    /// per-component seeds from the run seed and validate.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut table, k, parse_value(v))?;
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.fill_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    fn fill_seeds(&mut self) {
        let s = self.seed;
        self.data.split_seed.get_or_insert(s);
        self.model.init_seed.get_or_insert(s);
        self.lora.seed.get_or_insert(s);
        self.train.seed.get_or_insert(s);
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.data.ratios;
        if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.ratios {r:?} must be non-negative and sum to 1")));
        }
        if self.preprocess.max_len < 2 {
            return Err(Error::Config("preprocess.max_len must be at least 2".into()));
        }
        if !matches!(self.eval.split.as_str(), "train" | "val" | "test") {
            return Err(Error::Config(format!("eval.split `{}` (train|val|test)", self.eval.split)));
        }
        if self.eval.max_n == 0 || self.eval.batch_size == 0 || self.eval.max_len < 2 {
            return Err(Error::Config("eval: max_n and batch_size must be at least 1, max_len at least 2".into()));
        }
        self.lora.adapter().validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c.train.seed, Some(0));
        assert_eq!(c.data.ratios, [0.8, 0.1, 0.1]);
        assert_eq!(c.lora.adapter(), LoraConfig::default());
        assert_eq!(c.eval.strategy, Strategy::Greedy);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml("[train]\nlearning_rate = 1.0\n", &[]).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = RunConfig::from_toml("bogus = 1\n", &[]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn overrides_win_and_seeds_propagate() {
        let doc = "seed = 5\n[train]\nlr = 0.5\nseed = 9\n[eval]\nstrategy = \"beam:3\"\n";
        let c = RunConfig::from_toml(doc, &[("train.lr".into(), "0.25".into()), ("model.preset".into(), "full_scale".into())]).unwrap();
        assert_eq!(c.train.lr, Some(0.25));
        assert_eq!(c.train.seed, Some(9));
        assert_eq!(c.data.split_seed, Some(5));
        assert_eq!(c.model.preset, Preset::FullScale);
        assert_eq!(c.eval.strategy, Strategy::Beam(3));
        assert!(RunConfig::from_toml("", &[("lora.r".into(), "0".into())]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.fill_seeds();
        c.train.lr = Some(3e-4);
        c.data.corpus = Some("corpus".into());
        let back = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
