//! Checkpoint directory layout (format `im2latex-checkpoint`, version 1):
//!
//! ```text
//! config.json        model config, preprocessing constants, adapters, vocabulary file name
//! params.json        manifest: dtype and per-tensor name / shape / offset / trainable
//! params.bin         little-endian tensor data in manifest order
//! vocab.txt          tokenizer vocabulary
//! train_state.json   optional, written by the trainer (with train_state.bin)
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_model, Adapter, Init, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::lora::{self, LoraConfig};
use crate::params::Param;
use crate::preprocess::{Normalization, Tokenizer};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_FORMAT: &str = "im2latex-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const BLOB_FORMAT: &str = "im2latex-blob/1";
pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobManifest {
    pub format: String,
    pub dtype: String,
    pub entries: Vec<BlobEntry>,
}

fn elem_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Data(format!("unsupported blob dtype `{other}`"))),
    }
}

fn encode_values<T: Scalar>(values: &[T], out: &mut Vec<u8>) {
    if T::NAME == "f32" {
        for v in values {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    } else {
        for v in values {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

/// Write named tensors as `{stem}.json` + `{stem}.bin` in `T`'s precision.
pub fn write_blob<'a, T: Scalar>(
    dir: &Path,
    stem: &str,
    items: impl IntoIterator<Item = (&'a str, &'a Tensor<T>, bool)>,
) -> Result<()> {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t, trainable) in items {
        entries.push(BlobEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            trainable,
        });
        offset += t.numel();
        encode_values(t.data(), &mut bytes);
    }
    let manifest = BlobManifest {
        format: BLOB_FORMAT.into(),
        dtype: T::NAME.into(),
        entries,
    };
    let mpath = dir.join(format!("{stem}.json"));
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(format!("{stem}.bin"));
    fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))
}

/// Read a blob written by [`write_blob`], converting to `T`.
pub fn read_blob<T: Scalar>(dir: &Path, stem: &str) -> Result<IndexMap<String, Param<T>>> {
    let mpath = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: BlobManifest = serde_json::from_str(&text)?;
    if manifest.format != BLOB_FORMAT {
        return Err(Error::CheckpointMismatch {
            field: "format".into(),
            message: format!("{} has format `{}`, expected `{BLOB_FORMAT}`", mpath.display(), manifest.format),
        });
    }
    let size = elem_size(&manifest.dtype)?;
    let bpath = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut out = IndexMap::new();
    for e in manifest.entries {
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset * size, (e.offset + n) * size);
        let raw = bytes.get(start..end).ok_or_else(|| {
            Error::Data(format!("{} is truncated at tensor `{}`", bpath.display(), e.name))
        })?;
        let data: Vec<T> = if size == 4 {
            raw.chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        let value = Tensor::from_vec(&e.shape, data)?;
        out.insert(
            e.name,
            Param {
                shape: e.shape,
                value: Some(value),
                trainable: e.trainable,
            },
        );
    }
    Ok(out)
}

pub fn load_params<T: Scalar>(dir: &Path) -> Result<IndexMap<String, Param<T>>> {
    read_blob(dir, "params")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub normalization: Normalization,
    pub max_len: usize,
    pub vocab_file: String,
    #[serde(default)]
    pub adapters: IndexMap<String, Adapter>,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub tokenizer: Tokenizer,
    pub normalization: Normalization,
    pub max_len: usize,
    pub lora: Option<LoraConfig>,
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    tokenizer: &Tokenizer,
    normalization: &Normalization,
    max_len: usize,
    lora: Option<&LoraConfig>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if model.params.is_meta() {
        return Err(Error::Config("cannot save a shape-only model".into()));
    }
    let cfg = CheckpointConfig {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        normalization: *normalization,
        max_len,
        vocab_file: VOCAB_FILE.into(),
        adapters: model.adapters.clone(),
        lora: lora.cloned(),
    };
    let cpath = dir.join(CONFIG_FILE);
    fs::write(&cpath, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(&cpath, e))?;
    let vpath = dir.join(VOCAB_FILE);
    fs::write(&vpath, tokenizer.to_text()).map_err(|e| Error::io(&vpath, e))?;
    write_blob(
        dir,
        "params",
        model
            .params
            .iter()
            .map(|(n, p)| (n, p.value.as_ref().expect("checked above"), p.trainable)),
    )
}

pub fn read_checkpoint_config(dir: &Path) -> Result<CheckpointConfig> {
    let cpath = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
    let cfg: CheckpointConfig = serde_json::from_str(&text)?;
    if cfg.format != CHECKPOINT_FORMAT {
        return Err(Error::CheckpointMismatch {
            field: "format".into(),
            message: format!("`{}` is not `{CHECKPOINT_FORMAT}`", cfg.format),
        });
    }
    if cfg.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointMismatch {
            field: "version".into(),
            message: format!("version {} is not supported (expected {CHECKPOINT_VERSION})", cfg.version),
        });
    }
    Ok(cfg)
}

/// Copy stored tensors into `model`, which must already have every named
/// parameter with a matching shape.
pub(crate) fn fill_params<T: Scalar>(model: &mut Model<T>, mut stored: IndexMap<String, Param<T>>) -> Result<()> {
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let p = stored.shift_remove(&name).ok_or_else(|| Error::CheckpointMismatch {
            field: name.clone(),
            message: "parameter missing from checkpoint".into(),
        })?;
        let slot = model.params.get_mut(&name).expect("listed above");
        if slot.shape != p.shape {
            return Err(Error::CheckpointMismatch {
                field: name,
                message: format!("stored shape {:?}, model expects {:?}", p.shape, slot.shape),
            });
        }
        slot.value = p.value;
        slot.trainable = p.trainable;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::CheckpointMismatch {
            field: extra.clone(),
            message: "checkpoint holds a parameter the model does not have".into(),
        });
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let cfg = read_checkpoint_config(dir)?;
    let vpath = dir.join(&cfg.vocab_file);
    let vtext = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
    let tokenizer = Tokenizer::from_text(&vtext)?;
    if tokenizer.vocab_size() != cfg.model.decoder.vocab_size {
        return Err(Error::CheckpointMismatch {
            field: "decoder.vocab_size".into(),
            message: format!(
                "config says {}, vocabulary file has {} tokens",
                cfg.model.decoder.vocab_size,
                tokenizer.vocab_size()
            ),
        });
    }
    let mut model = build_model::<T>(&cfg.model, Init::Meta)?;
    for (module, adapter) in &cfg.adapters {
        lora::attach(&mut model, module, adapter.clone(), None)?;
    }
    fill_params(&mut model, load_params(dir)?)?;
    Ok(Checkpoint {
        model,
        tokenizer,
        normalization: cfg.normalization,
        max_len: cfg.max_len,
        lora: cfg.lora,
    })
}

/// SHA-256 over the names, shapes and f64 values of all non-adapter
/// parameters; identifies a base model independent of storage precision.
pub fn base_fingerprint<T: Scalar>(model: &Model<T>) -> String {
    let mut h = Sha256::new();
    for (name, p) in model.params.iter() {
        if lora::is_adapter_param(name) {
            continue;
        }
        h.update(name.as_bytes());
        for d in &p.shape {
            h.update((*d as u64).to_le_bytes());
        }
        if let Some(v) = &p.value {
            for x in v.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::toy();
        let tok = Tokenizer::byte_level();
        cfg.decoder.vocab_size = tok.vocab_size();
        let mut model = build_model::<f64>(&cfg, Init::Random(3)).unwrap();
        model.params.get_mut("encoder.layernorm.bias").unwrap().trainable = false;
        save_checkpoint(dir.path(), &model, &tok, &Normalization::default(), 64, None).unwrap();
        let back = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(back.max_len, 64);
        assert_eq!(back.model.params.len(), model.params.len());
        for ((n1, p1), (n2, p2)) in model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.value, p2.value);
            assert_eq!(p1.trainable, p2.trainable);
        }
        assert_eq!(base_fingerprint(&model), base_fingerprint(&back.model));
    }

    #[test]
    fn vocabulary_mismatch_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model::<f32>(&ModelConfig::toy(), Init::Random(1)).unwrap();
        save_checkpoint(dir.path(), &model, &Tokenizer::byte_level(), &Normalization::default(), 64, None).unwrap();
        match load_checkpoint::<f32>(dir.path()) {
            Err(Error::CheckpointMismatch { field, .. }) => assert_eq!(field, "decoder.vocab_size"),
            other => panic!("expected mismatch, got {:?}", other.err()),
        }
    }

    #[test]
    fn f64_blob_loads_as_f32() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f64>::from_vec(&[2], vec![1.5, -0.25]).unwrap();
        write_blob(dir.path(), "x", [("a", &t, true)]).unwrap();
        let back = read_blob::<f32>(dir.path(), "x").unwrap();
        assert_eq!(back["a"].value.as_ref().unwrap().data(), &[1.5f32, -0.25]);
    }
}
