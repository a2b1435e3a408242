//! Low-rank adapters on named linear modules.
//!
//! A target `W` gains `A: [r, d_in]` and `B: [d_out, r]` stored next to it
//! (`{module}.lora_A.weight`, `{module}.lora_B.weight`); the module then
//! computes `W x + (alpha / r) · B A dropout(x)`. Targets are found by suffix
//! match on dotted module names.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{base_fingerprint, read_blob, write_blob};
use crate::model::{init_tensor, Adapter, InitKind, Layout, Model};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_ENCODER_PATTERNS: [&str; 4] = ["attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"];
pub const DEFAULT_DECODER_PATTERNS: [&str; 4] = ["c_attn", "c_proj", "c_fc", "attn.c_proj"];
pub const ADAPTER_FORMAT: &str = "im2latex-adapters/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target_patterns: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 16,
            alpha: 8.0,
            dropout: 0.2,
            target_patterns: DEFAULT_ENCODER_PATTERNS
                .iter()
                .chain(&DEFAULT_DECODER_PATTERNS)
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("lora: r must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("lora: dropout {} must be in [0, 1)", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("lora: alpha must be finite".into()));
        }
        if self.target_patterns.is_empty() {
            return Err(Error::Config("lora: target_patterns is empty".into()));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

/// Suffix match on whole name components.
pub fn matches(module: &str, pattern: &str) -> bool {
    module == pattern
        || (module.len() > pattern.len()
            && module.ends_with(pattern)
            && module.as_bytes()[module.len() - pattern.len() - 1] == b'.')
}

pub fn is_adapter_param(name: &str) -> bool {
    name.ends_with(".lora_A.weight") || name.ends_with(".lora_B.weight")
}

#[derive(Clone, Debug)]
pub struct AdaptedModel<T: Scalar> {
    pub model: Model<T>,
    pub config: LoraConfig,
    /// Adapted module names in registry order.
    pub targets: Vec<String>,
    /// Patterns that matched nothing.
    pub unmatched: Vec<String>,
}

/// Add one adapter's parameters. With `rng`, `A` is drawn from
/// `U(-1/√d_in, 1/√d_in)` and `B` is zero; without, storage is zero (or
/// absent for shape-only models) and is expected to be filled from a file.
pub(crate) fn attach<T: Scalar>(
    model: &mut Model<T>,
    module: &str,
    adapter: Adapter,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<()> {
    let lin = model
        .linear_modules()
        .iter()
        .find(|l| l.name == module)
        .cloned()
        .ok_or_else(|| Error::Config(format!("lora: `{module}` is not a linear module")))?;
    let r = adapter.rank;
    let a_shape = [r, lin.d_in];
    let b_shape = [lin.d_out, r];
    let meta = model.params.is_meta();
    let (a, b) = match (meta, rng) {
        (true, _) => (None, None),
        (false, Some(rng)) => (
            Some(init_tensor::<T>(&a_shape, InitKind::Uniform(1.0 / (lin.d_in as f64).sqrt()), rng)),
            Some(Tensor::zeros(&b_shape)),
        ),
        (false, None) => (Some(Tensor::zeros(&a_shape)), Some(Tensor::zeros(&b_shape))),
    };
    model.params.insert(format!("{module}.lora_A.weight"), &a_shape, a);
    model.params.insert(format!("{module}.lora_B.weight"), &b_shape, b);
    model.adapters.insert(module.to_string(), adapter);
    Ok(())
}

/// Freeze `model` and attach adapters to every linear module matching a
/// pattern. Patterns that match nothing are reported with a warning; if no
/// pattern matches anything the configuration is rejected.
pub fn inject<T: Scalar>(mut model: Model<T>, cfg: &LoraConfig, seed: u64) -> Result<AdaptedModel<T>> {
    cfg.validate()?;
    if !model.adapters.is_empty() {
        return Err(Error::Config("lora: model already carries adapters".into()));
    }
    let modules: Vec<String> = model.linear_modules().iter().map(|l| l.name.clone()).collect();
    let targets: Vec<String> = modules
        .iter()
        .filter(|m| cfg.target_patterns.iter().any(|p| matches(m, p)))
        .cloned()
        .collect();
    let unmatched: Vec<String> = cfg
        .target_patterns
        .iter()
        .filter(|p| !modules.iter().any(|m| matches(m, p)))
        .cloned()
        .collect();
    if targets.is_empty() {
        return Err(Error::Config(format!(
            "lora: no module matches any of {:?}",
            cfg.target_patterns
        )));
    }
    if !unmatched.is_empty() {
        log::warn!("lora: patterns matched no module: {}", unmatched.join(", "));
    }
    model.params.set_all_trainable(false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapter = Adapter {
        rank: cfg.r,
        scaling: cfg.scaling(),
        dropout: cfg.dropout,
    };
    for t in &targets {
        attach(&mut model, t, adapter.clone(), Some(&mut rng))?;
    }
    Ok(AdaptedModel {
        model,
        config: cfg.clone(),
        targets,
        unmatched,
    })
}

/// Number of adapter parameters, `Σ r·(d_in + d_out)`.
pub fn trainable_count<T: Scalar>(model: &Model<T>) -> usize {
    model
        .params
        .iter()
        .filter(|(n, _)| is_adapter_param(n))
        .map(|(_, p)| p.numel())
        .sum()
}

/// Fold every adapter into its base weight and drop it. A model without
/// adapters is returned unchanged.
pub fn merge_adapters<T: Scalar>(mut model: Model<T>) -> Result<Model<T>> {
    if model.adapters.is_empty() {
        return Ok(model);
    }
    if model.params.is_meta() {
        return Err(Error::Config("cannot merge adapters of a shape-only model".into()));
    }
    let adapters = std::mem::take(&mut model.adapters);
    for (module, ad) in &adapters {
        let lin = model
            .linear_modules()
            .iter()
            .find(|l| &l.name == module)
            .cloned()
            .expect("adapters only attach to linear modules");
        let a = model.params.remove(&format!("{module}.lora_A.weight")).expect("adapter A");
        let b = model.params.remove(&format!("{module}.lora_B.weight")).expect("adapter B");
        let (a, b) = (a.value.expect("stored"), b.value.expect("stored"));
        let (r, d_in, d_out) = (ad.rank, lin.d_in, lin.d_out);
        let w = model.params.tensor_mut(&format!("{module}.weight"))?;
        let wd = w.data_mut();
        for o in 0..d_out {
            for i in 0..d_in {
                let mut acc = 0.0f64;
                for k in 0..r {
                    acc += b.data()[o * r + k].as_f64() * a.data()[k * d_in + i].as_f64();
                }
                let idx = match lin.layout {
                    Layout::Linear => o * d_in + i,
                    Layout::Conv1D => i * d_out + o,
                };
                wd[idx] = T::from_f64(wd[idx].as_f64() + ad.scaling * acc);
            }
        }
    }
    model.params.set_all_trainable(true);
    Ok(model)
}

impl<T: Scalar> AdaptedModel<T> {
    pub fn trainable_count(&self) -> usize {
        trainable_count(&self.model)
    }

    pub fn merge(self) -> Result<Model<T>> {
        merge_adapters(self.model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterFile {
    format: String,
    base_fingerprint: String,
    lora: LoraConfig,
    adapters: IndexMap<String, Adapter>,
}

/// Write only the adapters, tagged with the fingerprint of the base they were
/// trained on.
pub fn save_adapters<T: Scalar>(dir: &Path, adapted: &AdaptedModel<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = AdapterFile {
        format: ADAPTER_FORMAT.into(),
        base_fingerprint: base_fingerprint(&adapted.model),
        lora: adapted.config.clone(),
        adapters: adapted.model.adapters.clone(),
    };
    let path = dir.join("adapter_config.json");
    fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
    let items: Vec<_> = adapted
        .model
        .params
        .iter()
        .filter(|(n, _)| is_adapter_param(n))
        .map(|(n, p)| {
            p.value
                .as_ref()
                .map(|v| (n, v, true))
                .ok_or_else(|| Error::Config("cannot save adapters of a shape-only model".into()))
        })
        .collect::<Result<_>>()?;
    write_blob(dir, "adapters", items)
}

/// Load adapters onto `base`, which must be the model they were trained on.
pub fn load_adapters<T: Scalar>(dir: &Path, mut base: Model<T>) -> Result<AdaptedModel<T>> {
    let path = dir.join("adapter_config.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: AdapterFile = serde_json::from_str(&text)?;
    if file.format != ADAPTER_FORMAT {
        return Err(Error::CheckpointMismatch {
            field: "format".into(),
            message: format!("`{}` is not `{ADAPTER_FORMAT}`", file.format),
        });
    }
    let actual = base_fingerprint(&base);
    if actual != file.base_fingerprint {
        return Err(Error::CheckpointMismatch {
            field: "base_fingerprint".into(),
            message: format!("adapters were trained on {}, base is {actual}", file.base_fingerprint),
        });
    }
    if !base.adapters.is_empty() {
        return Err(Error::Config("lora: base model already carries adapters".into()));
    }
    base.params.set_all_trainable(false);
    for (module, ad) in &file.adapters {
        attach(&mut base, module, ad.clone(), None)?;
    }
    let mut stored = read_blob::<T>(dir, "adapters")?;
    for module in file.adapters.keys() {
        for part in ["lora_A", "lora_B"] {
            let name = format!("{module}.{part}.weight");
            let p = stored.shift_remove(&name).ok_or_else(|| Error::CheckpointMismatch {
                field: name.clone(),
                message: "adapter tensor missing".into(),
            })?;
            let slot = base.params.get_mut(&name).expect("attached above");
            if slot.shape != p.shape {
                return Err(Error::CheckpointMismatch {
                    field: name,
                    message: format!("stored shape {:?}, expected {:?}", p.shape, slot.shape),
                });
            }
            slot.value = p.value;
            slot.trainable = true;
        }
    }
    let targets = file.adapters.keys().cloned().collect();
    Ok(AdaptedModel {
        model: base,
        config: file.lora,
        targets,
        unmatched: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Init, ModelConfig};

    #[test]
    fn suffix_matching_respects_components() {
        assert!(matches("decoder.transformer.h.0.attn.c_attn", "c_attn"));
        assert!(matches("decoder.transformer.h.0.attn.c_proj", "attn.c_proj"));
        assert!(!matches("decoder.transformer.h.0.crossattention.c_proj", "attn.c_proj"));
        assert!(!matches("x.q_attn", "attn"));
        assert!(matches("c_fc", "c_fc"));
    }

    #[test]
    fn single_target_adds_closed_form_count() {
        let model = build_model::<f32>(&ModelConfig::toy(), Init::Random(0)).unwrap();
        let cfg = LoraConfig {
            target_patterns: vec!["h.0.attn.c_proj".into()],
            ..LoraConfig::default()
        };
        let adapted = inject(model, &cfg, 1).unwrap();
        assert_eq!(adapted.targets, vec!["decoder.transformer.h.0.attn.c_proj"]);
        assert_eq!(adapted.trainable_count(), 16 * 64 + 64 * 16);
        assert_eq!(adapted.model.params.count(true), 2048);
    }

    #[test]
    fn nothing_matched_is_an_error() {
        let model = build_model::<f32>(&ModelConfig::toy(), Init::Meta).unwrap();
        let cfg = LoraConfig {
            target_patterns: vec!["no.such.module".into()],
            ..LoraConfig::default()
        };
        assert!(inject(model, &cfg, 0).is_err());
    }

    #[test]
    fn merge_right_after_inject_restores_base_weights() {
        let model = build_model::<f64>(&ModelConfig::toy(), Init::Random(5)).unwrap();
        let base = model.clone();
        let merged = inject(model, &LoraConfig::default(), 2).unwrap().merge().unwrap();
        assert_eq!(merged.params.len(), base.params.len());
        for ((n, a), (_, b)) in merged.params.iter().zip(base.params.iter()) {
            assert_eq!(a.value, b.value, "{n}");
        }
        let again = merge_adapters(merged.clone()).unwrap();
        assert_eq!(again.params.len(), merged.params.len());
    }

    #[test]
    fn adapters_round_trip_and_check_the_base() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model::<f32>(&ModelConfig::toy(), Init::Random(5)).unwrap();
        let base = model.clone();
        let mut adapted = inject(model, &LoraConfig::default(), 2).unwrap();
        adapted
            .model
            .params
            .tensor_mut("decoder.transformer.h.1.mlp.c_fc.lora_B.weight")
            .unwrap()
            .data_mut()[3] = 0.5;
        save_adapters(dir.path(), &adapted).unwrap();
        let loaded = load_adapters(dir.path(), base).unwrap();
        assert_eq!(loaded.targets, adapted.targets);
        for ((n, a), (_, b)) in loaded.model.params.iter().zip(adapted.model.params.iter()) {
            assert_eq!(a.value, b.value, "{n}");
            assert_eq!(a.trainable, b.trainable, "{n}");
        }
        let other = build_model::<f32>(&ModelConfig::toy(), Init::Random(6)).unwrap();
        assert!(matches!(
            load_adapters(dir.path(), other),
            Err(Error::CheckpointMismatch { .. })
        ));
    }
}
