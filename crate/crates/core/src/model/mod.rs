//! Swin-style window-attention encoder with a GPT-2 style decoder that
//! cross-attends to the final-stage token grid.
//!
//! Parameter names follow the Hugging Face `VisionEncoderDecoderModel` layout
//! for `SwinModel` + `GPT2LMHeadModel` (checkpoint-era names), so pretrained
//! weights converted from those checkpoints load by name.

pub mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod generate;

use std::path::PathBuf;
use std::rc::Rc;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::preprocess::Batch;
use crate::tensor::{Scalar, Tensor};
use crate::train::precision::ExecContext;

pub use config::{DecoderConfig, EncoderConfig, ModelConfig};
pub use encoder::EncoderPlan;
pub use generate::{generate, generate_with, Strategy};

/// Standard deviation of the normal initializer shared by both backbones.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Seeded random initialization.
    Random(u64),
    /// Shapes only; enough for parameter accounting, not for running.
    Meta,
    /// Weights from a checkpoint directory, matched by name.
    Pretrained(PathBuf),
}

/// How a linear map stores its weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `[out, in]` (torch `nn.Linear`)
    Linear,
    /// `[in, out]` (GPT-2 `Conv1D`)
    Conv1D,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearModule {
    pub name: String,
    pub layout: Layout,
    pub d_in: usize,
    pub d_out: usize,
}

/// Low-rank delta attached to one linear module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub rank: usize,
    pub scaling: f64,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum InitKind {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

#[derive(Default)]
pub(crate) struct Registry {
    pub specs: Vec<ParamSpec>,
    pub linears: Vec<LinearModule>,
}

impl Registry {
    pub fn add(&mut self, name: String, shape: &[usize], init: InitKind) {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    pub fn layer_norm(&mut self, module: &str, dim: usize) {
        self.add(format!("{module}.weight"), &[dim], InitKind::Ones);
        self.add(format!("{module}.bias"), &[dim], InitKind::Zeros);
    }

    pub fn linear(&mut self, module: &str, d_in: usize, d_out: usize, layout: Layout, bias: bool, std: f64) {
        let shape = match layout {
            Layout::Linear => [d_out, d_in],
            Layout::Conv1D => [d_in, d_out],
        };
        self.add(format!("{module}.weight"), &shape, InitKind::Normal(std));
        if bias {
            self.add(format!("{module}.bias"), &[d_out], InitKind::Zeros);
        }
        self.linears.push(LinearModule {
            name: module.to_string(),
            layout,
            d_in,
            d_out,
        });
    }
}

pub(crate) fn init_tensor<T: Scalar>(shape: &[usize], init: InitKind, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match init {
        InitKind::Zeros => vec![T::zero(); n],
        InitKind::Ones => vec![T::one(); n],
        InitKind::Normal(std) => {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| T::from_f64(d.sample(rng))).collect()
        }
        InitKind::Uniform(bound) => {
            let d = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| T::from_f64(d.sample(rng))).collect()
        }
    };
    Tensor::from_vec(shape, data).expect("spec shape")
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Adapters keyed by linear module name.
    pub adapters: IndexMap<String, Adapter>,
    linears: Vec<LinearModule>,
    plan: Option<Arc<EncoderPlan>>,
}

pub fn build_model<T: Scalar>(config: &ModelConfig, init: Init) -> Result<Model<T>> {
    config.validate()?;
    let mut reg = Registry::default();
    encoder::register(&config.encoder, &mut reg);
    if config.needs_projection() {
        reg.linear(
            "enc_to_dec_proj",
            config.encoder.output_dim(),
            config.decoder.d_model,
            Layout::Linear,
            true,
            INIT_STD,
        );
    }
    decoder::register(&config.decoder, &mut reg);

    let mut params = ParamStore::new();
    match &init {
        Init::Meta => {
            for s in &reg.specs {
                params.insert(s.name.clone(), &s.shape, None);
            }
        }
        Init::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for s in &reg.specs {
                params.insert(s.name.clone(), &s.shape, Some(init_tensor(&s.shape, s.init, &mut rng)));
            }
        }
        Init::Pretrained(dir) => {
            let mut loaded = checkpoint::load_params::<T>(dir)?;
            let mut missing = Vec::new();
            for s in &reg.specs {
                match loaded.shift_remove(&s.name) {
                    Some(p) if p.shape == s.shape => params.insert(s.name.clone(), &s.shape, p.value),
                    Some(p) => {
                        return Err(Error::CheckpointMismatch {
                            field: s.name.clone(),
                            message: format!("shape {:?}, expected {:?}", p.shape, s.shape),
                        })
                    }
                    None => missing.push(s.name.clone()),
                }
            }
            if !missing.is_empty() {
                return Err(Error::CheckpointMismatch {
                    field: missing[0].clone(),
                    message: format!("{} parameters missing from pretrained weights", missing.len()),
                });
            }
        }
    }
    Ok(Model {
        config: config.clone(),
        params,
        adapters: IndexMap::new(),
        linears: reg.linears,
        plan: None,
    })
}

pub fn count_parameters<T: Scalar>(model: &Model<T>, trainable_only: bool) -> usize {
    model.params.count(trainable_only)
}

/// Result of a teacher-forced pass recorded on a graph.
pub struct Forward {
    /// `[B·(T−1), V]`
    pub logits: Var,
    /// Mean cross-entropy over non-ignored positions.
    pub loss: Var,
}

impl<T: Scalar> Model<T> {
    pub fn linear_modules(&self) -> &[LinearModule] {
        &self.linears
    }

    pub fn is_compiled(&self) -> bool {
        self.plan.is_some()
    }

    pub(crate) fn set_plan(&mut self, plan: Option<Arc<EncoderPlan>>) {
        self.plan = plan;
    }

    pub(crate) fn plan(&self) -> Option<&Arc<EncoderPlan>> {
        self.plan.as_ref()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            adapters: self.adapters.clone(),
            linears: self.linears.clone(),
            plan: self.plan.clone(),
        }
    }

    /// `x [N, d_in] -> [N, d_out]`, including any attached adapter.
    pub(crate) fn linear(&self, g: &mut Graph<'_, T>, x: Var, module: &str, layout: Layout) -> Result<Var> {
        let w = g.param(&format!("{module}.weight"))?;
        let mut y = g.matmul(x, w, layout == Layout::Linear)?;
        let bias = format!("{module}.bias");
        if self.params.contains(&bias) {
            let b = g.param(&bias)?;
            y = g.add(y, b)?;
        }
        if let Some(ad) = self.adapters.get(module) {
            let xa = g.dropout(x, ad.dropout);
            let a = g.param(&format!("{module}.lora_A.weight"))?;
            let b = g.param(&format!("{module}.lora_B.weight"))?;
            let h = g.matmul(xa, a, true)?;
            let d = g.matmul(h, b, true)?;
            let d = g.scale(d, ad.scaling);
            y = g.add(y, d)?;
        }
        Ok(y)
    }

    pub(crate) fn layer_norm(&self, g: &mut Graph<'_, T>, x: Var, module: &str, eps: f64) -> Result<Var> {
        let w = g.param(&format!("{module}.weight"))?;
        let b = g.param(&format!("{module}.bias"))?;
        g.layer_norm(x, w, b, eps)
    }

    /// Visual tokens projected to the decoder width: `[B·L, d_model]`.
    pub fn encode(&self, g: &mut Graph<'_, T>, images: &Tensor<f32>) -> Result<Var> {
        let x = encoder::forward(self, g, images)?;
        if self.config.needs_projection() {
            self.linear(g, x, "enc_to_dec_proj", Layout::Linear)
        } else {
            Ok(x)
        }
    }

    /// Logits `[B·T, V]` for `ids` laid out as `[B, T]`.
    pub fn decode(&self, g: &mut Graph<'_, T>, enc: Var, batch: usize, ids: &[u32]) -> Result<Var> {
        decoder::forward(self, g, enc, batch, ids)
    }

    /// Teacher-forced forward pass with loss.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, batch: &Batch) -> Result<Forward> {
        if batch.width > self.config.decoder.max_positions + 1 {
            return Err(Error::Shape(format!(
                "sequence width {} exceeds max_positions {}",
                batch.width, self.config.decoder.max_positions
            )));
        }
        let enc = self.encode(g, &batch.images)?;
        let logits = self.decode(g, enc, batch.len(), &batch.decoder_inputs())?;
        let loss = g.cross_entropy(logits, Rc::from(batch.targets()))?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} on batch starting with `{}`",
                batch.ids.first().map(String::as_str).unwrap_or("")
            )));
        }
        Ok(Forward { logits, loss })
    }

    /// Eval-mode forward: logits `[B, T−1, V]` and the mean loss.
    pub fn forward(&self, batch: &Batch, exec: ExecContext) -> Result<(Tensor<T>, f64)> {
        let mut g = Graph::new(&self.params, exec);
        let out = self.forward_graph(&mut g, batch)?;
        let v = self.config.decoder.vocab_size;
        let logits = g.value(out.logits).clone().reshape(&[batch.len(), batch.width - 1, v])?;
        Ok((logits, g.value(out.loss).item().as_f64()))
    }
}
