use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::clip::clip_gradients;
use super::compile::compile_hook;
use super::ddp::{ddp_step_contract, ReplicaGrads};
use super::optim::{AdamW, AdamWConfig};
use super::precision::{apply_precision_policy, ExecContext, LossScaler, Precision};
use super::schedule::{default_warmup, linear_warmup_lr};
use crate::autograd::{Grads, Graph};
use crate::corpus::seeded_permutation;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalOptions, EvalReport};
use crate::lora::LoraConfig;
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::model::{Model, Strategy};
use crate::preprocess::{collate, Example, Normalization, Tokenizer};
use crate::tensor::Scalar;

pub const STATE_FILE: &str = "train_state.json";
pub const OPTIMIZER_STEM: &str = "optimizer";
pub const HISTORY_CSV: &str = "history.csv";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Base,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Finetune => "finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Stage::Base),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(format!("unknown stage `{s}` (base|finetune)")),
        }
    }
}

/// `lr`, `epochs` and `eval_interval_steps` default per stage when unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Examples per replica per micro-step.
    pub batch_size: usize,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub eval_interval_steps: Option<usize>,
    /// Stop after this many optimizer steps instead of after `epochs`.
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    pub accum_steps: usize,
    /// Defaults to 5% of the optimizer steps.
    pub warmup_steps: Option<usize>,
    pub precision: Precision,
    pub world_size: usize,
    /// Falls back to the run-wide seed, then 0.
    pub seed: Option<u64>,
    /// Validation items used by each periodic evaluation.
    pub eval_cap: usize,
    pub eval_batch_size: usize,
    pub compile: bool,
    /// End the run early once a step's training loss falls below this.
    pub stop_loss: Option<f64>,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Base,
            batch_size: 32,
            lr: None,
            epochs: None,
            eval_interval_steps: None,
            max_steps: None,
            clip_norm: 1.0,
            accum_steps: 1,
            warmup_steps: None,
            precision: Precision::Highest,
            world_size: 1,
            seed: None,
            eval_cap: 512,
            eval_batch_size: 32,
            compile: false,
            stop_loss: None,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            ..Self::default()
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.stage {
            Stage::Base => 1e-4,
            Stage::Finetune => 2e-4,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.stage {
            Stage::Base => 10,
            Stage::Finetune => 40,
        })
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_interval_steps.unwrap_or(match self.stage {
            Stage::Base => 200,
            Stage::Finetune => 40,
        })
    }

    /// Examples consumed by one optimizer step across replicas and micro-steps.
    pub fn global_batch(&self) -> usize {
        self.batch_size * self.accum_steps * self.world_size
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.global_batch())
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.max_steps.unwrap_or(self.epochs() * self.steps_per_epoch(n_train))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn warmup(&self, total: usize) -> usize {
        self.warmup_steps.unwrap_or_else(|| default_warmup(total))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 || self.accum_steps == 0 || self.world_size == 0 {
            return bad("batch_size, accum_steps and world_size must be at least 1");
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs() == 0 || self.max_steps == Some(0) {
            return bad("epochs and max_steps must be at least 1");
        }
        if self.eval_interval() == 0 {
            return bad("eval_interval_steps must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Optimizer steps completed after this one.
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm_pre_clip: f64,
    /// Update skipped by the loss scaler after an overflow.
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub val_loss: f64,
    pub val_gleu: f64,
    /// Best validation loss seen up to and including this evaluation.
    pub best_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub step: usize,
    pub val_loss: f64,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub best: Option<BestCheckpoint>,
}

impl TrainHistory {
    /// One row per optimizer step; validation columns are filled on eval steps.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,train_loss,grad_norm_pre_clip,skipped,val_loss,val_gleu\n");
        let mut evals = self.evals.iter().peekable();
        for r in &self.steps {
            write!(
                s,
                "{},{:e},{:.6},{:.6},{}",
                r.step, r.lr, r.train_loss, r.grad_norm_pre_clip, r.skipped as u8
            )
            .unwrap();
            match evals.peek() {
                Some(e) if e.step == r.step => {
                    writeln!(s, ",{:.6},{:.6}", e.val_loss, e.val_gleu).unwrap();
                    evals.next();
                }
                _ => s.push_str(",,\n"),
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Everything besides weights that a saved checkpoint carries.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub tokenizer: Tokenizer,
    pub normalization: Normalization,
    pub max_len: usize,
    pub lora: Option<LoraConfig>,
    /// Where `best/`, `last/` and the history go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainState {
    step: usize,
    n_train: usize,
    optimizer_steps: u64,
    scaler: Option<LossScaler>,
    config: TrainConfig,
    history: TrainHistory,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive combination of seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |h, &p| splitmix(h ^ splitmix(p)))
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub history: TrainHistory,
    /// Optimizer steps taken so far.
    pub step: usize,
    n_train: usize,
    optimizer: AdamW<T>,
    scaler: Option<LossScaler>,
    exec: ExecContext,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, n_train: usize) -> Result<Self> {
        config.validate()?;
        if n_train == 0 {
            return Err(Error::Data("training split is empty".into()));
        }
        if model.params.is_meta() {
            return Err(Error::Config("cannot train a shape-only model".into()));
        }
        match (config.stage, model.adapters.is_empty()) {
            (Stage::Finetune, true) => {
                return Err(Error::Config("finetune stage needs a model with adapters injected".into()))
            }
            (Stage::Base, false) => return Err(Error::Config("base stage expects a model without adapters".into())),
            _ => {}
        }
        let setup = apply_precision_policy::<T>(config.precision);
        let model = if config.compile { compile_hook(model) } else { model };
        let n_params = model.params.len();
        Ok(Self {
            optimizer: AdamW::new(config.optimizer, n_params),
            scaler: setup.ctx.loss_scaling.then(LossScaler::default),
            exec: setup.ctx,
            model,
            config,
            history: TrainHistory::default(),
            step: 0,
            n_train,
        })
    }

    pub fn exec(&self) -> ExecContext {
        self.exec
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.n_train)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps();
        linear_warmup_lr(step, self.config.warmup(total), total, self.config.lr())
    }

    /// Training-set indices for optimizer step `step`: a slice of the epoch's
    /// seeded permutation; the last batch of an epoch wraps to the start.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let gb = self.config.global_batch();
        let spe = self.config.steps_per_epoch(self.n_train);
        let (epoch, j) = (step / spe, step % spe);
        let mut perm: Vec<usize> = (0..self.n_train).collect();
        seeded_permutation(&mut perm, mix_seed(&[self.config.seed(), epoch as u64]));
        (j * gb..(j + 1) * gb).map(|i| perm[i % self.n_train]).collect()
    }

    /// Summed micro-step gradients of one replica, with the loss seed
    /// `seed_scale / accum_steps`, and the mean micro-step loss.
    fn replica_grads(&self, train: &[Example], idx: &[usize], replica: usize, seed_scale: f64) -> Result<(Grads<T>, f64)> {
        let accum = self.config.accum_steps;
        let mut grads = Grads::empty(self.model.params.len());
        let mut loss_sum = 0.0;
        for (micro, chunk) in idx.chunks(self.config.batch_size).enumerate() {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = collate(&refs)?;
            let seed = mix_seed(&[self.config.seed(), self.step as u64, replica as u64, micro as u64]);
            let mut g = Graph::new(&self.model.params, self.exec).training(seed);
            let out = self.model.forward_graph(&mut g, &batch)?;
            loss_sum += g.value(out.loss).item().as_f64();
            grads.accumulate(&g.backward(out.loss, T::from_f64(seed_scale / accum as f64)));
        }
        Ok((grads, loss_sum / accum as f64))
    }

    /// Gradients averaged over replicas and unscaled, plus the mean loss.
    pub fn compute_grads(&self, train: &[Example]) -> Result<(Grads<T>, f64)> {
        let idx = self.batch_indices(self.step);
        let shard = self.config.batch_size * self.config.accum_steps;
        let scale = self.scaler.as_ref().map_or(1.0, |s| s.scale);
        let shards: Vec<(usize, &[usize])> = idx.chunks(shard).enumerate().collect();
        #[cfg(feature = "parallel")]
        let results: Vec<_> = shards.par_iter().map(|&(r, ix)| self.replica_grads(train, ix, r, scale)).collect();
        #[cfg(not(feature = "parallel"))]
        let results: Vec<_> = shards.iter().map(|&(r, ix)| self.replica_grads(train, ix, r, scale)).collect();
        let mut replicas = Vec::with_capacity(results.len());
        let mut loss = 0.0;
        for res in results {
            let (grads, l) = res?;
            loss += l;
            replicas.push(ReplicaGrads {
                grads,
                shard_size: shard,
            });
        }
        let mut grads = ddp_step_contract(replicas, self.config.world_size)?;
        if scale != 1.0 {
            grads.scale(T::from_f64(1.0 / scale));
        }
        Ok((grads, loss / self.config.world_size as f64))
    }

    /// One optimizer step.
    pub fn train_step(&mut self, train: &[Example]) -> Result<StepLog> {
        if train.len() != self.n_train {
            return Err(Error::Data(format!(
                "trainer was set up for {} training examples, got {}",
                self.n_train,
                train.len()
            )));
        }
        let lr = self.lr_at(self.step);
        let computed = self.compute_grads(train);
        let (mut grads, loss) = match (computed, self.scaler.is_some()) {
            (Ok(x), _) => x,
            // an overflowing scaled pass is skipped rather than fatal
            (Err(Error::NonFinite(_)), true) => (Grads::empty(0), f64::NAN),
            (Err(e), _) => return Err(e),
        };
        if let Some(scaler) = &mut self.scaler {
            let finite = loss.is_finite() && grads.is_finite();
            if !scaler.update(finite) {
                log::warn!("step {}: overflow, loss scale now {}", self.step + 1, scaler.scale);
                self.step += 1;
                let log = StepLog {
                    step: self.step,
                    lr,
                    train_loss: loss,
                    grad_norm_pre_clip: f64::NAN,
                    skipped: true,
                };
                self.history.steps.push(log.clone());
                return Ok(log);
            }
        }
        let norm = clip_gradients(&mut grads, self.config.clip_norm)
            .map_err(|e| Error::NonFinite(format!("step {}: {e}", self.step + 1)))?;
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        let log = StepLog {
            step: self.step,
            lr,
            train_loss: loss,
            grad_norm_pre_clip: norm,
            skipped: false,
        };
        self.history.steps.push(log.clone());
        Ok(log)
    }

    pub fn evaluate(&self, val: &[Example], art: &Artifacts) -> Result<EvalReport> {
        let n = val.len().min(self.config.eval_cap.max(1));
        let opts = EvalOptions {
            strategy: Strategy::Greedy,
            max_len: art.max_len,
            batch_size: self.config.eval_batch_size,
            exec: self.exec,
            ..EvalOptions::default()
        };
        evaluate_model(&self.model, &art.tokenizer, &val[..n], &opts)
    }

    fn periodic_eval(&mut self, val: &[Example], art: &Artifacts) -> Result<()> {
        if val.is_empty() || self.step % self.config.eval_interval() != 0 {
            return Ok(());
        }
        let report = self.evaluate(val, art)?;
        let improved = self.history.best.as_ref().is_none_or(|b| report.mean_loss < b.val_loss);
        if improved {
            let path = match &art.out_dir {
                Some(dir) => {
                    let p = dir.join("best");
                    self.save_checkpoint(&p, art)?;
                    Some(p)
                }
                None => None,
            };
            self.history.best = Some(BestCheckpoint {
                step: self.step,
                val_loss: report.mean_loss,
                path,
            });
        }
        let best = self.history.best.as_ref().map_or(report.mean_loss, |b| b.val_loss);
        log::info!(
            "step {}: val_loss {:.4} val_gleu {:.4}{}",
            self.step,
            report.mean_loss,
            report.gleu,
            if improved { " (best)" } else { "" }
        );
        self.history.evals.push(EvalLog {
            step: self.step,
            val_loss: report.mean_loss,
            val_gleu: report.gleu,
            best_val_loss: best,
        });
        Ok(())
    }

    /// Train until `stop` optimizer steps have been taken (or the planned total).
    pub fn run_until(&mut self, train: &[Example], val: &[Example], art: &Artifacts, stop: usize) -> Result<&TrainHistory> {
        let stop = stop.min(self.total_steps());
        while self.step < stop {
            let log = self.train_step(train).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{m}; last good checkpoint: {}",
                    self.history
                        .best
                        .as_ref()
                        .and_then(|b| b.path.as_ref())
                        .map_or("none".to_string(), |p| p.display().to_string())
                )),
                e => e,
            })?;
            if log.step % 10 == 0 || log.step == stop {
                log::info!("step {}/{}: loss {:.4} lr {:.3e}", log.step, stop, log.train_loss, log.lr);
            }
            self.periodic_eval(val, art)?;
            if self.config.stop_loss.is_some_and(|t| log.train_loss < t) {
                log::info!("step {}: loss {:.4} below stop_loss, stopping", log.step, log.train_loss);
                break;
            }
        }
        if let Some(dir) = &art.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.history.write_csv(&dir.join(HISTORY_CSV))?;
            let hpath = dir.join("history.json");
            fs::write(&hpath, serde_json::to_string_pretty(&self.history)?).map_err(|e| Error::io(&hpath, e))?;
            self.save_state(&dir.join("last"), art)?;
        }
        Ok(&self.history)
    }

    pub fn run(&mut self, train: &[Example], val: &[Example], art: &Artifacts) -> Result<&TrainHistory> {
        self.run_until(train, val, art, usize::MAX)
    }

    pub fn save_checkpoint(&self, dir: &Path, art: &Artifacts) -> Result<()> {
        save_checkpoint(dir, &self.model, &art.tokenizer, &art.normalization, art.max_len, art.lora.as_ref())
    }

    /// Checkpoint plus optimizer moments, loss scaler and history.
    pub fn save_state(&self, dir: &Path, art: &Artifacts) -> Result<()> {
        self.save_checkpoint(dir, art)?;
        self.optimizer.save(dir, OPTIMIZER_STEM, &self.model.params)?;
        let state = TrainState {
            step: self.step,
            n_train: self.n_train,
            optimizer_steps: self.optimizer.steps,
            scaler: self.scaler.clone(),
            config: self.config.clone(),
            history: self.history.clone(),
        };
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&path, e))
    }

    /// Continue from a directory written by [`Trainer::save_state`].
    pub fn resume(dir: &Path) -> Result<(Self, Checkpoint<T>)> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainState = serde_json::from_str(&text)?;
        let ckpt = load_checkpoint::<T>(dir)?;
        let mut trainer = Trainer::new(ckpt.model.clone(), state.config, state.n_train)?;
        trainer.optimizer = AdamW::load(
            trainer.config.optimizer,
            state.optimizer_steps,
            dir,
            OPTIMIZER_STEM,
            &trainer.model.params,
        )?;
        trainer.scaler = state.scaler;
        trainer.step = state.step;
        trainer.history = state.history;
        Ok((trainer, ckpt))
    }
}

#[cfg(test)]
pub(crate) fn same_len_examples(n: usize, tok: &Tokenizer, side: usize) -> Vec<Example> {
    use crate::corpus::{synthetic_image, FormulaRecord, Source};
    use crate::preprocess::prepare_example;
    (0..n)
        .map(|i| {
            let latex = format!("x_{{{i:03}}}+{}", (b'a' + (i % 26) as u8) as char);
            let rec = FormulaRecord {
                id: format!("eq-{i:03}"),
                image: synthetic_image(&latex, 20, 80),
                latex,
                source: Source::Printed,
            };
            prepare_example(&rec, tok, side, &Normalization::default(), 64).unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_setup;

    fn max_rel_diff<T: Scalar>(a: &Model<T>, b: &Model<T>) -> f64 {
        let mut worst = 0f64;
        for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
            let (p, q) = (p.value.as_ref().unwrap(), q.value.as_ref().unwrap());
            let scale = p.data().iter().fold(0f64, |m, x| m.max(x.as_f64().abs())).max(1e-12);
            worst = worst.max(p.max_abs_diff(q) / scale);
        }
        worst
    }

    fn cfg(batch: usize, accum: usize, world: usize) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            accum_steps: accum,
            world_size: world,
            lr: Some(1e-3),
            warmup_steps: Some(0),
            epochs: Some(1),
            eval_interval_steps: Some(1000),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_defaults_follow_stage() {
        let b = TrainConfig::for_stage(Stage::Base);
        assert_eq!((b.lr(), b.epochs(), b.eval_interval()), (1e-4, 10, 200));
        let f = TrainConfig::for_stage(Stage::Finetune);
        assert_eq!((f.lr(), f.epochs(), f.eval_interval()), (2e-4, 40, 40));
        assert_eq!(TrainConfig { world_size: 4, ..b.clone() }.global_batch(), 128);
        assert_eq!(b.total_steps(100), 40);
        assert_eq!(b.warmup(1000), 50);
        assert!(TrainConfig { accum_steps: 0, ..b.clone() }.validate().is_err());
        assert!(TrainConfig { eval_interval_steps: Some(0), ..b }.validate().is_err());
    }

    #[test]
    fn batches_wrap_and_cover_each_epoch() {
        let (model, _, _) = toy_setup::<f32>(0, 1);
        let t = Trainer::new(model, cfg(4, 1, 1), 10).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(s)).collect();
        assert_eq!(seen.len(), 12);
        seen.truncate(10);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(t.batch_indices(0), t.batch_indices(3));
    }

    #[test]
    fn accumulation_and_ddp_match_large_batch() {
        let (model, tok, _) = toy_setup::<f64>(5, 1);
        let data = same_len_examples(32, &tok, 56);
        let run = |c: TrainConfig| {
            let mut t = Trainer::new(model.clone(), c, data.len()).unwrap();
            t.train_step(&data).unwrap();
            t.model
        };
        let big = run(cfg(32, 1, 1));
        let accum = run(cfg(8, 4, 1));
        let ddp = run(cfg(16, 1, 2));
        assert!(max_rel_diff(&big, &model) > 1e-4);
        assert!(max_rel_diff(&big, &accum) <= 1e-5, "{}", max_rel_diff(&big, &accum));
        assert!(max_rel_diff(&big, &ddp) <= 1e-5, "{}", max_rel_diff(&big, &ddp));
    }

    #[test]
    fn eval_cadence_and_best_monotone() {
        let (model, tok, ex) = toy_setup::<f32>(6, 8);
        let c = TrainConfig {
            batch_size: 4,
            lr: Some(1e-3),
            epochs: Some(3),
            eval_interval_steps: Some(2),
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, c, 6).unwrap();
        let art = Artifacts {
            tokenizer: tok,
            normalization: Normalization::default(),
            max_len: 8,
            lora: None,
            out_dir: None,
        };
        let h = t.run(&ex[..6], &ex[6..], &art).unwrap().clone();
        assert_eq!(h.steps.len(), 6);
        assert_eq!(h.evals.iter().map(|e| e.step).collect::<Vec<_>>(), [2, 4, 6]);
        assert!(h.evals.windows(2).all(|w| w[1].best_val_loss <= w[0].best_val_loss));
        let csv = h.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(2).unwrap().split(',').nth(5).unwrap() != "");
        assert!(csv.lines().nth(1).unwrap().ends_with(",,"));
    }

    #[test]
    fn stage_must_match_adapters() {
        let (model, _, _) = toy_setup::<f32>(0, 1);
        assert!(Trainer::new(model.clone(), TrainConfig::for_stage(Stage::Finetune), 4).is_err());
        let adapted = crate::lora::inject(model, &LoraConfig::default(), 0).unwrap();
        assert!(Trainer::new(adapted.model, TrainConfig::for_stage(Stage::Base), 4).is_err());
    }
}
