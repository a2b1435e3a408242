use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use im2latex::config::RunConfig;
use im2latex::corpus::{load_corpus_with, read_provided_split, split_dataset, FormulaRecord, PixelGrid, Source, SplitManifest};
use im2latex::eval::{benchmark_compare, evaluate_model, write_records_tsv, EvalReport};
use im2latex::lora::inject;
use im2latex::model::checkpoint::load_checkpoint;
use im2latex::model::{build_model, generate, Init, Strategy};
use im2latex::preprocess::{prepare_example, preprocess_image, Example, Tokenizer};
use im2latex::train::{Artifacts, Precision, Stage, Trainer};
use im2latex::{Error, Result};

pub const SPLIT_FILE: &str = "split.json";
pub const REPORT_FILE: &str = "cleaning_report.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "im2latex", version, about = "Train, fine-tune and evaluate image-to-LaTeX models")]
pub struct Cli {
    /// Only print warnings and errors [default: off]
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clean a corpus, split it and write the split manifest and cleaning report
    PrepareData(PrepareArgs),
    /// Train a model (base stage) or adapters (finetune stage)
    Train(TrainArgs),
    /// Same as `train --stage finetune`
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a split: loss, GLEU and per-item predictions
    Evaluate(EvaluateArgs),
    /// Print the LaTeX predicted for one image
    Infer(InferArgs),
    /// Rank prediction files against a reference file by corpus GLEU
    Compare(CompareArgs),
    /// Print the default run configuration document
    Config,
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Run configuration file (TOML) [default: none, built-in defaults]
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set train.lr=3e-4`; repeatable [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub set: Vec<(String, String)>,
    /// Run-wide seed for every component without its own [default: config `seed`, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<(String, String)>) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        overrides.extend(extra);
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn quoted(p: &Path) -> String {
    format!("{:?}", p.display().to_string())
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Corpus directory with `index.tsv` [default: config `data.corpus`]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Corpus profile, printed or handwritten [default: config `data.profile`, else printed]
    #[arg(long)]
    pub profile: Option<Source>,
    /// Output directory for the manifest and report [default: config `data.prepared`, else ./prepared]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Base checkpoint for the finetune stage [default: config `lora.base_checkpoint`]
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Run directory [default: config `out_dir`, else ./runs]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epochs [default: config, else 10 base / 40 finetune]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps [default: epochs × steps per epoch]
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Peak learning rate [default: config, else 1e-4 base / 2e-4 finetune]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Examples per replica per micro-step [default: config, else 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Micro-steps accumulated per optimizer step [default: config, else 1]
    #[arg(long)]
    pub accum_steps: Option<usize>,
    /// Simulated data-parallel replicas [default: config, else 1]
    #[arg(long)]
    pub world_size: Option<usize>,
    /// highest, high or mixed [default: config, else highest]
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Evaluate every N optimizer steps [default: config, else 200 base / 40 finetune]
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Precompute encoder plans and fuse q/k/v projections [default: off, or config `model.compile`]
    #[arg(long)]
    pub compile: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("lora.base_checkpoint", self.base.as_deref().map(quoted));
        put("out_dir", self.out.as_deref().map(quoted));
        put("train.epochs", self.epochs.map(|v| v.to_string()));
        put("train.max_steps", self.max_steps.map(|v| v.to_string()));
        put("train.lr", self.lr.map(|v| format!("{v:e}")));
        put("train.batch_size", self.batch_size.map(|v| v.to_string()));
        put("train.accum_steps", self.accum_steps.map(|v| v.to_string()));
        put("train.world_size", self.world_size.map(|v| v.to_string()));
        put("train.precision", self.precision.map(|p| format!("{:?}", format!("{p:?}").to_lowercase())));
        put("train.eval_interval_steps", self.eval_interval.map(|v| v.to_string()));
        if self.compile {
            put("model.compile", Some("true".into()));
        }
        o
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training stage: base or finetune
    #[arg(long, default_value_t = Stage::Base)]
    pub stage: Stage,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint directory (required)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val or test [default: config `eval.split`, else test]
    #[arg(long)]
    pub split: Option<String>,
    /// greedy or beam:K [default: config `eval.strategy`, else greedy]
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Generation limit in tokens [default: config `eval.max_len`, else 256]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Directory for predictions and per-item records [default: <out_dir>/eval]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint directory (required)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file (required)
    #[arg(long)]
    pub image: PathBuf,
    /// greedy or beam:K
    #[arg(long, default_value_t = Strategy::Greedy)]
    pub strategy: Strategy,
    /// Generation limit in tokens [default: the checkpoint's training max_len]
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Reference file, one `id<TAB>latex` per line (required)
    #[arg(long)]
    pub reference: PathBuf,
    /// Prediction file as NAME=PATH, one `id<TAB>prediction` per line; repeatable (required)
    #[arg(long = "pred", value_name = "NAME=PATH", value_parser = parse_kv, required = true)]
    pub predictions: Vec<(String, String)>,
    /// Also write the table as CSV here [default: none]
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareData(a) => {
            let mut extra = Vec::new();
            if let Some(c) = &a.corpus {
                extra.push(("data.corpus".into(), quoted(c)));
            }
            if let Some(p) = a.profile {
                extra.push(("data.profile".into(), format!("\"{p}\"")));
            }
            if let Some(o) = &a.out {
                extra.push(("data.prepared".into(), quoted(o)));
            }
            let cfg = a.config.load(extra)?;
            let (manifest, report) = prepare_data(&cfg)?;
            let (tr, va, te) = manifest.counts();
            println!("kept {} of {} records ({} dropped)", report.kept, report.input_count, report.dropped());
            for (rule, n) in &report.dropped_by_rule {
                println!("  {rule}: {n}");
            }
            println!("split {tr}/{va}/{te}");
            println!("wrote {}", cfg.data.prepared.display());
            Ok(())
        }
        Command::Train(a) => train_command(a.stage, &a.flags),
        Command::Finetune(a) => train_command(Stage::Finetune, &a.flags),
        Command::Evaluate(a) => {
            let mut extra = Vec::new();
            if let Some(s) = &a.split {
                extra.push(("eval.split".into(), format!("{s:?}")));
            }
            if let Some(s) = a.strategy {
                extra.push(("eval.strategy".into(), format!("\"{s}\"")));
            }
            if let Some(n) = a.max_len {
                extra.push(("eval.max_len".into(), n.to_string()));
            }
            let cfg = a.config.load(extra)?;
            let out = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("eval"));
            let report = evaluate_command(&cfg, &a.checkpoint, &out)?;
            println!(
                "{} items: loss {:.4}, GLEU {:.4}",
                report.records.len(),
                report.mean_loss,
                report.gleu
            );
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Infer(a) => {
            println!("{}", infer(&a.checkpoint, &a.image, a.strategy, a.max_len)?);
            Ok(())
        }
        Command::Compare(a) => {
            let preds: Vec<(String, PathBuf)> = a.predictions.iter().map(|(n, p)| (n.clone(), PathBuf::from(p))).collect();
            let cmp = benchmark_compare(&preds, &a.reference)?;
            print!("{}", cmp.render_table());
            if let Some(path) = &a.csv {
                fs::write(path, cmp.to_csv()).map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        }
        Command::Config => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    }
}

/// Clean the corpus, then use its shipped split (restricted to kept records)
/// or draw a seeded one. Writes the manifest and the cleaning report.
pub fn prepare_data(cfg: &RunConfig) -> Result<(SplitManifest, im2latex::corpus::CleaningReport)> {
    let corpus = cfg
        .data
        .corpus
        .as_deref()
        .ok_or_else(|| Error::Config("no corpus given (--corpus or data.corpus)".into()))?;
    let (records, report) = load_corpus_with(corpus, cfg.data.profile, cfg.data.limits())?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let manifest = match read_provided_split(corpus)? {
        Some(m) => {
            let kept: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
            let keep = |v: Vec<String>| v.into_iter().filter(|i| kept.contains(i.as_str())).collect();
            SplitManifest::provided(keep(m.train_ids), keep(m.val_ids), keep(m.test_ids))
        }
        None => split_dataset(&ids, cfg.data.ratios, cfg.data.split_seed.unwrap_or(cfg.seed))?,
    };
    let out = &cfg.data.prepared;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mpath = out.join(SPLIT_FILE);
    fs::write(&mpath, manifest.to_json()).map_err(|e| Error::io(&mpath, e))?;
    let rpath = out.join(REPORT_FILE);
    fs::write(&rpath, report.to_json()).map_err(|e| Error::io(&rpath, e))?;
    Ok((manifest, report))
}

/// Records named by the prepared manifest, grouped as train/val/test.
pub fn load_splits(cfg: &RunConfig) -> Result<[Vec<FormulaRecord>; 3]> {
    let corpus = cfg
        .data
        .corpus
        .as_deref()
        .ok_or_else(|| Error::Config("no corpus given (data.corpus)".into()))?;
    let mpath = cfg.data.prepared.join(SPLIT_FILE);
    if !mpath.exists() {
        return Err(Error::Data(format!(
            "split manifest {} not found; run prepare-data first",
            mpath.display()
        )));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = SplitManifest::from_json(&text)?;
    let (records, _) = load_corpus_with(corpus, cfg.data.profile, cfg.data.limits())?;
    let by_id: HashMap<&str, &FormulaRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let pick = |ids: &[String]| -> Result<Vec<FormulaRecord>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::Data(format!("manifest id `{id}` is not in the cleaned corpus")))
            })
            .collect()
    };
    Ok([pick(&manifest.train_ids)?, pick(&manifest.val_ids)?, pick(&manifest.test_ids)?])
}

fn examples(records: &[FormulaRecord], tok: &Tokenizer, side: usize, ck: &RunConfig, max_len: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| prepare_example(r, tok, side, &ck.preprocess.normalization, max_len))
        .collect()
}

fn base_tokenizer(cfg: &RunConfig, train: &[FormulaRecord]) -> Result<Tokenizer> {
    if let Some(dir) = &cfg.preprocess.gpt2_vocab {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        return Tokenizer::from_gpt2(&read("vocab.json")?, &read("merges.txt")?);
    }
    if cfg.preprocess.bpe_merges > 0 {
        let texts: Vec<&str> = train.iter().map(|r| r.latex.as_str()).collect();
        return Ok(Tokenizer::train(&texts, cfg.preprocess.bpe_merges));
    }
    Ok(Tokenizer::byte_level())
}

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub final_train_loss: f64,
    pub best: Option<(usize, f64)>,
    pub final_eval: Option<EvalReport>,
}

pub fn train_stage(cfg: &RunConfig, stage: Stage) -> Result<TrainOutcome> {
    let [train_recs, val_recs, _] = load_splits(cfg)?;
    if train_recs.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut tcfg = cfg.train.clone();
    tcfg.stage = stage;
    tcfg.compile |= cfg.model.compile;

    let (model, tokenizer, lora, normalization) = match stage {
        Stage::Base => {
            let tok = base_tokenizer(cfg, &train_recs)?;
            let mcfg = cfg.model.config(tok.vocab_size())?;
            let init = match &cfg.model.pretrained {
                Some(p) => Init::Pretrained(p.clone()),
                None => Init::Random(cfg.model.init_seed.unwrap_or(cfg.seed)),
            };
            (build_model::<f32>(&mcfg, init)?, tok, None, cfg.preprocess.normalization)
        }
        Stage::Finetune => {
            let base = cfg
                .lora
                .base_checkpoint
                .as_deref()
                .ok_or_else(|| Error::Data("base checkpoint required (--base or lora.base_checkpoint)".into()))?;
            if !base.join(im2latex::model::checkpoint::CONFIG_FILE).exists() {
                return Err(Error::Data(format!("base checkpoint required: {} is not a checkpoint", base.display())));
            }
            let ck = load_checkpoint::<f32>(base)?;
            let adapter = cfg.lora.adapter();
            let adapted = inject(ck.model, &adapter, cfg.lora.seed.unwrap_or(cfg.seed))?;
            log::info!(
                "adapters on {} modules, {} trainable parameters",
                adapted.targets.len(),
                adapted.trainable_count()
            );
            (adapted.model, ck.tokenizer, Some(adapter), ck.normalization)
        }
    };
    let side = model.config.encoder.input_side;
    let max_len = cfg.preprocess.max_len.min(model.config.decoder.max_positions + 1);
    let mut ncfg = cfg.clone();
    ncfg.preprocess.normalization = normalization;
    let train = examples(&train_recs, &tokenizer, side, &ncfg, max_len)?;
    let val = examples(&val_recs, &tokenizer, side, &ncfg, max_len)?;

    let out_dir = cfg.out_dir.join(stage.to_string());
    let art = Artifacts {
        tokenizer,
        normalization,
        max_len,
        lora,
        out_dir: Some(out_dir.clone()),
    };
    let mut trainer = Trainer::new(model, tcfg, train.len())?;
    log::info!(
        "{stage} stage: {} train / {} val examples, {} optimizer steps",
        train.len(),
        val.len(),
        trainer.total_steps()
    );
    trainer.run(&train, &val, &art)?;
    let final_eval = if val.is_empty() { None } else { Some(trainer.evaluate(&val, &art)?) };
    Ok(TrainOutcome {
        out_dir,
        steps: trainer.step,
        final_train_loss: trainer.history.steps.last().map_or(f64::NAN, |s| s.train_loss),
        best: trainer.history.best.as_ref().map(|b| (b.step, b.val_loss)),
        final_eval,
    })
}

fn train_command(stage: Stage, flags: &TrainFlags) -> Result<()> {
    let cfg = flags.config.load(flags.overrides())?;
    let o = train_stage(&cfg, stage)?;
    println!("{} steps, final train loss {:.4}", o.steps, o.final_train_loss);
    match o.best {
        Some((step, loss)) => println!("best val loss {loss:.4} at step {step}"),
        None => println!("best val loss n/a (no evaluation ran)"),
    }
    if let Some(r) = &o.final_eval {
        println!("final val GLEU {:.4} on {} items", r.gleu, r.records.len());
    }
    println!("wrote {}", o.out_dir.display());
    Ok(())
}

/// Evaluate a checkpoint on the configured split and write
/// `<split>_predictions.tsv` (`id<TAB>prediction`) and `<split>_records.tsv`.
pub fn evaluate_command(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let [train, val, test] = load_splits(cfg)?;
    let recs = match cfg.eval.split.as_str() {
        "train" => train,
        "val" => val,
        _ => test,
    };
    let side = ck.model.config.encoder.input_side;
    let ex: Vec<Example> = recs
        .iter()
        .map(|r| prepare_example(r, &ck.tokenizer, side, &ck.normalization, ck.max_len))
        .collect::<Result<_>>()?;
    let report = evaluate_model(&ck.model, &ck.tokenizer, &ex, &cfg.eval.options())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let split = &cfg.eval.split;
    let preds: String = report
        .records
        .iter()
        .map(|r| format!("{}\t{}\n", r.id, r.hypothesis.replace(['\t', '\n'], " ")))
        .collect();
    let ppath = out.join(format!("{split}_predictions.tsv"));
    fs::write(&ppath, preds).map_err(|e| Error::io(&ppath, e))?;
    write_records_tsv(&out.join(format!("{split}_records.tsv")), &report.records)?;
    Ok(report)
}

pub fn infer(checkpoint: &Path, image: &Path, strategy: Strategy, max_len: Option<usize>) -> Result<String> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let pixels = PixelGrid::open(image)?;
    let tensor = preprocess_image(&pixels, ck.model.config.encoder.input_side, &ck.normalization)?;
    let seq = generate(&ck.model, &tensor, max_len.unwrap_or(ck.max_len), strategy, ck.tokenizer.special())?;
    ck.tokenizer.detokenize(&seq.ids)
}
