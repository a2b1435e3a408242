use std::fs;
use std::io::Write;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gleu::{metric_tokens, GleuStats, DEFAULT_MAX_N};
use crate::error::{Error, Result};
use crate::model::{generate_with, Model, Strategy};
use crate::preprocess::{collate, Example, Tokenizer};
use crate::tensor::Scalar;
use crate::train::precision::ExecContext;

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub strategy: Strategy,
    /// Generation limit in tokens, BOS and EOS included.
    pub max_len: usize,
    pub batch_size: usize,
    pub max_n: usize,
    pub exec: ExecContext,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_len: 256,
            batch_size: 32,
            max_n: DEFAULT_MAX_N,
            exec: ExecContext::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
    pub gleu: f64,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Token-weighted mean teacher-forced loss.
    pub mean_loss: f64,
    pub gleu: f64,
    pub stats: GleuStats,
    pub records: Vec<EvalRecord>,
}

/// Teacher-forced loss plus decoding of every example, in input order.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    tokenizer: &Tokenizer,
    examples: &[Example],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    if model.config.decoder.vocab_size != tokenizer.vocab_size() {
        return Err(Error::CheckpointMismatch {
            field: "decoder.vocab_size".into(),
            message: format!(
                "model has {}, tokenizer has {}",
                model.config.decoder.vocab_size,
                tokenizer.vocab_size()
            ),
        });
    }
    let (mut loss_sum, mut count) = (0.0, 0usize);
    for chunk in examples.chunks(opts.batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = collate(&refs)?;
        let (_, loss) = model.forward(&batch, opts.exec)?;
        let n = batch.target_count();
        loss_sum += loss * n as f64;
        count += n;
    }

    let decode = |ex: &Example| -> Result<(EvalRecord, GleuStats)> {
        let seq = generate_with(model, &ex.image, opts.max_len, opts.strategy, tokenizer.special(), opts.exec)?;
        let hypothesis = tokenizer.detokenize(&seq.ids)?;
        let reference = tokenizer.detokenize(&ex.tokens.ids)?;
        let stats = GleuStats::from_pair(&metric_tokens(&hypothesis), &metric_tokens(&reference), opts.max_n)?;
        let rec = EvalRecord {
            id: ex.id.clone(),
            gleu: stats.score(),
            hypothesis,
            reference,
            truncated: seq.truncated,
        };
        Ok((rec, stats))
    };
    #[cfg(feature = "parallel")]
    let decoded: Vec<_> = examples.par_iter().map(decode).collect();
    #[cfg(not(feature = "parallel"))]
    let decoded: Vec<_> = examples.iter().map(decode).collect();

    let mut stats = GleuStats::default();
    let mut records = Vec::with_capacity(examples.len());
    for d in decoded {
        let (rec, s) = d?;
        stats.add(&s);
        records.push(rec);
    }
    Ok(EvalReport {
        mean_loss: if count == 0 { f64::NAN } else { loss_sum / count as f64 },
        gleu: stats.score(),
        stats,
        records,
    })
}

fn one_line(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// `id  gleu  truncated  hypothesis  reference`, tab separated, with header.
pub fn write_records_tsv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "id\tgleu\ttruncated\thypothesis\treference").unwrap();
    for r in records {
        writeln!(
            out,
            "{}\t{:.6}\t{}\t{}\t{}",
            r.id,
            r.gleu,
            r.truncated,
            one_line(&r.hypothesis),
            one_line(&r.reference)
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_setup;

    #[test]
    fn untrained_model_in_range_and_deterministic() {
        let (model, tok, ex) = toy_setup::<f32>(9, 3);
        let opts = EvalOptions {
            max_len: 10,
            ..EvalOptions::default()
        };
        let a = evaluate_model(&model, &tok, &ex, &opts).unwrap();
        let b = evaluate_model(&model, &tok, &ex, &opts).unwrap();
        assert!((0.0..=1.0).contains(&a.gleu));
        assert!(a.mean_loss.is_finite());
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["syn-000000", "syn-000001", "syn-000002"]);
        let dir = tempfile::tempdir().unwrap();
        write_records_tsv(&dir.path().join("r.tsv"), &a.records).unwrap();
        let text = fs::read_to_string(dir.path().join("r.tsv")).unwrap();
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn vocab_mismatch_names_field() {
        let (mut model, tok, ex) = toy_setup::<f32>(9, 1);
        model.config.decoder.vocab_size += 1;
        match evaluate_model(&model, &tok, &ex, &EvalOptions::default()) {
            Err(Error::CheckpointMismatch { field, .. }) => assert_eq!(field, "decoder.vocab_size"),
            other => panic!("{other:?}"),
        }
    }
}
