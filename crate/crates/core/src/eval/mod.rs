mod compare;
mod evaluate;
mod gleu;

pub use compare::{benchmark_compare, read_predictions, Comparison, ComparisonRow};
pub use evaluate::{evaluate_model, write_records_tsv, EvalOptions, EvalRecord, EvalReport};
pub use gleu::{gleu_corpus, gleu_sentence, metric_tokens, GleuStats, DEFAULT_MAX_N};
