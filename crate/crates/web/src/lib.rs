//! wasm-bindgen exports for the static demo page in `www/`. Each export is a
//! thin wrapper over a plain function so the logic is testable natively.

use im2latex::eval::{metric_tokens, GleuStats};
use im2latex::lora::{inject, LoraConfig};
use im2latex::model::{build_model, count_parameters, Init, ModelConfig};
use im2latex::train::{default_warmup, linear_warmup_lr};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize, PartialEq)]
pub struct NgramRow {
    pub n: usize,
    pub matches: usize,
    pub hyp_ngrams: usize,
    pub ref_ngrams: usize,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct GleuReport {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
    pub rows: Vec<NgramRow>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Sentence GLEU of two whitespace-tokenized strings with a per-order breakdown.
pub fn gleu_report(hypothesis: &str, reference: &str, max_n: usize) -> Result<GleuReport, String> {
    let (h, r) = (metric_tokens(hypothesis), metric_tokens(reference));
    let total = GleuStats::from_pair(&h, &r, max_n).map_err(|e| e.to_string())?;
    let mut rows = Vec::with_capacity(max_n);
    let mut prev = GleuStats::default();
    for n in 1..=max_n {
        let upto = GleuStats::from_pair(&h, &r, n).map_err(|e| e.to_string())?;
        rows.push(NgramRow {
            n,
            matches: upto.match_count - prev.match_count,
            hyp_ngrams: upto.hyp_ngrams - prev.hyp_ngrams,
            ref_ngrams: upto.ref_ngrams - prev.ref_ngrams,
        });
        prev = upto;
    }
    Ok(GleuReport {
        score: total.score(),
        precision: ratio(total.match_count, total.hyp_ngrams),
        recall: ratio(total.match_count, total.ref_ngrams),
        rows,
    })
}

/// Learning rate at every optimizer step. `warmup = None` uses the default
/// fraction of `total`.
pub fn lr_schedule(total: usize, warmup: Option<usize>, base_lr: f64) -> Vec<f64> {
    let w = warmup.unwrap_or_else(|| default_warmup(total));
    (0..=total).map(|s| linear_warmup_lr(s, w, total, base_lr)).collect()
}

#[derive(Debug, Serialize, PartialEq)]
pub struct ParamReport {
    pub base: usize,
    pub trainable: usize,
    pub total: usize,
    pub trainable_percent: f64,
    pub targets: usize,
    pub unmatched: Vec<String>,
}

/// Parameter accounting for a preset with adapters on `patterns`
/// (comma or whitespace separated). Shapes only, no weights are allocated.
pub fn parameter_report(preset: &str, r: usize, patterns: &str) -> Result<ParamReport, String> {
    let cfg = match preset {
        "toy" => ModelConfig::toy(),
        "full_scale" => ModelConfig::full_scale(),
        other => return Err(format!("unknown preset `{other}` (toy|full_scale)")),
    };
    let model = build_model::<f32>(&cfg, Init::Meta).map_err(|e| e.to_string())?;
    let base = count_parameters(&model, false);
    let target_patterns: Vec<String> = patterns
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let lc = LoraConfig {
        r,
        target_patterns,
        ..LoraConfig::default()
    };
    let adapted = inject(model, &lc, 0).map_err(|e| e.to_string())?;
    let trainable = adapted.trainable_count();
    let total = count_parameters(&adapted.model, false);
    Ok(ParamReport {
        base,
        trainable,
        total,
        trainable_percent: 100.0 * trainable as f64 / total as f64,
        targets: adapted.targets.len(),
        unmatched: adapted.unmatched,
    })
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[wasm_bindgen]
pub fn gleu(hypothesis: &str, reference: &str, max_n: usize) -> Result<String, JsError> {
    gleu_report(hypothesis, reference, max_n).map(|r| json(&r)).map_err(|e| JsError::new(&e))
}

/// `warmup < 0` selects the default warmup.
#[wasm_bindgen]
pub fn lr_curve(total: usize, warmup: i32, base_lr: f64) -> Vec<f64> {
    lr_schedule(total, usize::try_from(warmup).ok(), base_lr)
}

#[wasm_bindgen]
pub fn default_patterns() -> String {
    LoraConfig::default().target_patterns.join(", ")
}

#[wasm_bindgen]
pub fn parameters(preset: &str, r: usize, patterns: &str) -> Result<String, JsError> {
    parameter_report(preset, r, patterns).map(|r| json(&r)).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gleu_rows_sum_to_the_total() {
        let r = gleu_report("a b c", "a b c d", 4).unwrap();
        assert_eq!(r.score, 0.6);
        assert_eq!(r.rows.iter().map(|x| x.matches).sum::<usize>(), 6);
        assert_eq!(r.rows[0], NgramRow { n: 1, matches: 3, hyp_ngrams: 3, ref_ngrams: 4 });
        assert_eq!(r.rows[3], NgramRow { n: 4, matches: 0, hyp_ngrams: 0, ref_ngrams: 1 });
        assert!(gleu_report("a", "a", 0).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let c = lr_schedule(300, Some(100), 2e-4);
        assert_eq!(c.len(), 301);
        assert_eq!((c[0], c[100], c[200], c[300]), (0.0, 2e-4, 1e-4, 0.0));
        assert_eq!(lr_schedule(100, None, 1.0)[5], 1.0);
    }

    #[test]
    fn full_scale_default_adapters() {
        let r = parameter_report("full_scale", 16, &default_patterns()).unwrap();
        assert_eq!((r.base, r.trainable, r.total), (240_337_080, 3_096_576, 243_433_656));
        assert_eq!(r.unmatched.len(), 4);
        assert!(parameter_report("huge", 16, "c_attn").is_err());
        assert!(parameter_report("toy", 16, "nothing").is_err());
    }
}
