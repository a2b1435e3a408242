use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::gleu::{metric_tokens, GleuStats, DEFAULT_MAX_N};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_name: String,
    pub gleu: f64,
    pub n_items: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// Sorted by GLEU, best first.
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn render_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.model_name.len()).max().unwrap_or(0).max("model".len());
        let mut s = String::new();
        writeln!(s, "{:<w$}  {:>6}  {:>8}", "model", "GLEU", "n_items").unwrap();
        writeln!(s, "{}  {}  {}", "-".repeat(w), "-".repeat(6), "-".repeat(8)).unwrap();
        for r in &self.rows {
            writeln!(s, "{:<w$}  {:>6.4}  {:>8}", r.model_name, r.gleu, r.n_items).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,gleu,n_items\n");
        for r in &self.rows {
            let name = if r.model_name.contains([',', '"']) {
                format!("\"{}\"", r.model_name.replace('"', "\"\""))
            } else {
                r.model_name.clone()
            };
            writeln!(s, "{name},{:.6},{}", r.gleu, r.n_items).unwrap();
        }
        s
    }
}

/// Parse `id<TAB>text` lines. Blank lines are skipped; the text may be empty.
pub fn read_predictions(path: &Path) -> Result<IndexMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = IndexMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message,
        };
        let (id, pred) = line.split_once('\t').ok_or_else(|| parse("expected `id<TAB>text`".into()))?;
        if out.insert(id.to_string(), pred.to_string()).is_some() {
            return Err(parse(format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}

/// Score each prediction file against the reference file, aligned by id.
pub fn benchmark_compare(predictions: &[(String, PathBuf)], reference: &Path) -> Result<Comparison> {
    let refs = read_predictions(reference)?;
    if refs.is_empty() {
        return Err(Error::Data(format!("{}: no reference items", reference.display())));
    }
    let mut rows = Vec::with_capacity(predictions.len());
    for (name, path) in predictions {
        let preds = read_predictions(path)?;
        let missing: Vec<String> = refs.keys().filter(|id| !preds.contains_key(*id)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::Misaligned {
                model: name.clone(),
                missing,
            });
        }
        if let Some(extra) = preds.keys().find(|id| !refs.contains_key(*id)) {
            return Err(Error::Data(format!("{name}: id `{extra}` is not in the reference file")));
        }
        let mut stats = GleuStats::default();
        for (id, r) in &refs {
            stats.add(&GleuStats::from_pair(&metric_tokens(&preds[id]), &metric_tokens(r), DEFAULT_MAX_N)?);
        }
        rows.push(ComparisonRow {
            model_name: name.clone(),
            gleu: stats.score(),
            n_items: refs.len(),
        });
    }
    rows.sort_by(|a, b| b.gleu.total_cmp(&a.gleu).then_with(|| a.model_name.cmp(&b.model_name)));
    Ok(Comparison { rows })
}
