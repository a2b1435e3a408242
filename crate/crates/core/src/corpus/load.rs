use std::fs;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::{clean_latex, filter_reason, CleaningReport, FilterLimits, FormulaRecord, PixelGrid, Source, SplitManifest};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.tsv";
pub const SPLITS_DIR: &str = "splits";

struct IndexLine {
    id: String,
    image_path: String,
    latex: String,
}

enum Outcome {
    Kept(FormulaRecord),
    Dropped(&'static str),
}

fn parse_index(text: &str, file: &str) -> Result<Vec<IndexLine>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(path), Some(latex)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                file: file.to_string(),
                line: n + 1,
                message: "expected `id<TAB>image_path<TAB>latex`".into(),
            });
        };
        if id.is_empty() || path.is_empty() {
            return Err(Error::Parse {
                file: file.to_string(),
                line: n + 1,
                message: "empty id or image path".into(),
            });
        }
        out.push(IndexLine {
            id: id.to_string(),
            image_path: path.to_string(),
            latex: latex.to_string(),
        });
    }
    Ok(out)
}

fn process(root: &Path, line: &IndexLine, profile: Source, limits: FilterLimits) -> Outcome {
    let path = root.join(&line.image_path);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(_) => return Outcome::Dropped("missing_image"),
    };
    let image = match image::load_from_memory(&bytes) {
        Ok(img) => PixelGrid::from_dynamic(img),
        Err(_) => return Outcome::Dropped("corrupt_image"),
    };
    if image.height == 0 || image.width == 0 {
        return Outcome::Dropped("corrupt_image");
    }
    let latex = match clean_latex(&line.latex) {
        Ok(l) => l,
        Err(r) => return Outcome::Dropped(r.rule()),
    };
    let record = FormulaRecord {
        id: line.id.clone(),
        image,
        latex,
        source: profile,
    };
    if profile == Source::Printed {
        if let Some(rule) = filter_reason(&record, limits.max_chars, limits.max_aspect) {
            return Outcome::Dropped(rule);
        }
    }
    Outcome::Kept(record)
}

pub fn load_corpus(path: &Path, profile: Source) -> Result<(Vec<FormulaRecord>, CleaningReport)> {
    load_corpus_with(path, profile, FilterLimits::default())
}

/// Load, clean and (printed profile only) filter a corpus directory.
///
/// Output order follows the index file. A directory without an index is an
/// empty corpus.
pub fn load_corpus_with(
    path: &Path,
    profile: Source,
    limits: FilterLimits,
) -> Result<(Vec<FormulaRecord>, CleaningReport)> {
    if !path.is_dir() {
        return Err(Error::Data(format!("corpus directory {} does not exist", path.display())));
    }
    let index_path = path.join(INDEX_FILE);
    if !index_path.exists() {
        return Ok((Vec::new(), CleaningReport::default()));
    }
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let lines = parse_index(&text, &index_path.display().to_string())?;

    #[cfg(feature = "parallel")]
    let outcomes: Vec<Outcome> = lines.par_iter().map(|l| process(path, l, profile, limits)).collect();
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Outcome> = lines.iter().map(|l| process(path, l, profile, limits)).collect();

    let mut report = CleaningReport {
        input_count: outcomes.len(),
        ..CleaningReport::default()
    };
    let mut records = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            Outcome::Kept(r) => records.push(r),
            Outcome::Dropped(rule) => report.drop(rule),
        }
    }
    report.kept = records.len();
    Ok((records, report))
}

/// Upstream split shipped with the corpus, if present.
pub fn read_provided_split(path: &Path) -> Result<Option<SplitManifest>> {
    let dir = path.join(SPLITS_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let read = |name: &str| -> Result<Vec<String>> {
        let p = dir.join(name);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    };
    Ok(Some(SplitManifest::provided(read("train.txt")?, read("val.txt")?, read("test.txt")?)))
}

/// Write records in the corpus layout (PNG images under `images/`).
pub fn write_corpus(path: &Path, records: &[FormulaRecord]) -> Result<()> {
    let images = path.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut index = String::new();
    for r in records {
        let rel = format!("images/{}.png", r.id);
        let dest = path.join(&rel);
        r.image
            .to_dynamic()
            .save_with_format(&dest, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("writing {}: {e}", dest.display())))?;
        index.push_str(&format!("{}\t{}\t{}\n", r.id, rel, r.latex));
    }
    let index_path = path.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_is_an_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let (records, report) = load_corpus(dir.path(), Source::Printed).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.input_count, 0);
    }

    #[test]
    fn malformed_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(INDEX_FILE), "a\timages/a.png\tx\n\nbroken line\n").unwrap();
        match load_corpus(dir.path(), Source::Printed) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn drops_are_counted_by_rule() {
        let dir = tempfile::tempdir().unwrap();
        let ok = FormulaRecord {
            id: "ok".into(),
            image: PixelGrid::filled(10, 40, 1, 200),
            latex: "x^{2}".into(),
            source: Source::Printed,
        };
        let long = FormulaRecord {
            id: "long".into(),
            latex: "y".repeat(300),
            ..ok.clone()
        };
        write_corpus(dir.path(), &[ok, long]).unwrap();
        let mut index = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        index.push_str("gone\timages/none.png\tz\n");
        fs::write(dir.path().join("images/bad.png"), b"not a png").unwrap();
        index.push_str("bad\timages/bad.png\tz\n");
        fs::write(dir.path().join(INDEX_FILE), index).unwrap();

        let (records, report) = load_corpus(dir.path(), Source::Printed).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].id, "ok");
        assert_eq!(report.dropped_by_rule["max_chars"], 1);
        assert_eq!(report.dropped_by_rule["missing_image"], 1);
        assert_eq!(report.dropped_by_rule["corrupt_image"], 1);
        assert!(report.reconciles());

        // the handwritten profile skips length/aspect filters
        let (records, _) = load_corpus(dir.path(), Source::Handwritten).unwrap();
        assert_eq!(records.len(), 2);
    }
}
