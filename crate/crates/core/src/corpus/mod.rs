//! Formula corpora: on-disk layout, cleaning, filtering and splits.
//!
//! A corpus directory holds `index.tsv` (one `id<TAB>image_path<TAB>latex`
//! record per line, paths relative to the directory) and the PNG images it
//! references. A handwritten corpus may also carry its upstream split as
//! `splits/{train,val,test}.txt`, one id per line.

mod clean;
mod load;
mod split;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use clean::{braces_balanced, clean_latex, Rejection};
pub use load::{load_corpus, load_corpus_with, read_provided_split, write_corpus, INDEX_FILE, SPLITS_DIR};
pub use synthetic::{synthetic_corpus, synthetic_formula, synthetic_image};
pub use split::{seeded_permutation, split_dataset, SplitManifest, SHUFFLE_ALGORITHM, SPLIT_FORMAT};

pub const DEFAULT_MAX_CHARS: usize = 200;
pub const DEFAULT_MAX_ASPECT: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Printed,
    Handwritten,
}

impl std::str::FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "printed" => Ok(Source::Printed),
            "handwritten" => Ok(Source::Handwritten),
            other => Err(format!("unknown corpus profile `{other}` (printed|handwritten)")),
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Printed => "printed",
            Source::Handwritten => "handwritten",
        })
    }
}

/// 8-bit image, row-major, interleaved channels (1 = gray, 3 = RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> crate::Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(crate::Error::Data(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(crate::Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Height over width.
    pub fn aspect(&self) -> f64 {
        self.height as f64 / self.width as f64
    }

    pub fn from_dynamic(img: image::DynamicImage) -> Self {
        use image::ColorType;
        match img.color() {
            ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Self {
                    height: h as usize,
                    width: w as usize,
                    channels: 1,
                    data: g.into_raw(),
                }
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self {
                    height: h as usize,
                    width: w as usize,
                    channels: 3,
                    data: rgb.into_raw(),
                }
            }
        }
    }

    /// Decode an image file (any format the `image` crate was built with).
    pub fn open(path: &std::path::Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| crate::Error::Data(format!("{}: unreadable image: {e}", path.display())))?;
        Ok(Self::from_dynamic(img))
    }

    pub fn to_dynamic(&self) -> image::DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            image::DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, self.data.clone()).expect("sized"))
        } else {
            image::DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, self.data.clone()).expect("sized"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FormulaRecord {
    pub id: String,
    pub image: PixelGrid,
    pub latex: String,
    pub source: Source,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterLimits {
    pub max_chars: usize,
    pub max_aspect: f64,
}

impl Default for FilterLimits {
    fn default() -> Self {
        Self {
            max_chars: DEFAULT_MAX_CHARS,
            max_aspect: DEFAULT_MAX_ASPECT,
        }
    }
}

/// Which length/aspect rule, if any, drops this record. Both bounds are
/// inclusive: only lengths *exceeding* `max_chars` and ratios *greater
/// than* `max_aspect` are removed.
pub fn filter_reason(record: &FormulaRecord, max_chars: usize, max_aspect: f64) -> Option<&'static str> {
    if record.latex.chars().count() > max_chars {
        Some("max_chars")
    } else if record.image.aspect() > max_aspect {
        Some("max_aspect")
    } else {
        None
    }
}

pub fn filter_record(record: &FormulaRecord, max_chars: usize, max_aspect: f64) -> bool {
    filter_reason(record, max_chars, max_aspect).is_none()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input_count: usize,
    pub kept: usize,
    pub dropped_by_rule: BTreeMap<String, usize>,
}

impl CleaningReport {
    pub fn drop(&mut self, rule: &str) {
        *self.dropped_by_rule.entry(rule.to_string()).or_default() += 1;
    }

    pub fn dropped(&self) -> usize {
        self.dropped_by_rule.values().sum()
    }

    pub fn reconciles(&self) -> bool {
        self.kept + self.dropped() == self.input_count
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(latex_len: usize, h: usize, w: usize) -> FormulaRecord {
        FormulaRecord {
            id: "r".into(),
            image: PixelGrid::filled(h, w, 1, 255),
            latex: "x".repeat(latex_len),
            source: Source::Printed,
        }
    }

    #[test]
    fn filter_examples() {
        assert!(!filter_record(&record(201, 10, 100), 200, 0.8));
        assert!(filter_record(&record(200, 80, 100), 200, 0.8));
        assert!(!filter_record(&record(10, 90, 100), 200, 0.8));
        assert_eq!(filter_reason(&record(201, 90, 100), 200, 0.8), Some("max_chars"));
    }

    #[test]
    fn length_counts_characters_not_bytes() {
        let mut r = record(0, 1, 10);
        r.latex = "α".repeat(200);
        assert!(filter_record(&r, 200, 0.8));
    }
}
