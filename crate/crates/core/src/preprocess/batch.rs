use crate::corpus::FormulaRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{preprocess_image, ImageTensor, Normalization, TokenSequence, Tokenizer};

/// Target value that the loss skips.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub image: ImageTensor,
    pub tokens: TokenSequence,
}

pub fn prepare_example(
    record: &FormulaRecord,
    tokenizer: &Tokenizer,
    side: usize,
    norm: &Normalization,
    max_len: usize,
) -> Result<Example> {
    Ok(Example {
        id: record.id.clone(),
        image: preprocess_image(&record.image, side, norm)?,
        tokens: tokenizer.tokenize(&record.latex, max_len),
    })
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, 3, S, S]`
    pub images: Tensor<f32>,
    /// `[B, T]` row-major, right-padded with the pad id.
    pub labels: Vec<u32>,
    /// `labels` with padding replaced by [`IGNORE_INDEX`].
    pub loss_labels: Vec<i64>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Teacher-forcing inputs: each row without its last position, `[B, T-1]`.
    pub fn decoder_inputs(&self) -> Vec<u32> {
        self.labels
            .chunks(self.width)
            .flat_map(|row| row[..self.width - 1].iter().copied())
            .collect()
    }

    /// Next-token targets aligned with [`Batch::decoder_inputs`].
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.loss_labels
            .chunks(self.width)
            .flat_map(|row| row[1..].iter().map(|&t| (t != IGNORE_INDEX).then_some(t as usize)))
            .collect()
    }

    /// Number of positions that contribute to the loss.
    pub fn target_count(&self) -> usize {
        self.lengths.iter().map(|l| l - 1).sum()
    }
}

/// Stack examples, padding token rows to the longest sequence.
pub fn collate(examples: &[&Example]) -> Result<Batch> {
    let first = examples.first().ok_or_else(|| Error::Data("cannot collate an empty batch".into()))?;
    let side = first.image.side();
    let width = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    if width < 2 {
        return Err(Error::Data("token sequences must hold at least BOS and EOS".into()));
    }
    let pad = first.tokens.special.pad;
    let mut images = Vec::with_capacity(examples.len() * 3 * side * side);
    let mut labels = Vec::with_capacity(examples.len() * width);
    let mut loss_labels = Vec::with_capacity(examples.len() * width);
    for e in examples {
        if e.image.side() != side {
            return Err(Error::Shape(format!("example {} has side {} but batch side is {side}", e.id, e.image.side())));
        }
        images.extend_from_slice(e.image.data.data());
        let n = e.tokens.len();
        labels.extend(e.tokens.ids.iter().copied().chain(std::iter::repeat(pad).take(width - n)));
        loss_labels.extend(
            e.tokens
                .ids
                .iter()
                .map(|&t| t as i64)
                .chain(std::iter::repeat(IGNORE_INDEX).take(width - n)),
        );
    }
    Ok(Batch {
        ids: examples.iter().map(|e| e.id.clone()).collect(),
        images: Tensor::from_vec(&[examples.len(), 3, side, side], images)?,
        labels,
        loss_labels,
        lengths: examples.iter().map(|e| e.tokens.len()).collect(),
        width,
    })
}
