//! Deterministic synthetic formula pairs for tests and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FormulaRecord, PixelGrid, Source};

/// A stand-in rendering: one dark glyph box per byte, its vertical extent and
/// stroke pattern derived from the byte value, on a white background.
pub fn synthetic_image(latex: &str, height: usize, width: usize) -> PixelGrid {
    let mut grid = PixelGrid::filled(height, width, 1, 255);
    let bytes = latex.as_bytes();
    if bytes.is_empty() {
        return grid;
    }
    let cell = (width / bytes.len()).max(1);
    for (i, &b) in bytes.iter().enumerate() {
        let x0 = i * cell;
        if x0 >= width {
            break;
        }
        let top = (b as usize * 7) % (height / 2).max(1);
        let bottom = height - (b as usize * 3) % (height / 3).max(1);
        for y in top..bottom.max(top + 1).min(height) {
            for x in x0..(x0 + cell.saturating_sub(1).max(1)).min(width) {
                if (x + y + b as usize) % 3 != 0 {
                    grid.data[y * width + x] = (b as usize * 13 % 128) as u8;
                }
            }
        }
    }
    grid
}

const ATOMS: [&str; 12] = ["x", "y", "a", "b", "n", "2", "3", "\\alpha", "\\beta", "\\pi", "i", "k"];
const OPS: [&str; 4] = ["+", "-", "=", "\\cdot"];

fn term(rng: &mut ChaCha8Rng) -> String {
    let a = *ATOMS.choose(rng).unwrap();
    let b = *ATOMS.choose(rng).unwrap();
    match rng.gen_range(0..5) {
        0 => format!("{a}^{{{b}}}"),
        1 => format!("{a}_{{{b}}}"),
        2 => format!("\\frac{{{a}}}{{{b}}}"),
        3 => format!("\\sqrt{{{a}}}"),
        _ => a.to_string(),
    }
}

/// A short random formula.
pub fn synthetic_formula(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=3);
    let mut s = term(rng);
    for _ in 1..n {
        s.push(' ');
        s.push_str(OPS.choose(rng).unwrap());
        s.push(' ');
        s.push_str(&term(rng));
    }
    s
}

/// `n` distinct printed records with ids `syn-000000`, … and wide images.
pub fn synthetic_corpus(n: usize, seed: u64, height: usize, width: usize) -> Vec<FormulaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut latex = synthetic_formula(&mut rng);
        if !seen.insert(latex.clone()) {
            latex = format!("{latex} + {}", out.len());
            if !seen.insert(latex.clone()) {
                continue;
            }
        }
        out.push(FormulaRecord {
            id: format!("syn-{:06}", out.len()),
            image: synthetic_image(&latex, height, width),
            latex,
            source: Source::Printed,
        });
    }
    out
}
