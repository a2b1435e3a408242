use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::preprocess::{ImageTensor, SpecialIds, TokenSequence};
use crate::tensor::{Scalar, Tensor};
use crate::train::precision::ExecContext;

/// Length-normalization exponent for beam search, `((5 + len) / 6)^α`.
pub const LENGTH_ALPHA: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Greedy => write!(f, "greedy"),
            Strategy::Beam(k) => write!(f, "beam:{k}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;
    /// `greedy`, `beam:K` or `beam(K)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "greedy" {
            return Ok(Strategy::Greedy);
        }
        let k = s
            .strip_prefix("beam:")
            .or_else(|| s.strip_prefix("beam(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| format!("unknown strategy `{s}` (greedy | beam:K)"))?;
        match k.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Strategy::Beam(k)),
            _ => Err(format!("beam width `{k}` must be a positive integer")),
        }
    }
}

impl TryFrom<String> for Strategy {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

fn length_penalty(generated: usize) -> f64 {
    ((5.0 + generated as f64) / 6.0).powf(LENGTH_ALPHA)
}

struct Decoder<'m, T: Scalar> {
    model: &'m Model<T>,
    exec: ExecContext,
    enc: Tensor<T>,
}

impl<T: Scalar> Decoder<'_, T> {
    /// Log-probabilities of the next token after each prefix (all of equal length).
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let k = prefixes.len();
        let t = prefixes[0].len();
        let (l, d) = (self.enc.dim(0), self.enc.dim(1));
        let mut enc = Vec::with_capacity(k * l * d);
        for _ in 0..k {
            enc.extend_from_slice(self.enc.data());
        }
        let mut g = Graph::new(&self.model.params, self.exec);
        let enc = g.constant(Tensor::from_vec(&[k * l, d], enc)?);
        let ids: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let logits = self.model.decode(&mut g, enc, k, &ids)?;
        let v = g.value(logits).last_dim();
        let data = g.value(logits).data();
        Ok((0..k)
            .map(|i| {
                let row = &data[((i + 1) * t - 1) * v..(i + 1) * t * v];
                let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter().map(|x| x - lse).collect()
            })
            .collect())
    }
}

pub fn generate<T: Scalar>(
    model: &Model<T>,
    image: &ImageTensor,
    max_len: usize,
    strategy: Strategy,
    special: SpecialIds,
) -> Result<TokenSequence> {
    generate_with(model, image, max_len, strategy, special, ExecContext::default())
}

/// Autoregressive decoding from BOS. The result holds at most `max_len` ids
/// including BOS and EOS; a hypothesis that reaches the limit is closed with
/// EOS and flagged as truncated.
pub fn generate_with<T: Scalar>(
    model: &Model<T>,
    image: &ImageTensor,
    max_len: usize,
    strategy: Strategy,
    special: SpecialIds,
    exec: ExecContext,
) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} leaves no room for BOS and EOS")));
    }
    let max_len = max_len.min(model.config.decoder.max_positions + 1);
    let side = image.side();
    let images = image.data.clone().reshape(&[1, 3, side, side])?;
    let enc = {
        let mut g = Graph::new(&model.params, exec);
        let e = model.encode(&mut g, &images)?;
        g.value(e).clone()
    };
    let dec = Decoder { model, exec, enc };
    let finish = |ids: Vec<u32>, truncated: bool| TokenSequence {
        ids,
        special,
        truncated,
    };

    match strategy {
        Strategy::Greedy => {
            let mut seq = vec![special.bos];
            loop {
                if seq.len() == max_len - 1 {
                    seq.push(special.eos);
                    return Ok(finish(seq, true));
                }
                let lp = dec.next_log_probs(std::slice::from_ref(&seq))?.remove(0);
                let next = argmax(&lp);
                seq.push(next);
                if next == special.eos {
                    return Ok(finish(seq, false));
                }
            }
        }
        Strategy::Beam(k) => {
            let k = k.max(1);
            let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![special.bos], 0.0)];
            let mut done: Vec<(Vec<u32>, f64, bool)> = Vec::new();
            while !live.is_empty() && done.len() < k {
                if live[0].0.len() == max_len - 1 {
                    for (mut seq, cum) in live.drain(..) {
                        seq.push(special.eos);
                        let score = cum / length_penalty(seq.len() - 1);
                        done.push((seq, score, true));
                    }
                    break;
                }
                let prefixes: Vec<Vec<u32>> = live.iter().map(|(s, _)| s.clone()).collect();
                let lps = dec.next_log_probs(&prefixes)?;
                let mut cands: Vec<(f64, usize, u32)> = Vec::new();
                for (hi, lp) in lps.iter().enumerate() {
                    for (tok, &p) in lp.iter().enumerate() {
                        cands.push((live[hi].1 + p, hi, tok as u32));
                    }
                }
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let mut next = Vec::with_capacity(k);
                for &(cum, hi, tok) in cands.iter().take(k) {
                    let mut seq = live[hi].0.clone();
                    seq.push(tok);
                    if tok == special.eos {
                        let score = cum / length_penalty(seq.len() - 1);
                        done.push((seq, score, false));
                    } else {
                        next.push((seq, cum));
                    }
                }
                live = next;
            }
            let best = done
                .into_iter()
                .reduce(|a, b| if b.1.total_cmp(&a.1) == Ordering::Greater { b } else { a })
                .expect("beam search always finishes a hypothesis");
            Ok(finish(best.0, best.2))
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}
