//! Byte-level BPE tokenizer.
//!
//! Every byte has a base token, so any UTF-8 string encodes without unknowns.
//! Text is first split into chunks (GPT-2 style: letter runs, digit runs and
//! symbol runs, each with an optional leading space) and merges never cross
//! chunk boundaries.
//!
//! Vocabulary file (`im2latex-bpe 1`), one entry per line, tab separated:
//!
//! ```text
//! im2latex-bpe	1
//! special	0	<bos>
//! token	3	5c        # id, hex-encoded bytes
//! merge	3	4	300     # left id, right id, result id; listed in rank order
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_MAGIC: &str = "im2latex-bpe";
pub const VOCAB_VERSION: u32 = 1;
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub special: SpecialIds,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    /// Byte content per id; empty for specials.
    tokens: Vec<Vec<u8>>,
    special_names: Vec<(u32, String)>,
    special: SpecialIds,
    byte_ids: [u32; 256],
    /// (left, right) -> (rank, result)
    merges: HashMap<(u32, u32), (usize, u32)>,
    merge_list: Vec<(u32, u32, u32)>,
}

impl Tokenizer {
    /// A tokenizer with byte tokens only: ids 0..3 are `<bos> <eos> <pad>`,
    /// byte `b` is id `3 + b`.
    pub fn byte_level() -> Self {
        let mut tokens = vec![Vec::new(); 3];
        let mut byte_ids = [0u32; 256];
        for b in 0..=255u8 {
            byte_ids[b as usize] = tokens.len() as u32;
            tokens.push(vec![b]);
        }
        Self {
            tokens,
            special_names: vec![(0, BOS.into()), (1, EOS.into()), (2, PAD.into())],
            special: SpecialIds { bos: 0, eos: 1, pad: 2 },
            byte_ids,
            merges: HashMap::new(),
            merge_list: Vec::new(),
        }
    }

    /// Learn up to `num_merges` merges from `texts`. Ties between equally
    /// frequent pairs go to the smallest `(left, right)` id pair; pairs seen
    /// fewer than twice are never merged.
    pub fn train<S: AsRef<str>>(texts: &[S], num_merges: usize) -> Self {
        let mut tok = Self::byte_level();
        let mut words: HashMap<Vec<u32>, usize> = HashMap::new();
        for t in texts {
            for chunk in pretokenize(t.as_ref()) {
                let ids: Vec<u32> = chunk.bytes().map(|b| tok.byte_ids[b as usize]).collect();
                *words.entry(ids).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = words.into_iter().collect();
        words.sort();
        for _ in 0..num_merges {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, c) in &words {
                for pair in w.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_default() += c;
                }
            }
            let Some((&best, &count)) = counts
                .iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            else {
                break;
            };
            if count < 2 {
                break;
            }
            let new_id = tok.tokens.len() as u32;
            let mut bytes = tok.tokens[best.0 as usize].clone();
            bytes.extend_from_slice(&tok.tokens[best.1 as usize]);
            tok.tokens.push(bytes);
            tok.merges.insert(best, (tok.merge_list.len(), new_id));
            tok.merge_list.push((best.0, best.1, new_id));
            for (w, _) in &mut words {
                *w = apply_merge(w, best, new_id);
            }
        }
        tok
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merge_list.len()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    fn is_special(&self, id: u32) -> bool {
        self.special_names.iter().any(|(i, _)| *i == id)
    }

    /// Subword ids for `text`, without special tokens.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            let mut ids: Vec<u32> = chunk.bytes().map(|b| self.byte_ids[b as usize]).collect();
            while ids.len() > 1 {
                let best = ids
                    .windows(2)
                    .filter_map(|p| self.merges.get(&(p[0], p[1])).map(|&(rank, id)| (rank, (p[0], p[1]), id)))
                    .min();
                let Some((_, pair, id)) = best else { break };
                ids = apply_merge(&ids, pair, id);
            }
            out.extend(ids);
        }
        out
    }

    /// `[BOS, ids…, EOS]`; when that exceeds `max_len`, the first `max_len - 1`
    /// ids are kept and EOS appended.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(self.special.bos);
        ids.extend(self.encode(text));
        let truncated = ids.len() + 1 > max_len;
        if truncated {
            ids.truncate(max_len - 1);
        }
        ids.push(self.special.eos);
        TokenSequence {
            ids,
            special: self.special,
            truncated,
        }
    }

    /// Bytes of the non-special ids, decoded as UTF-8 (lossily, since
    /// truncation can split a character).
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| Error::Data(format!("token id {id} is not in the vocabulary")))?;
            if !self.is_special(id) {
                bytes.extend_from_slice(tok);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{VOCAB_MAGIC}\t{VOCAB_VERSION}\n");
        for (id, name) in &self.special_names {
            let _ = writeln!(s, "special\t{id}\t{name}");
        }
        for (id, bytes) in self.tokens.iter().enumerate() {
            if !self.is_special(id as u32) {
                let _ = writeln!(s, "token\t{id}\t{}", hex::encode(bytes));
            }
        }
        for (l, r, id) in &self.merge_list {
            let _ = writeln!(s, "merge\t{l}\t{r}\t{id}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            file: "vocabulary".into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == format!("{VOCAB_MAGIC}\t{VOCAB_VERSION}") => {}
            _ => return Err(err(1, format!("expected header `{VOCAB_MAGIC}<TAB>{VOCAB_VERSION}`"))),
        }
        let mut tokens: Vec<Option<Vec<u8>>> = Vec::new();
        let mut special_names = Vec::new();
        let mut merge_list = Vec::new();
        let set = |tokens: &mut Vec<Option<Vec<u8>>>, id: usize, b: Vec<u8>| {
            if tokens.len() <= id {
                tokens.resize(id + 1, None);
            }
            tokens[id] = Some(b);
        };
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| s.parse::<u32>().map_err(|e| err(n + 1, format!("bad id `{s}`: {e}")));
            match f.as_slice() {
                ["special", id, name] => {
                    let id = num(id)?;
                    set(&mut tokens, id as usize, Vec::new());
                    special_names.push((id, name.to_string()));
                }
                ["token", id, hexbytes] => {
                    let bytes = hex::decode(hexbytes).map_err(|e| err(n + 1, e.to_string()))?;
                    if bytes.is_empty() {
                        return Err(err(n + 1, "empty token".into()));
                    }
                    set(&mut tokens, num(id)? as usize, bytes);
                }
                ["merge", l, r, id] => merge_list.push((num(l)?, num(r)?, num(id)?)),
                _ => return Err(err(n + 1, format!("unrecognized entry `{line}`"))),
            }
        }
        let tokens: Vec<Vec<u8>> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::Data(format!("vocabulary has no entry for id {i}"))))
            .collect::<Result<_>>()?;
        let find = |name: &str| {
            special_names
                .iter()
                .find(|(_, n)| n == name)
                .map(|(i, _)| *i)
                .ok_or_else(|| Error::Data(format!("vocabulary lacks special token {name}")))
        };
        let special = SpecialIds {
            bos: find(BOS)?,
            eos: find(EOS)?,
            pad: find(PAD)?,
        };
        let mut byte_ids = [u32::MAX; 256];
        for (id, t) in tokens.iter().enumerate() {
            if t.len() == 1 && byte_ids[t[0] as usize] == u32::MAX {
                byte_ids[t[0] as usize] = id as u32;
            }
        }
        if let Some(b) = byte_ids.iter().position(|&i| i == u32::MAX) {
            return Err(Error::Data(format!("vocabulary has no token for byte {b:#04x}")));
        }
        let mut merges = HashMap::new();
        for (rank, &(l, r, id)) in merge_list.iter().enumerate() {
            let ok = [l, r, id].iter().all(|&i| (i as usize) < tokens.len());
            if !ok {
                return Err(Error::Data(format!("merge ({l}, {r}) -> {id} references an unknown id")));
            }
            merges.insert((l, r), (rank, id));
        }
        Ok(Self {
            tokens,
            special_names,
            special,
            byte_ids,
            merges,
            merge_list,
        })
    }

    /// Build from a GPT-2 style `vocab.json` (token string -> id, tokens in the
    /// printable byte alphabet) and `merges.txt`. GPT-2 has a single
    /// `<|endoftext|>` token, which serves as BOS, EOS and PAD.
    pub fn from_gpt2(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let vocab: HashMap<String, u32> = serde_json::from_str(vocab_json)?;
        let decoder = unicode_to_bytes();
        let to_bytes = |s: &str| -> Result<Vec<u8>> {
            s.chars()
                .map(|c| decoder.get(&c).copied().ok_or_else(|| Error::Data(format!("char {c:?} outside the byte alphabet"))))
                .collect()
        };
        let n = vocab.values().map(|&i| i as usize + 1).max().unwrap_or(0);
        let mut tokens = vec![Vec::new(); n];
        let mut special_names = Vec::new();
        let mut eot = None;
        for (tok, &id) in &vocab {
            if tok == "<|endoftext|>" {
                eot = Some(id);
                special_names.push((id, tok.clone()));
            } else {
                tokens[id as usize] = to_bytes(tok)?;
            }
        }
        let eot = eot.ok_or_else(|| Error::Data("GPT-2 vocabulary lacks <|endoftext|>".into()))?;
        let mut text = format!("{VOCAB_MAGIC}\t{VOCAB_VERSION}\n");
        for name in [BOS, EOS, PAD] {
            let _ = writeln!(text, "special\t{eot}\t{name}");
        }
        for (id, bytes) in tokens.iter().enumerate() {
            if id as u32 != eot {
                let _ = writeln!(text, "token\t{id}\t{}", hex::encode(bytes));
            }
        }
        for line in merges_txt.lines().filter(|l| !l.starts_with("#version") && !l.trim().is_empty()) {
            let mut parts = line.split(' ');
            let (Some(l), Some(r)) = (parts.next(), parts.next()) else {
                return Err(Error::Data(format!("bad merge line `{line}`")));
            };
            let id_of = |s: &str| vocab.get(s).copied().ok_or_else(|| Error::Data(format!("merge token `{s}` not in vocab")));
            let _ = writeln!(text, "merge\t{}\t{}\t{}", id_of(l)?, id_of(r)?, id_of(&format!("{l}{r}"))?);
        }
        let mut tok = Self::from_text(&text)?;
        tok.special_names = special_names;
        Ok(tok)
    }
}

fn apply_merge(ids: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// GPT-2's printable stand-ins for raw bytes, inverted.
fn unicode_to_bytes() -> HashMap<char, u8> {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).chain(0xA1..=0xAC).chain(0xAE..=0xFF).collect();
    let mut chars: Vec<u32> = printable.clone();
    let mut extra = 0;
    for b in 0..=255u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + extra);
            extra += 1;
        }
    }
    printable
        .into_iter()
        .zip(chars)
        .map(|(b, c)| (char::from_u32(c).expect("valid scalar"), b as u8))
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Other,
}

fn class(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Digit
    } else {
        Class::Other
    }
}

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

/// Split text into merge domains. Concatenating the chunks gives back the input.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let idx: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |k: usize| idx.get(k).map_or(text.len(), |&(b, _)| b);
    let mut chunks = Vec::new();
    let mut k = 0;
    while k < idx.len() {
        let start = k;
        let (b, c) = idx[k];
        if let Some(con) = CONTRACTIONS.iter().find(|con| text[b..].starts_with(**con)) {
            k += con.chars().count();
            chunks.push(&text[b..end_of(k)]);
            continue;
        }
        let mut j = k;
        if c == ' ' && idx.get(k + 1).is_some_and(|&(_, n)| class(n) != Class::Space) {
            j += 1;
        }
        let cls = class(idx[j].1);
        if cls == Class::Space {
            let mut e = k;
            while e < idx.len() && class(idx[e].1) == Class::Space {
                e += 1;
            }
            // leave the last space of a run to prefix the next chunk
            if e < idx.len() && e - k >= 2 {
                e -= 1;
            }
            k = e;
        } else {
            j += 1;
            while j < idx.len() && class(idx[j].1) == cls {
                if cls == Class::Other && idx[j].1 == '\'' && CONTRACTIONS.iter().any(|con| text[idx[j].0..].starts_with(con)) {
                    break;
                }
                j += 1;
            }
            k = j;
        }
        chunks.push(&text[idx[start].0..end_of(k)]);
    }
    chunks
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trained() -> Tokenizer {
        let corpus = ["\\frac{a}{b} + x^{2}", "x^{2} + y^{2} = z^{2}", "\\sum_{i=1}^{n} i", "\\frac{1}{2}"];
        Tokenizer::train(&corpus, 40)
    }

    #[test]
    fn empty_string_is_bos_eos() {
        let tok = trained();
        let s = tok.tokenize("", 512);
        assert_eq!(s.ids, vec![tok.special().bos, tok.special().eos]);
        assert_eq!(tok.detokenize(&s.ids).unwrap(), "");
    }

    #[test]
    fn round_trip_and_merges_shorten() {
        let tok = trained();
        assert!(tok.num_merges() > 0);
        let s = tok.tokenize("x^{2}", 512);
        assert_eq!(tok.detokenize(&s.ids).unwrap(), "x^{2}");
        assert!(s.len() < "x^{2}".len() + 2);
    }

    #[test]
    fn long_input_is_truncated_to_max_len() {
        let tok = trained();
        let long: String = "ab+".repeat(3334).chars().take(10_000).collect();
        let s = tok.tokenize(&long, 512);
        assert_eq!(s.len(), 512);
        assert_eq!(*s.ids.last().unwrap(), tok.special().eos);
        assert_eq!(s.ids[0], tok.special().bos);
        assert!(s.truncated);
    }

    #[test]
    fn trailing_pads_are_ignored() {
        let tok = trained();
        let mut s = tok.tokenize("a+b", 64).ids;
        let plain = tok.detokenize(&s).unwrap();
        s.extend([tok.special().pad; 5]);
        assert_eq!(tok.detokenize(&s).unwrap(), plain);
    }

    #[test]
    fn unknown_id_is_an_error() {
        let tok = trained();
        assert!(tok.detokenize(&[tok.vocab_size() as u32]).is_err());
    }

    #[test]
    fn vocabulary_file_round_trips() {
        let tok = trained();
        let back = Tokenizer::from_text(&tok.to_text()).unwrap();
        assert_eq!(back.to_text(), tok.to_text());
        for s in ["\\frac{x}{y}", "α + β", ""] {
            assert_eq!(back.encode(s), tok.encode(s));
        }
        assert!(Tokenizer::from_text("nonsense").is_err());
    }

    #[test]
    fn pretokenizer_groups_like_gpt2() {
        assert_eq!(pretokenize("x^{2} + ab12"), vec!["x", "^{", "2", "}", " +", " ab", "12"]);
        assert_eq!(pretokenize("a   b"), vec!["a", "  ", " b"]);
        assert_eq!(pretokenize("it's"), vec!["it", "'s"]);
        assert_eq!(pretokenize("a \n"), vec!["a", " \n"]);
    }

    #[test]
    fn gpt2_vocabulary_import() {
        // tiny vocabulary in GPT-2's byte alphabet: 'Ġ' stands for a space
        let mut vocab: HashMap<String, u32> = HashMap::new();
        let decoder = unicode_to_bytes();
        let mut by_byte: Vec<(u8, char)> = decoder.iter().map(|(c, b)| (*b, *c)).collect();
        by_byte.sort();
        for (b, c) in &by_byte {
            vocab.insert(c.to_string(), *b as u32);
        }
        vocab.insert("Ġx".into(), 256);
        vocab.insert("<|endoftext|>".into(), 257);
        let json = serde_json::to_string(&vocab).unwrap();
        let tok = Tokenizer::from_gpt2(&json, "#version: 0.2\nĠ x\n").unwrap();
        assert_eq!(tok.encode(" x"), vec![256]);
        assert_eq!(tok.special(), SpecialIds { bos: 257, eos: 257, pad: 257 });
        let s = tok.tokenize(" x+1", 16);
        assert_eq!(tok.detokenize(&s.ids).unwrap(), " x+1");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(s in "[a-zA-Z0-9{}^_\\\\+=() \\-αβ∑'\n]{0,60}") {
            let tok = trained();
            let seq = tok.tokenize(&s, 512);
            prop_assert!(!seq.truncated);
            prop_assert_eq!(tok.detokenize(&seq.ids).unwrap(), s.clone());
            prop_assert_eq!(pretokenize(&s).concat(), s);
        }
    }
}
