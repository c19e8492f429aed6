// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE compatible with the published GPT-2 `vocab.json` /
//! `merges.txt` pair, and the bag-of-tokens vector used to encode memories.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type TokenId = u32;

/// GPT-2 pre-tokenisation pattern.
const GPT2_SPLIT: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// How repeated tokens contribute to a bag-of-tokens vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BagMode {
    /// Entry `v` counts the occurrences of token `v` (sum of one-hot rows).
    #[default]
    Counts,
    /// Entries clamped to {0, 1}.
    Binary,
}

#[derive(Debug)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    splitter: Regex,
}

impl Vocabulary {
    /// Loads `vocab.json` and `merges.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let merges_path = dir.join("merges.txt");
        let vocab = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let merges = fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        let token_to_id: HashMap<String, TokenId> = serde_json::from_str(&vocab)?;
        let merges = parse_merges(&merges_path, &merges)?;
        Self::from_parts(token_to_id, merges)
    }

    pub fn from_parts(token_to_id: HashMap<String, TokenId>, merges: Vec<(String, String)>) -> Result<Self> {
        let n = token_to_id.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} for {tok:?} is outside 0..{n}")))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Tokenizer(format!("id {id} assigned twice")));
            }
        }
        let id_to_token: Vec<String> = id_to_token
            .into_iter()
            .map(|t| t.expect("dense ids: n entries filled n slots"))
            .collect();

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        for c in byte_encoder {
            if !token_to_id.contains_key(c.to_string().as_str()) {
                return Err(Error::Tokenizer(format!(
                    "vocabulary lacks the single-byte token {c:?}"
                )));
            }
        }
        let merge_ranks = merges
            .into_iter()
            .enumerate()
            .map(|(rank, pair)| (pair, rank))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            merge_ranks,
            byte_encoder,
            byte_decoder,
            splitter: Regex::new(GPT2_SPLIT).expect("static pattern compiles"),
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for piece in self.splitter.find_iter(text) {
            // The pattern has no catastrophic constructs; a backtrack-limit
            // failure here would be a fancy-regex bug.
            let piece = piece.expect("GPT-2 split pattern matches");
            let mapped: String = piece.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                ids.push(self.token_to_id[sym.as_str()]);
            }
        }
        ids
    }

    /// Greedy lowest-rank merging of one pre-tokenised piece.
    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        if symbols.len() < 2 {
            return symbols;
        }
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && self.merge_ranks.get(&(symbols[i].clone(), symbols[i + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", symbols[i], symbols[i + 1]));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
            if symbols.len() == 1 {
                break;
            }
        }
        symbols
    }

    /// Raw bytes of a token sequence.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self
                .id_to_token
                .get(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} out of range 0..{}", self.len())))?;
            for c in tok.chars() {
                // Added tokens (e.g. <|endoftext|>) may use characters outside
                // the byte table; emit them as their UTF-8 text.
                match self.byte_decoder.get(&c) {
                    Some(&b) => out.push(b),
                    None => out.extend_from_slice(c.encode_utf8(&mut [0; 4]).as_bytes()),
                }
            }
        }
        Ok(out)
    }

    /// Decodes to text; byte sequences that are not valid UTF-8 (possible
    /// when decoding an arbitrary slice of ids) are replaced with U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Human-readable form of a single token.
    pub fn token_text(&self, id: TokenId) -> Result<String> {
        self.decode(&[id])
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }
}

fn parse_merges(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if (i == 0 && line.starts_with('#')) || line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_owned(), b.to_owned())),
            _ => {
                return Err(Error::Record {
                    path: path.to_owned(),
                    line: i + 1,
                    detail: format!("expected `left right`, got {line:?}"),
                })
            }
        }
    }
    Ok(merges)
}

/// GPT-2's reversible byte → printable-character table.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (u32::from(b'!')..=u32::from(b'~')).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b)
    };
    let mut extra = 0;
    for b in 0..256u32 {
        let c = if printable(b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

/// Sum of the one-hot rows of `ids` over a vocabulary of `vocab_size`.
pub fn one_hot_bag<T: Scalar>(ids: &[TokenId], vocab_size: usize, mode: BagMode) -> Result<Tensor<T>> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("bag of tokens needs at least one token".into()));
    }
    let mut bag = vec![T::zero(); vocab_size];
    for &id in ids {
        let slot = bag
            .get_mut(id as usize)
            .ok_or_else(|| Error::Tokenizer(format!("id {id} out of range 0..{vocab_size}")))?;
        *slot = match mode {
            BagMode::Counts => *slot + T::one(),
            BagMode::Binary => T::one(),
        };
    }
    Ok(Tensor::vector(bag))
}

/// Prepends a space unless the text already starts with whitespace, so the
/// first word maps to its word-initial BPE token.
pub fn with_leading_space(text: &str) -> Cow<'_, str> {
    if text.starts_with(char::is_whitespace) {
        Cow::Borrowed(text)
    } else {
        Cow::Owned(format!(" {text}"))
    }
}
