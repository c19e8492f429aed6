// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt-pair datasets and part-of-speech word lists.
//!
//! Prompt pairs and knowledge triples are JSON lines; a lexicon is a
//! directory with one frequency-ordered word list per part of speech.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::archive::write_atomically;
use crate::error::{Error, Result};

/// Two chained knowledge triples `(s1, r1, s2)` and `(s2, r2, s3)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTriplePair {
    pub s1: String,
    pub r1: String,
    pub s2: String,
    pub r2: String,
    pub s3: String,
}

impl KnowledgeTriplePair {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("s1", &self.s1),
            ("r1", &self.r1),
            ("s2", &self.s2),
            ("r2", &self.r2),
            ("s3", &self.s3),
        ] {
            if v.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("triple field `{name}` is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub single_hop: String,
    pub multi_hop: String,
    pub answer: String,
    /// The explicit subject of the single-hop prompt.
    pub memory: String,
}

impl PromptPair {
    pub fn validate(&self) -> Result<()> {
        if self.answer.trim().is_empty() {
            return Err(Error::InvalidArgument("`answer` is empty".into()));
        }
        if self.memory.trim().is_empty() {
            return Err(Error::InvalidArgument("`memory` is empty".into()));
        }
        for (name, p) in [("single_hop", &self.single_hop), ("multi_hop", &self.multi_hop)] {
            if p.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("`{name}` is empty")));
            }
            if p.ends_with(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("`{name}` ends in whitespace")));
            }
        }
        Ok(())
    }
}

pub fn generate_2wmh_pair(t: &KnowledgeTriplePair) -> Result<PromptPair> {
    t.validate()?;
    Ok(PromptPair {
        single_hop: format!("The {} of {} is", t.r2, t.s2),
        multi_hop: format!("The {} of the {} of {} is", t.r2, t.r1, t.s1),
        answer: t.s3.clone(),
        memory: t.s2.clone(),
    })
}

fn read_jsonl<R: DeserializeOwned>(path: &Path, check: impl Fn(&R) -> Result<()>) -> Result<Vec<R>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |detail: String| Error::Record {
            path: path.to_owned(),
            line: i + 1,
            detail,
        };
        let rec: R = serde_json::from_str(line).map_err(|e| record_err(e.to_string()))?;
        check(&rec).map_err(|e| record_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    write_atomically(path, &buf)
}

/// Loads a prompt-pair file in order, validating each record.
pub fn load_prompt_pairs(path: &Path) -> Result<Vec<PromptPair>> {
    read_jsonl(path, PromptPair::validate)
}

pub fn write_prompt_pairs(path: &Path, pairs: &[PromptPair]) -> Result<()> {
    write_jsonl(path, pairs)
}

pub fn load_triples(path: &Path) -> Result<Vec<KnowledgeTriplePair>> {
    read_jsonl(path, KnowledgeTriplePair::validate)
}

pub fn write_triples(path: &Path, triples: &[KnowledgeTriplePair]) -> Result<()> {
    write_jsonl(path, triples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartOfSpeech {
    Adjectives,
    Adverbs,
    Conjunctions,
    Nouns,
    Verbs,
    Top5050,
}

impl PartOfSpeech {
    pub const ALL: [PartOfSpeech; 6] = [
        Self::Adjectives,
        Self::Adverbs,
        Self::Conjunctions,
        Self::Nouns,
        Self::Verbs,
        Self::Top5050,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Adjectives => "adjectives",
            Self::Adverbs => "adverbs",
            Self::Conjunctions => "conjunctions",
            Self::Nouns => "nouns",
            Self::Verbs => "verbs",
            Self::Top5050 => "top5050",
        }
    }

    /// Length of the published list.
    pub fn expected_len(self) -> usize {
        match self {
            Self::Adjectives => 824,
            Self::Adverbs => 331,
            Self::Conjunctions => 40,
            Self::Nouns => 2635,
            Self::Verbs => 969,
            Self::Top5050 => 5050,
        }
    }
}

impl fmt::Display for PartOfSpeech {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartOfSpeech {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let alias = match s.as_str() {
            "adj" | "adjective" => "adjectives",
            "adv" | "adverb" => "adverbs",
            "conj" | "conjunction" => "conjunctions",
            "noun" => "nouns",
            "verb" => "verbs",
            "top" | "top-5050" => "top5050",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|p| p.name() == alias)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown part of speech `{s}`")))
    }
}

/// Frequency-ordered word lists, most common first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PosLexicon {
    lists: std::collections::BTreeMap<PartOfSpeech, Vec<String>>,
}

impl PosLexicon {
    /// Reads `<pos>.txt` for every part of speech present in `dir`. With
    /// `strict`, every list must exist and have its published length.
    pub fn load(dir: &Path, strict: bool) -> Result<Self> {
        let mut lex = Self::default();
        for pos in PartOfSpeech::ALL {
            let path = dir.join(format!("{pos}.txt"));
            if !path.exists() {
                if strict {
                    return Err(Error::io(
                        &path,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "word list missing"),
                    ));
                }
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let words: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .map(str::to_owned)
                .collect();
            if strict && words.len() != pos.expected_len() {
                return Err(Error::InvalidArgument(format!(
                    "{}: {} words, expected {}",
                    path.display(),
                    words.len(),
                    pos.expected_len()
                )));
            }
            lex.lists.insert(pos, words);
        }
        Ok(lex)
    }

    pub fn from_lists(lists: impl IntoIterator<Item = (PartOfSpeech, Vec<String>)>) -> Self {
        Self {
            lists: lists.into_iter().collect(),
        }
    }

    pub fn words(&self, pos: PartOfSpeech) -> Result<&[String]> {
        self.lists
            .get(&pos)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("lexicon has no `{pos}` list")))
    }

    pub fn parts(&self) -> impl Iterator<Item = PartOfSpeech> + '_ {
        self.lists.keys().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    TopN,
    Random { seed: u64 },
}

/// `TopN` takes the `n` most frequent words; `Random` draws `n` words
/// uniformly with replacement from the whole list.
pub fn sample_pos_words(lexicon: &PosLexicon, pos: PartOfSpeech, n: usize, mode: SampleMode) -> Result<Vec<String>> {
    let words = lexicon.words(pos)?;
    if n > words.len() {
        return Err(Error::InvalidArgument(format!(
            "asked for {n} {pos}, list has {}",
            words.len()
        )));
    }
    Ok(match mode {
        SampleMode::TopN => words[..n].to_vec(),
        SampleMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| words[rng.gen_range(0..words.len())].clone()).collect()
        }
    })
}

/// Word for one work item of a random-word sweep; the same `(seed, item)`
/// always yields the same word regardless of evaluation order.
pub fn random_word_for(words: &[String], seed: u64, item: u64) -> Result<&str> {
    if words.is_empty() {
        return Err(Error::InvalidArgument("empty word list".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item);
    Ok(&words[rng.gen_range(0..words.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lilli() -> KnowledgeTriplePair {
        KnowledgeTriplePair {
            s1: "Lilli's Marriage".into(),
            r1: "director".into(),
            s2: "Jaap Speyer".into(),
            r2: "country of citizenship".into(),
            s3: "Dutch".into(),
        }
    }

    #[test]
    fn two_hop_template() {
        let p = generate_2wmh_pair(&lilli()).unwrap();
        assert_eq!(
            p.multi_hop,
            "The country of citizenship of the director of Lilli's Marriage is"
        );
        assert_eq!(p.single_hop, "The country of citizenship of Jaap Speyer is");
        assert_eq!(p.answer, "Dutch");
        assert_eq!(p.memory, "Jaap Speyer");
        assert_eq!(generate_2wmh_pair(&lilli()).unwrap(), p);
    }

    #[test]
    fn empty_triple_field_is_rejected() {
        let mut t = lilli();
        t.r1 = " ".into();
        let err = generate_2wmh_pair(&t).unwrap_err().to_string();
        assert!(err.contains("r1"), "{err}");
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_prompt_pairs(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_record_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&generate_2wmh_pair(&lilli()).unwrap()).unwrap();
        fs::write(&path, format!("{good}\n{{\"single_hop\": 3}}\n")).unwrap();
        match load_prompt_pairs(&path) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let trailing = r#"{"single_hop":"a ","multi_hop":"b","answer":"c","memory":"d"}"#;
        fs::write(&path, trailing).unwrap();
        let err = load_prompt_pairs(&path).unwrap_err().to_string();
        assert!(err.contains("single_hop") && err.contains("bad.jsonl:1:"), "{err}");
    }

    fn lexicon() -> PosLexicon {
        PosLexicon::from_lists([
            (PartOfSpeech::Conjunctions, (0..40).map(|i| format!("c{i}")).collect()),
            (PartOfSpeech::Nouns, (0..100).map(|i| format!("n{i}")).collect()),
        ])
    }

    #[test]
    fn sampling() {
        let lex = lexicon();
        let all = sample_pos_words(&lex, PartOfSpeech::Conjunctions, 40, SampleMode::TopN).unwrap();
        assert_eq!(all, lex.words(PartOfSpeech::Conjunctions).unwrap());
        let r = SampleMode::Random { seed: 7 };
        assert_eq!(
            sample_pos_words(&lex, PartOfSpeech::Nouns, 1, r).unwrap(),
            sample_pos_words(&lex, PartOfSpeech::Nouns, 1, r).unwrap()
        );
        assert!(sample_pos_words(&lex, PartOfSpeech::Nouns, 0, r).unwrap().is_empty());
        assert!(sample_pos_words(&lex, PartOfSpeech::Verbs, 1, SampleMode::TopN).is_err());
        assert!(sample_pos_words(&lex, PartOfSpeech::Conjunctions, 41, SampleMode::TopN).is_err());
        assert!("pronouns".parse::<PartOfSpeech>().is_err());
        assert_eq!("adj".parse::<PartOfSpeech>().unwrap(), PartOfSpeech::Adjectives);
    }

    #[test]
    fn strict_lexicon_checks_lengths() {
        let dir = tempfile::tempdir().unwrap();
        for pos in PartOfSpeech::ALL {
            let words: Vec<String> = (0..pos.expected_len()).map(|i| format!("w{i}")).collect();
            fs::write(dir.path().join(format!("{pos}.txt")), words.join("\n")).unwrap();
        }
        let lex = PosLexicon::load(dir.path(), true).unwrap();
        for pos in PartOfSpeech::ALL {
            assert_eq!(lex.words(pos).unwrap().len(), pos.expected_len());
        }
        fs::write(dir.path().join("verbs.txt"), "run\nwalk\n").unwrap();
        assert!(PosLexicon::load(dir.path(), true).is_err());
        assert_eq!(
            PosLexicon::load(dir.path(), false)
                .unwrap()
                .words(PartOfSpeech::Verbs)
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn random_word_depends_only_on_seed_and_item() {
        let words: Vec<String> = (0..50).map(|i| i.to_string()).collect();
        let a: Vec<&str> = (0..20).map(|i| random_word_for(&words, 3, i).unwrap()).collect();
        let b: Vec<&str> = (0..20).rev().map(|i| random_word_for(&words, 3, i).unwrap()).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
    }

    fn field() -> impl Strategy<Value = String> {
        "[A-Za-z'][A-Za-z' ]{0,12}[A-Za-z]"
    }

    proptest! {
        #[test]
        fn prompt_pairs_round_trip(
            rows in proptest::collection::vec((field(), field(), field(), field(), field()), 0..8)
        ) {
            let triples: Vec<KnowledgeTriplePair> = rows
                .into_iter()
                .map(|(s1, r1, s2, r2, s3)| KnowledgeTriplePair { s1, r1, s2, r2, s3 })
                .collect();
            let pairs: Vec<PromptPair> = triples.iter().map(|t| generate_2wmh_pair(t).unwrap()).collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("pairs.jsonl");
            write_prompt_pairs(&p, &pairs).unwrap();
            prop_assert_eq!(load_prompt_pairs(&p).unwrap(), pairs);
            let t = dir.path().join("triples.jsonl");
            write_triples(&t, &triples).unwrap();
            prop_assert_eq!(load_triples(&t).unwrap(), triples);
        }
    }
}
