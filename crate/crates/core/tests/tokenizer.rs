// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::fs;

use reasonlens_core::TokenId;
use serde::Deserialize;

use common::{data_dir, gpt2_vocab};

#[derive(Deserialize)]
struct Fixture {
    text: String,
    ids: Vec<TokenId>,
}

fn fixtures() -> Vec<Fixture> {
    fs::read_to_string(data_dir().join("gpt2/tokenizer_fixtures.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn ids_match_reference_fixtures() {
    let vocab = gpt2_vocab();
    let cases = fixtures();
    assert!(cases.len() >= 100);
    let mismatched: Vec<&str> = cases
        .iter()
        .filter(|f| vocab.encode(&f.text) != f.ids)
        .map(|f| f.text.as_str())
        .collect();
    assert!(mismatched.is_empty(), "{mismatched:?}");
}

#[test]
fn corpus_round_trips() {
    let vocab = gpt2_vocab();
    let corpus = fs::read_to_string(data_dir().join("gpt2/roundtrip_corpus.txt")).unwrap();
    let lines: Vec<&str> = corpus.lines().collect();
    assert_eq!(lines.len(), 1000);
    for line in lines {
        assert_eq!(vocab.decode(&vocab.encode(line)).unwrap(), line);
    }
}

#[test]
fn known_phrases() {
    let vocab = gpt2_vocab();
    assert_eq!(vocab.encode("The Great Barrier Reef"), vec![464, 3878, 32804, 34151]);
    let australia = vocab.encode(" Australia");
    assert_eq!(australia.len(), 1);
    assert_eq!(vocab.token_text(australia[0]).unwrap(), " Australia");
    assert_eq!(vocab.id_of("<|endoftext|>"), Some(50256));
}
