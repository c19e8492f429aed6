// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use reasonlens_core::datasets::PromptPair;
use reasonlens_core::{Model, ProcessingMode, Scalar, Vocabulary};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn tiny_dir() -> PathBuf {
    data_dir().join("tiny")
}

pub fn gpt2_vocab() -> &'static Vocabulary {
    static V: OnceLock<Vocabulary> = OnceLock::new();
    V.get_or_init(|| Vocabulary::load(&data_dir().join("gpt2")).expect("gpt2 tokenizer files"))
}

fn tiny_vocab() -> Arc<Vocabulary> {
    static V: OnceLock<Arc<Vocabulary>> = OnceLock::new();
    V.get_or_init(|| Arc::new(Vocabulary::load(&tiny_dir()).expect("tiny tokenizer files")))
        .clone()
}

/// Three-layer, four-head random GPT-2 with a 320-token vocabulary.
pub fn tiny<T: Scalar>(mode: ProcessingMode) -> Model<T> {
    let raw: Model<f32> =
        Model::from_archive(&tiny_dir().join("model.safetensors"), ProcessingMode::Raw).expect("tiny archive");
    // Process in the target precision so f64 runs see no f32 rounding.
    let w = raw.cast::<T>();
    Model::from_weights(w.config, w.weights, mode)
        .expect("tiny weights")
        .with_tokenizer(tiny_vocab())
        .expect("tiny tokenizer")
}

pub fn tiny_pairs() -> Vec<PromptPair> {
    [
        ("the cat sat on the mat", "the dog ran to the mat", "rest", "the cat"),
        ("she is in the house", "the one at the door is in the", "yard", "she"),
        ("rain on the street", "water on the road is", "wet", "rain"),
        ("the sea at noon", "it is the sea at", "night", "sea"),
        ("ten and one", "the sum of ten and one is", "eleven", "ten"),
        ("a red stone", "the stone there is", "red", "stone"),
    ]
    .into_iter()
    .map(|(s, m, a, mem)| PromptPair {
        single_hop: s.into(),
        multi_hop: m.into(),
        answer: a.into(),
        memory: mem.into(),
    })
    .collect()
}
