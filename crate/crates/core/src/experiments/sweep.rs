// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{answer_token, percent_difference, robust_mean};
use crate::archive::write_atomically;
use crate::datasets::{random_word_for, sample_pos_words, PartOfSpeech, PosLexicon, PromptPair, SampleMode};
use crate::error::{Error, Result};
use crate::interventions::{
    encode_memory, inject_from_residual, EncodeOptions, EncodedMemory, EncodingStyle, InjectionSpec, InjectionTarget,
    StyleKind,
};
use crate::model::{HookPoint, LogitRows, Model, RowSelect};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::TokenId;

/// What gets injected for each prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemorySource {
    /// The pair's own `memory` field.
    Curated,
    Fixed(String),
    /// A fresh uniformly drawn word of this part of speech per injection.
    Random(PartOfSpeech),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub layers: Vec<usize>,
    pub taus: Vec<f64>,
    pub style: StyleKind,
    pub memory: MemorySource,
    pub rows: RowSelect,
    pub target: InjectionTarget,
    pub encode: EncodeOptions,
    pub seed: u64,
}

impl SweepConfig {
    /// Every layer of the model against integer magnitudes 1..=15.
    pub fn full_grid(n_layer: usize) -> Self {
        Self {
            layers: (0..n_layer).collect(),
            taus: (1..=15).map(f64::from).collect(),
            style: StyleKind::Unembed,
            memory: MemorySource::Curated,
            rows: RowSelect::All,
            target: InjectionTarget::Layer,
            encode: EncodeOptions::default(),
            seed: 0,
        }
    }

    fn validate<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        if self.layers.is_empty() || self.taus.is_empty() {
            return Err(Error::InvalidArgument("empty layer or magnitude range".into()));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= model.config.n_layer) {
            return Err(Error::InvalidArgument(format!(
                "layer {l} outside 0..{}",
                model.config.n_layer
            )));
        }
        if let Some(t) = self.taus.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "magnitude {t} must be finite and nonnegative"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    /// Index of the pair in the input dataset.
    pub prompt: usize,
    pub memory: String,
    pub p_pre: f64,
    pub p_post: f64,
    pub percent_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub tau: f64,
    pub robust_mean: f64,
    pub n_excluded: usize,
    pub results: Vec<PromptResult>,
}

impl SweepCell {
    fn from_results(layer: usize, tau: f64, results: Vec<PromptResult>) -> Result<Self> {
        let diffs: Vec<f64> = results.iter().map(|r| r.percent_diff).collect();
        let (robust_mean, n_excluded) = robust_mean(&diffs)?;
        Ok(Self {
            layer,
            tau,
            robust_mean,
            n_excluded,
            results,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub model: String,
    pub config: SweepConfig,
    /// Layer-major, then magnitude, in the order of the config.
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, layer: usize, tau: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.layer == layer && c.tau == tau)
    }

    /// Cell with the highest robust mean (first one on ties).
    pub fn best(&self) -> Option<&SweepCell> {
        self.cells.iter().fold(None, |best: Option<&SweepCell>, c| match best {
            Some(b) if b.robust_mean >= c.robust_mean => Some(b),
            _ => Some(c),
        })
    }
}

/// A multi-hop prompt after its plain forward pass.
#[derive(Debug, Clone)]
pub struct PreparedPrompt<T> {
    pub tokens: Vec<TokenId>,
    pub answer: TokenId,
    pub p_pre: f64,
    /// Residual stream entering each requested layer.
    pub residuals: BTreeMap<usize, Tensor<T>>,
}

/// Runs `prompt` once, keeping the baseline answer probability and the
/// residual stream entering every layer in `layers`.
pub fn prepare_prompt<T: Scalar>(
    model: &Model<T>,
    prompt: &str,
    answer: &str,
    layers: &[usize],
) -> Result<PreparedPrompt<T>> {
    let tokens = model.encode(prompt)?;
    let answer = answer_token(model, answer)?;
    let capture: Vec<HookPoint> = layers
        .iter()
        .filter(|&&l| l > 0)
        .map(|&l| HookPoint::ResidPost(l - 1))
        .collect();
    let out = model.forward_with(&tokens, &[], &capture, LogitRows::Last)?;
    let p_pre = out.next_token_distribution().data()[answer as usize].as_f64();
    let mut residuals = BTreeMap::new();
    for &l in layers {
        let r = if l == 0 {
            model.embed(&tokens)?
        } else {
            out.cache.get(HookPoint::ResidPost(l - 1))?.clone()
        };
        residuals.insert(l, r);
    }
    Ok(PreparedPrompt {
        tokens,
        answer,
        p_pre,
        residuals,
    })
}

fn injected_result<T: Scalar>(
    model: &Model<T>,
    prepared: &PreparedPrompt<T>,
    prompt: usize,
    layer: usize,
    tau: f64,
    memory: &EncodedMemory<T>,
    cfg: &SweepConfig,
) -> Result<PromptResult> {
    let spec = InjectionSpec {
        layer,
        magnitude: T::of(tau),
        memory: memory.clone(),
        rows: cfg.rows,
        target: cfg.target,
    };
    let residual = prepared.residuals[&layer].clone();
    let out = inject_from_residual(model, residual, &spec, LogitRows::Last)?;
    let p_post = out.next_token_distribution().data()[prepared.answer as usize].as_f64();
    Ok(PromptResult {
        prompt,
        memory: memory.provenance.memory.clone(),
        p_pre: prepared.p_pre,
        p_post,
        percent_diff: percent_difference(prepared.p_pre, p_post)?,
    })
}

fn with_prompt_context<R>(r: Result<R>, i: usize, pair: &PromptPair) -> Result<R> {
    r.map_err(|e| Error::InvalidArgument(format!("prompt {i} ({:?}): {e}", pair.multi_hop)))
}

/// Evaluates every `(layer, τ)` cell of `cfg` over `pairs`. Work is spread
/// over prompts; results are gathered in prompt order, so the grid does not
/// depend on the number of threads.
pub fn run_injection_sweep<T: Scalar>(
    model: &Model<T>,
    pairs: &[PromptPair],
    cfg: &SweepConfig,
    lexicon: Option<&PosLexicon>,
) -> Result<SweepGrid> {
    cfg.validate(model)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no prompt pairs".into()));
    }
    let random_words = match &cfg.memory {
        MemorySource::Random(pos) => Some(
            lexicon
                .ok_or_else(|| Error::InvalidArgument("random memories need a lexicon".into()))?
                .words(*pos)?,
        ),
        _ => None,
    };
    let n_cells = cfg.layers.len() * cfg.taus.len();

    let per_prompt: Vec<Result<Vec<PromptResult>>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let run = || -> Result<Vec<PromptResult>> {
                let prepared = prepare_prompt(model, &pair.multi_hop, &pair.answer, &cfg.layers)?;
                let mut out = Vec::with_capacity(n_cells);
                for (li, &layer) in cfg.layers.iter().enumerate() {
                    let style = EncodingStyle::for_layer(cfg.style, layer);
                    let fixed = match &cfg.memory {
                        MemorySource::Curated => Some(encode_memory(model, &pair.memory, style, &cfg.encode)?),
                        MemorySource::Fixed(m) => Some(encode_memory(model, m, style, &cfg.encode)?),
                        MemorySource::Random(_) => None,
                    };
                    for (ti, &tau) in cfg.taus.iter().enumerate() {
                        let drawn;
                        let memory = match (&fixed, random_words) {
                            (Some(m), _) => m,
                            (None, Some(words)) => {
                                let item = ((i * cfg.layers.len() + li) * cfg.taus.len() + ti) as u64;
                                let word = random_word_for(words, cfg.seed, item)?;
                                drawn = encode_memory(model, word, style, &cfg.encode)?;
                                &drawn
                            }
                            (None, None) => unreachable!("random source without words"),
                        };
                        out.push(injected_result(model, &prepared, i, layer, tau, memory, cfg)?);
                    }
                }
                Ok(out)
            };
            with_prompt_context(run(), i, pair)
        })
        .collect();

    let mut by_cell: Vec<Vec<PromptResult>> = vec![Vec::with_capacity(pairs.len()); n_cells];
    for r in per_prompt {
        for (c, res) in r?.into_iter().enumerate() {
            by_cell[c].push(res);
        }
    }
    let mut cells = Vec::with_capacity(n_cells);
    let mut by_cell = by_cell.into_iter();
    for &layer in &cfg.layers {
        for &tau in &cfg.taus {
            cells.push(SweepCell::from_results(layer, tau, by_cell.next().unwrap_or_default())?);
        }
    }
    Ok(SweepGrid {
        model: model.id(),
        config: cfg.clone(),
        cells,
    })
}

/// Same as [`run_injection_sweep`] with a fresh random word of `pos` per
/// injection.
pub fn run_pos_sweep<T: Scalar>(
    model: &Model<T>,
    pairs: &[PromptPair],
    cfg: &SweepConfig,
    pos: PartOfSpeech,
    lexicon: &PosLexicon,
) -> Result<SweepGrid> {
    let cfg = SweepConfig {
        memory: MemorySource::Random(pos),
        ..cfg.clone()
    };
    run_injection_sweep(model, pairs, &cfg, Some(lexicon))
}

/// Aggregate of every (word × prompt) injection for one part of speech.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosResult {
    pub pos: PartOfSpeech,
    pub words: Vec<String>,
    pub robust_mean: f64,
    pub n_excluded: usize,
    pub results: Vec<PromptResult>,
}

/// Injects each of the `n_words` most common words of every part of speech
/// into every prompt at one `(layer, τ)`.
pub fn run_random_injection<T: Scalar>(
    model: &Model<T>,
    pairs: &[PromptPair],
    layer: usize,
    tau: f64,
    cfg: &SweepConfig,
    lexicon: &PosLexicon,
    parts: &[PartOfSpeech],
    n_words: usize,
) -> Result<Vec<PosResult>> {
    let cfg = SweepConfig {
        layers: vec![layer],
        taus: vec![tau],
        ..cfg.clone()
    };
    cfg.validate(model)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no prompt pairs".into()));
    }
    let style = EncodingStyle::for_layer(cfg.style, layer);
    let mut word_lists = Vec::with_capacity(parts.len());
    for &pos in parts {
        let words = sample_pos_words(lexicon, pos, n_words.min(lexicon.words(pos)?.len()), SampleMode::TopN)?;
        let encoded = words
            .iter()
            .map(|w| encode_memory(model, w, style, &cfg.encode))
            .collect::<Result<Vec<_>>>()?;
        word_lists.push((pos, words, encoded));
    }

    let per_prompt: Vec<Result<Vec<Vec<PromptResult>>>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let run = || -> Result<Vec<Vec<PromptResult>>> {
                let prepared = prepare_prompt(model, &pair.multi_hop, &pair.answer, &[layer])?;
                word_lists
                    .iter()
                    .map(|(_, _, encoded)| {
                        encoded
                            .iter()
                            .map(|m| injected_result(model, &prepared, i, layer, tau, m, &cfg))
                            .collect()
                    })
                    .collect()
            };
            with_prompt_context(run(), i, pair)
        })
        .collect();

    let mut gathered: Vec<Vec<PromptResult>> = vec![Vec::new(); parts.len()];
    for r in per_prompt {
        for (k, res) in r?.into_iter().enumerate() {
            gathered[k].extend(res);
        }
    }
    word_lists
        .into_iter()
        .zip(gathered)
        .map(|((pos, words, _), results)| {
            let diffs: Vec<f64> = results.iter().map(|r| r.percent_diff).collect();
            let (robust_mean, n_excluded) = robust_mean(&diffs)?;
            Ok(PosResult {
                pos,
                words,
                robust_mean,
                n_excluded,
                results,
            })
        })
        .collect()
}

/// CSV rendering of a grid: `layer,tau,robust_mean_pct,n_prompts,n_excluded`.
pub fn sweep_csv(grid: &SweepGrid) -> String {
    let mut s = String::from("layer,tau,robust_mean_pct,n_prompts,n_excluded\n");
    for c in &grid.cells {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{}",
            c.layer,
            c.tau,
            c.robust_mean,
            c.results.len(),
            c.n_excluded
        );
    }
    s
}

#[derive(Serialize)]
struct SidecarRef<'a> {
    run: &'a serde_json::Value,
    grid: &'a SweepGrid,
}

#[derive(Deserialize)]
struct Sidecar {
    run: serde_json::Value,
    grid: SweepGrid,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes the CSV and a JSON sidecar next to it holding `run` (the resolved
/// run configuration) and every per-prompt value.
pub fn write_sweep(grid: &SweepGrid, csv: &Path, run: &serde_json::Value) -> Result<PathBuf> {
    let sidecar = sidecar_path(csv);
    let body = serde_json::to_vec_pretty(&SidecarRef { run, grid })?;
    write_atomically(&sidecar, &body)?;
    write_atomically(csv, sweep_csv(grid).as_bytes())?;
    Ok(sidecar)
}

/// Reads back a sidecar written by [`write_sweep`].
pub fn read_sweep_sidecar(path: &Path) -> Result<(serde_json::Value, SweepGrid)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let s: Sidecar = serde_json::from_str(&text)?;
    Ok((s.run, s.grid))
}
