// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a JSON file merged under command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use reasonlens_core::datasets::PartOfSpeech;
use reasonlens_core::interventions::StyleKind;
use reasonlens_core::lens::KlDirection;
use reasonlens_core::{ProcessingMode, RowSelect};

pub const CACHE_ENV: &str = "REASONLENS_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Every option any command reads. Config-file keys are the flag names.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Options {
    /// Weight archive path, or a model name looked up in $REASONLENS_CACHE.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Tokenizer directory (vocab.json + merges.txt); defaults to the archive's directory.
    #[arg(long, global = true)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_processing)]
    pub processing: Option<ProcessingMode>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    /// Prompt-pair JSONL file.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Directory of <pos>.txt word lists.
    #[arg(long, global = true)]
    pub lexicon: Option<PathBuf>,
    /// Inclusive layer range `A..B`, a single layer, or a comma list.
    #[arg(long, global = true)]
    pub layer_range: Option<String>,
    /// Inclusive integer magnitude range `A..B`, or a comma list.
    #[arg(long, global = true)]
    pub tau_range: Option<String>,
    #[arg(long, global = true)]
    pub layer: Option<usize>,
    #[arg(long, global = true)]
    pub head: Option<usize>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true, value_parser = parse_style)]
    pub style: Option<StyleKind>,
    #[arg(long, global = true, value_parser = parse_broadcast)]
    pub broadcast: Option<RowSelect>,
    /// Inject into this head's output instead of the whole attention output.
    #[arg(long, global = true)]
    pub inject_head: Option<usize>,
    /// Memory text; sweeps default to each pair's curated memory.
    #[arg(long, global = true)]
    pub memory: Option<String>,
    /// Parts of speech, comma separated.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_pos)]
    pub pos: Option<Vec<PartOfSpeech>>,
    /// Words per part of speech in random-sweep.
    #[arg(long, global = true)]
    pub n_words: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the number of logical processors.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub prompt: Option<String>,
    #[arg(long, global = true)]
    pub answer: Option<String>,
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    /// Trained lens archive used by inspect-head.
    #[arg(long, global = true)]
    pub lens: Option<PathBuf>,
    /// Text corpus for train-lens, one record per line.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Heads to train, `layer:head` comma separated.
    #[arg(long, global = true)]
    pub heads: Option<String>,
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub max_tokens: Option<usize>,
    #[arg(long, global = true, value_parser = parse_direction)]
    pub direction: Option<KlDirection>,
    /// Knowledge-triple JSONL file for gen-2wmh.
    #[arg(long, global = true)]
    pub triples: Option<PathBuf>,
    /// Memory lengths in tokens for flops.
    #[arg(long, global = true, value_delimiter = ',')]
    pub n_ctx: Option<Vec<f64>>,
    /// Reference model names for flops.
    #[arg(long, global = true, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    /// Log base for surprisal in stats: e or 2.
    #[arg(long, global = true)]
    pub log_base: Option<String>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),* $(,)?) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl Options {
    /// `flags` win over `self`.
    pub fn overlay(mut self, flags: Options) -> Options {
        overlay!(
            self,
            flags,
            model,
            tokenizer,
            processing,
            precision,
            dataset,
            lexicon,
            layer_range,
            tau_range,
            layer,
            head,
            tau,
            style,
            broadcast,
            inject_head,
            memory,
            pos,
            n_words,
            seed,
            out,
            workers,
            prompt,
            answer,
            top_k,
            lens,
            corpus,
            heads,
            steps,
            learning_rate,
            batch_size,
            max_tokens,
            direction,
            triples,
            n_ctx,
            models,
            log_base,
        );
        self
    }

    pub fn from_file(path: &Path) -> Result<Options> {
        let text = std::fs::read_to_string(path).with_context(|| format!("config: reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("config: {}", path.display()))
    }

    pub fn require<'a, T>(value: &'a Option<T>, field: &str) -> Result<&'a T> {
        value.as_ref().ok_or_else(|| anyhow!("{field}: required"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn processing(&self) -> ProcessingMode {
        self.processing.unwrap_or(ProcessingMode::Processed)
    }

    /// Archive path: an existing file, or `<cache>/<name>/model.safetensors`.
    pub fn model_path(&self) -> Result<PathBuf> {
        let model = Self::require(&self.model, "model")?;
        let direct = PathBuf::from(model);
        if direct.is_file() {
            return Ok(direct);
        }
        if let Some(cache) = std::env::var_os(CACHE_ENV) {
            let cached = PathBuf::from(cache).join(model).join("model.safetensors");
            if cached.is_file() {
                return Ok(cached);
            }
            bail!("model: `{model}` is neither a file nor {}", cached.display());
        }
        bail!("model: `{model}` is not a file and {CACHE_ENV} is unset")
    }

    pub fn tokenizer_dir(&self, archive: &Path) -> Result<PathBuf> {
        let dir = match &self.tokenizer {
            Some(d) => d.clone(),
            None => archive.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        if !dir.join("vocab.json").is_file() || !dir.join("merges.txt").is_file() {
            bail!("tokenizer: {} lacks vocab.json and merges.txt", dir.display());
        }
        Ok(dir)
    }

    pub fn existing(&self, value: &Option<PathBuf>, field: &str) -> Result<PathBuf> {
        let p = Self::require(value, field)?;
        if !p.exists() {
            bail!("{field}: {} does not exist", p.display());
        }
        Ok(p.clone())
    }

    pub fn layers(&self, n_layer: usize) -> Result<Vec<usize>> {
        match &self.layer_range {
            None => Ok((0..n_layer).collect()),
            Some(s) => {
                let v = parse_list(s, "layer-range")?;
                v.into_iter()
                    .map(|x| {
                        if x.fract() != 0.0 || x < 0.0 || x >= n_layer as f64 {
                            bail!("layer-range: layer {x} outside 0..{n_layer}");
                        }
                        Ok(x as usize)
                    })
                    .collect()
            }
        }
    }

    pub fn taus(&self) -> Result<Vec<f64>> {
        match &self.tau_range {
            None => Ok((1..=15).map(f64::from).collect()),
            Some(s) => {
                let v = parse_list(s, "tau-range")?;
                if let Some(t) = v.iter().find(|t| !(**t >= 0.0)) {
                    bail!("tau-range: magnitude {t} is negative");
                }
                Ok(v)
            }
        }
    }

    /// `layer:head` pairs for train-lens; `--layer`/`--head` give a single one.
    pub fn head_list(&self) -> Result<Vec<(usize, usize)>> {
        if let Some(s) = &self.heads {
            return s
                .split(',')
                .map(|item| {
                    let (l, h) = item
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| anyhow!("heads: `{item}` is not layer:head"))?;
                    Ok((
                        l.trim().parse().with_context(|| format!("heads: layer in `{item}`"))?,
                        h.trim().parse().with_context(|| format!("heads: head in `{item}`"))?,
                    ))
                })
                .collect();
        }
        Ok(vec![(
            *Self::require(&self.layer, "layer")?,
            *Self::require(&self.head, "head")?,
        )])
    }
}

/// `A..B` (inclusive, integer steps), `A..=B`, `A`, or `a,b,c`.
pub fn parse_list(s: &str, field: &str) -> Result<Vec<f64>> {
    let num = |x: &str| -> Result<f64> {
        x.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| anyhow!("{field}: `{x}` is not a number"))
    };
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a.fract() != 0.0 || b.fract() != 0.0 || b < a {
            bail!("{field}: `{s}` must be an increasing integer range");
        }
        return Ok((a as i64..=b as i64).map(|x| x as f64).collect());
    }
    s.split(',').map(num).collect()
}

fn parse_processing(s: &str) -> std::result::Result<ProcessingMode, String> {
    s.parse().map_err(|e: reasonlens_core::Error| e.to_string())
}

fn parse_style(s: &str) -> std::result::Result<StyleKind, String> {
    s.parse().map_err(|e: reasonlens_core::Error| e.to_string())
}

fn parse_pos(s: &str) -> std::result::Result<PartOfSpeech, String> {
    s.parse().map_err(|e: reasonlens_core::Error| e.to_string())
}

fn parse_broadcast(s: &str) -> std::result::Result<RowSelect, String> {
    match s {
        "all" => Ok(RowSelect::All),
        "last" => Ok(RowSelect::Last),
        other => Err(format!("`{other}` (expected all|last)")),
    }
}

fn parse_direction(s: &str) -> std::result::Result<KlDirection, String> {
    match s {
        "lens-to-model" => Ok(KlDirection::LensToModel),
        "model-to-lens" => Ok(KlDirection::ModelToLens),
        other => Err(format!("`{other}` (expected lens-to-model|model-to-lens)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_list("7..9", "x").unwrap(), [7.0, 8.0, 9.0]);
        assert_eq!(parse_list("1..=2", "x").unwrap(), [1.0, 2.0]);
        assert_eq!(parse_list("0.5,2", "x").unwrap(), [0.5, 2.0]);
        assert_eq!(parse_list("4", "x").unwrap(), [4.0]);
        let err = parse_list("3..1", "tau-range").unwrap_err().to_string();
        assert!(err.starts_with("tau-range:"), "{err}");
        assert!(parse_list("a..2", "x").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file: Options = serde_json::from_str(r#"{"seed": 3, "layer-range": "0..1", "tau": 2.0}"#).unwrap();
        let flags = Options {
            seed: Some(9),
            ..Default::default()
        };
        let o = file.overlay(flags);
        assert_eq!(o.seed, Some(9));
        assert_eq!(o.layer_range.as_deref(), Some("0..1"));
        assert_eq!(o.tau, Some(2.0));
        assert!(serde_json::from_str::<Options>(r#"{"sede": 1}"#).is_err());
    }

    #[test]
    fn layer_and_head_lists() {
        let o = Options {
            layer_range: Some("1..2".into()),
            heads: Some("9:8, 1:0".into()),
            ..Default::default()
        };
        assert_eq!(o.layers(3).unwrap(), [1, 2]);
        assert!(o.layers(2).unwrap_err().to_string().starts_with("layer-range:"));
        assert_eq!(o.head_list().unwrap(), [(9, 8), (1, 0)]);
        let o = Options {
            heads: Some("9".into()),
            ..Default::default()
        };
        assert!(o.head_list().unwrap_err().to_string().starts_with("heads:"));
    }
}
