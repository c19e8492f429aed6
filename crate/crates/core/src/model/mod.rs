// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 family model: configuration, weights, archive loading and the
//! optional weight post-processing (layer-norm folding and centering).

mod forward;
pub mod hooks;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{vecmat, Tensor};
use crate::tokenizer::Vocabulary;

pub use forward::{next_token_distribution, ForwardOutput, LogitRows};
pub use hooks::{ActivationCache, HookPoint, Intervention, RowSelect};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    /// Width of the attention output; equal to `d_model` for every supported model.
    pub fn d_attn(&self) -> usize {
        self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_head == 0 || self.d_model % self.n_head != 0 {
            return Err(Error::Unsupported(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.n_layer == 0 || self.vocab_size == 0 || self.n_ctx == 0 {
            return Err(Error::Unsupported(format!("degenerate config {self:?}")));
        }
        Ok(())
    }

    fn preset(name: &str, n_layer: usize, n_head: usize, d_model: usize, vocab: usize, ctx: usize) -> Self {
        Self {
            name: name.to_owned(),
            n_layer,
            n_head,
            d_model,
            d_ff: 4 * d_model,
            vocab_size: vocab,
            n_ctx: ctx,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn gpt2_small() -> Self {
        Self::preset("gpt2-small", 12, 12, 768, 50257, 1024)
    }

    pub fn gpt2_large() -> Self {
        Self::preset("gpt2-large", 36, 20, 1280, 50257, 1024)
    }

    pub fn gpt2_xl() -> Self {
        Self::preset("gpt2-xl", 48, 25, 1600, 50257, 1024)
    }

    /// Architecture figures of the seven models used for FLOP accounting.
    /// Only the GPT-2 entries are loadable; the others are shape-only.
    pub fn flop_reference_models() -> Vec<Self> {
        vec![
            Self::gpt2_small(),
            Self::gpt2_large(),
            Self::gpt2_xl(),
            Self::preset("gpt-neo-125m", 12, 12, 768, 50257, 2048),
            Self::preset("gpt-neo-1.3b", 24, 16, 2048, 50257, 2048),
            Self::preset("gpt-neo-2.7b", 32, 20, 2048, 50257, 2048),
            Self::preset("gpt-j-6b", 28, 16, 4096, 50400, 2048),
        ]
    }

    pub fn by_name(name: &str) -> Option<Self> {
        Self::flop_reference_models().into_iter().find(|c| c.name == name)
    }
}

/// How archive weights are turned into runtime weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessingMode {
    /// Weights used verbatim.
    #[default]
    Raw,
    /// Layer-norm affine parameters folded into the following linear maps,
    /// residual-writing matrices centered over the hidden axis, and the
    /// unembedding centered over the vocabulary axis.
    Processed,
}

impl std::str::FromStr for ProcessingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "processed" => Ok(Self::Processed),
            other => Err(Error::InvalidArgument(format!(
                "processing mode `{other}` (expected raw|processed)"
            ))),
        }
    }
}

/// Layer-norm affine parameters; absent once folded.
#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Parameters of one transformer block. Matrices are stored input-major, so
/// a linear map is `x · W + b`.
#[derive(Debug, Clone)]
pub struct BlockWeights<T> {
    pub ln_1: Option<NormParams<T>>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln_2: Option<NormParams<T>>,
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights<T> {
    /// Token embedding, `|V|×d`.
    pub w_e: Tensor<T>,
    /// Learned positional embedding, `n_ctx×d`.
    pub w_pos: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub ln_f: Option<NormParams<T>>,
    /// Unembedding, `d×|V|`.
    pub w_u: Tensor<T>,
    /// Logit bias, `|V|`. Zero for raw GPT-2; nonzero once `ln_f` is folded.
    pub b_u: Tensor<T>,
}

/// Immutable configuration + weights; shareable across threads.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub weights: ModelWeights<T>,
    pub mode: ProcessingMode,
    tokenizer: Option<Arc<Vocabulary>>,
}

/// Loads a weight archive and its tokenizer directory.
pub fn load_model<T: Scalar>(archive_path: &Path, tokenizer_dir: &Path, mode: ProcessingMode) -> Result<Model<T>> {
    let vocab = Vocabulary::load(tokenizer_dir)?;
    Model::from_archive(archive_path, mode)?.with_tokenizer(Arc::new(vocab))
}

impl<T: Scalar> Model<T> {
    pub fn from_archive(path: &Path, mode: ProcessingMode) -> Result<Self> {
        let archive = Archive::read(path)?;
        let config = config_from_archive(path, &archive)?;
        let weights = weights_from_archive(path, &archive, &config)?;
        Self::from_weights(config, weights, mode)
    }

    /// Builds a model from raw (unprocessed) weights.
    pub fn from_weights(config: ModelConfig, weights: ModelWeights<T>, mode: ProcessingMode) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &weights)?;
        let weights = match mode {
            ProcessingMode::Raw => weights,
            ProcessingMode::Processed => process_weights(weights)?,
        };
        Ok(Self {
            config,
            weights,
            mode,
            tokenizer: None,
        })
    }

    pub fn with_tokenizer(mut self, vocab: Arc<Vocabulary>) -> Result<Self> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Unsupported(format!(
                "tokenizer has {} tokens, model vocabulary is {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        self.tokenizer = Some(vocab);
        Ok(self)
    }

    pub fn tokenizer(&self) -> Result<&Vocabulary> {
        self.tokenizer
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("model was loaded without a tokenizer".into()))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(self.tokenizer()?.encode(text))
    }

    /// Identifier recorded in encoded-memory provenance.
    pub fn id(&self) -> String {
        format!(
            "{}:{}",
            self.config.name,
            match self.mode {
                ProcessingMode::Raw => "raw",
                ProcessingMode::Processed => "processed",
            }
        )
    }

    /// Same model in a different scalar precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let norm = |n: &Option<NormParams<T>>| {
            n.as_ref().map(|n| NormParams {
                gain: n.gain.cast(),
                bias: n.bias.cast(),
            })
        };
        let w = &self.weights;
        Model {
            config: self.config.clone(),
            mode: self.mode,
            tokenizer: self.tokenizer.clone(),
            weights: ModelWeights {
                w_e: w.w_e.cast(),
                w_pos: w.w_pos.cast(),
                blocks: w
                    .blocks
                    .iter()
                    .map(|b| BlockWeights {
                        ln_1: norm(&b.ln_1),
                        w_q: b.w_q.cast(),
                        b_q: b.b_q.cast(),
                        w_k: b.w_k.cast(),
                        b_k: b.b_k.cast(),
                        w_v: b.w_v.cast(),
                        b_v: b.b_v.cast(),
                        w_o: b.w_o.cast(),
                        b_o: b.b_o.cast(),
                        ln_2: norm(&b.ln_2),
                        w_in: b.w_in.cast(),
                        b_in: b.b_in.cast(),
                        w_out: b.w_out.cast(),
                        b_out: b.b_out.cast(),
                    })
                    .collect(),
                ln_f: norm(&w.ln_f),
                w_u: w.w_u.cast(),
                b_u: w.b_u.cast(),
            },
        }
    }
}

fn meta_usize(path: &Path, archive: &Archive, key: &str) -> Result<Option<usize>> {
    archive
        .meta(key)
        .map(|v| {
            v.trim().parse().map_err(|_| Error::Archive {
                path: path.to_owned(),
                detail: format!("metadata `{key}` = {v:?} is not an integer"),
            })
        })
        .transpose()
}

fn config_from_archive(path: &Path, archive: &Archive) -> Result<ModelConfig> {
    if let Some(kind) = archive.meta("attention") {
        if kind != "gpt2" {
            return Err(Error::Unsupported(format!(
                "{}: attention variant `{kind}` (only `gpt2` is supported)",
                path.display()
            )));
        }
    }
    let wte = archive.tensors.get("wte").ok_or_else(|| Error::Tensor {
        path: path.to_owned(),
        tensor: "wte".into(),
        detail: "missing from archive".into(),
    })?;
    let (vocab_size, d_model) = wte.dims2()?;
    let n_ctx = match archive.tensors.get("wpe") {
        Some(t) => t.rows(),
        None => {
            return Err(Error::Tensor {
                path: path.to_owned(),
                tensor: "wpe".into(),
                detail: "missing from archive".into(),
            })
        }
    };
    let n_layer = match meta_usize(path, archive, "n_layer")? {
        Some(n) => n,
        None => (0..)
            .take_while(|i| archive.tensors.contains_key(&format!("h.{i}.ln_1.g")))
            .count(),
    };
    // GPT-2 checkpoints all use 64-wide heads.
    let n_head = meta_usize(path, archive, "n_head")?.unwrap_or(d_model / 64);
    let d_ff = archive.tensors.get("h.0.mlp.wi.w").map_or(4 * d_model, Tensor::cols);
    let layer_norm_eps = archive
        .meta("layer_norm_eps")
        .and_then(|v| v.parse().ok())
        .unwrap_or(1e-5);
    let name = archive.meta("model_id").map(str::to_owned).unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let config = ModelConfig {
        name,
        n_layer,
        n_head,
        d_model,
        d_ff,
        vocab_size,
        n_ctx,
        layer_norm_eps,
    };
    config.validate()?;
    Ok(config)
}

fn weights_from_archive<T: Scalar>(path: &Path, archive: &Archive, c: &ModelConfig) -> Result<ModelWeights<T>> {
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let get = |name: &str, shape: &[usize]| -> Result<Tensor<T>> { Ok(archive.expect(path, name, shape)?.cast()) };
    let norm = |prefix: &str| -> Result<Option<NormParams<T>>> {
        Ok(Some(NormParams {
            gain: get(&format!("{prefix}.g"), &[d])?,
            bias: get(&format!("{prefix}.b"), &[d])?,
        }))
    };
    let mut blocks = Vec::with_capacity(c.n_layer);
    for i in 0..c.n_layer {
        let p = format!("h.{i}");
        blocks.push(BlockWeights {
            ln_1: norm(&format!("{p}.ln_1"))?,
            w_q: get(&format!("{p}.attn.wq.w"), &[d, d])?,
            b_q: get(&format!("{p}.attn.wq.b"), &[d])?,
            w_k: get(&format!("{p}.attn.wk.w"), &[d, d])?,
            b_k: get(&format!("{p}.attn.wk.b"), &[d])?,
            w_v: get(&format!("{p}.attn.wv.w"), &[d, d])?,
            b_v: get(&format!("{p}.attn.wv.b"), &[d])?,
            w_o: get(&format!("{p}.attn.wo.w"), &[d, d])?,
            b_o: get(&format!("{p}.attn.wo.b"), &[d])?,
            ln_2: norm(&format!("{p}.ln_2"))?,
            w_in: get(&format!("{p}.mlp.wi.w"), &[d, f])?,
            b_in: get(&format!("{p}.mlp.wi.b"), &[f])?,
            w_out: get(&format!("{p}.mlp.wf.w"), &[f, d])?,
            b_out: get(&format!("{p}.mlp.wf.b"), &[d])?,
        });
    }
    Ok(ModelWeights {
        w_e: get("wte", &[v, d])?,
        w_pos: get("wpe", &[c.n_ctx, d])?,
        blocks,
        ln_f: norm("ln_f")?,
        w_u: get("wu", &[d, v])?,
        b_u: Tensor::zeros(vec![v]),
    })
}

/// Writes raw weights in the canonical archive layout.
pub fn write_archive<T: Scalar>(path: &Path, config: &ModelConfig, w: &ModelWeights<T>) -> Result<()> {
    let mut a = Archive::default();
    let norm = |a: &mut Archive, prefix: String, n: &Option<NormParams<T>>| -> Result<()> {
        let n = n
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{prefix}: folded weights cannot be written as raw")))?;
        a.insert(format!("{prefix}.g"), &n.gain);
        a.insert(format!("{prefix}.b"), &n.bias);
        Ok(())
    };
    a.insert("wte", &w.w_e);
    a.insert("wpe", &w.w_pos);
    for (i, b) in w.blocks.iter().enumerate() {
        let p = format!("h.{i}");
        norm(&mut a, format!("{p}.ln_1"), &b.ln_1)?;
        norm(&mut a, format!("{p}.ln_2"), &b.ln_2)?;
        for (name, wt, bs) in [
            ("attn.wq", &b.w_q, &b.b_q),
            ("attn.wk", &b.w_k, &b.b_k),
            ("attn.wv", &b.w_v, &b.b_v),
            ("attn.wo", &b.w_o, &b.b_o),
            ("mlp.wi", &b.w_in, &b.b_in),
            ("mlp.wf", &b.w_out, &b.b_out),
        ] {
            a.insert(format!("{p}.{name}.w"), wt);
            a.insert(format!("{p}.{name}.b"), bs);
        }
    }
    norm(&mut a, "ln_f".into(), &w.ln_f)?;
    a.insert("wu", &w.w_u);
    for (k, v) in [
        ("model_id", config.name.clone()),
        ("n_layer", config.n_layer.to_string()),
        ("n_head", config.n_head.to_string()),
        ("d_model", config.d_model.to_string()),
        ("n_ctx", config.n_ctx.to_string()),
        ("vocab_size", config.vocab_size.to_string()),
        ("layer_norm_eps", config.layer_norm_eps.to_string()),
        ("attention", "gpt2".into()),
    ] {
        a.metadata.insert(k.into(), v);
    }
    a.write(path)
}

fn check_shapes<T: Scalar>(c: &ModelConfig, w: &ModelWeights<T>) -> Result<()> {
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let want = |name: String, t: &Tensor<T>, shape: &[usize]| -> Result<()> {
        if t.shape() != shape {
            return Err(Error::shape(
                "model weights",
                format!("{name}: {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(())
    };
    want("wte".into(), &w.w_e, &[v, d])?;
    want("wpe".into(), &w.w_pos, &[c.n_ctx, d])?;
    want("wu".into(), &w.w_u, &[d, v])?;
    want("b_u".into(), &w.b_u, &[v])?;
    if w.blocks.len() != c.n_layer {
        return Err(Error::shape(
            "model weights",
            format!("{} blocks for {} layers", w.blocks.len(), c.n_layer),
        ));
    }
    for (i, b) in w.blocks.iter().enumerate() {
        for (n, t) in [("wq", &b.w_q), ("wk", &b.w_k), ("wv", &b.w_v), ("wo", &b.w_o)] {
            want(format!("h.{i}.attn.{n}.w"), t, &[d, d])?;
        }
        for (n, t) in [
            ("bq", &b.b_q),
            ("bk", &b.b_k),
            ("bv", &b.b_v),
            ("bo", &b.b_o),
            ("bf", &b.b_out),
        ] {
            want(format!("h.{i}.{n}"), t, &[d])?;
        }
        want(format!("h.{i}.mlp.wi.w"), &b.w_in, &[d, f])?;
        want(format!("h.{i}.mlp.wi.b"), &b.b_in, &[f])?;
        want(format!("h.{i}.mlp.wf.w"), &b.w_out, &[f, d])?;
    }
    Ok(())
}

/// Folds `x̂ ⊙ g + β` into the linear map `W, b` that reads it:
/// `W' = diag(g) W`, `b' = b + β W`.
fn fold_norm_into<T: Scalar>(norm: &NormParams<T>, w: &mut Tensor<T>, b: &mut Tensor<T>) -> Result<()> {
    let shift = vecmat(norm.bias.data(), w)?;
    b.add_assign(&shift)?;
    for (p, &g) in norm.gain.data().iter().enumerate() {
        for x in w.row_mut(p) {
            *x *= g;
        }
    }
    Ok(())
}

/// Subtracts each row's mean (over its columns) from that row.
fn center_rows<T: Scalar>(t: &mut Tensor<T>) {
    let n = t.cols();
    if n == 0 {
        return;
    }
    for row in t.data_mut().chunks_mut(n) {
        let mean = row.iter().copied().sum::<T>() / T::of(n as f64);
        for x in row {
            *x -= mean;
        }
    }
}

fn process_weights<T: Scalar>(mut w: ModelWeights<T>) -> Result<ModelWeights<T>> {
    for b in &mut w.blocks {
        if let Some(ln) = b.ln_1.take() {
            fold_norm_into(&ln, &mut b.w_q, &mut b.b_q)?;
            fold_norm_into(&ln, &mut b.w_k, &mut b.b_k)?;
            fold_norm_into(&ln, &mut b.w_v, &mut b.b_v)?;
        }
        if let Some(ln) = b.ln_2.take() {
            fold_norm_into(&ln, &mut b.w_in, &mut b.b_in)?;
        }
        // Everything written into the residual stream is centered over the
        // hidden axis; the next layer norm removes the row mean anyway.
        center_rows(&mut b.w_o);
        center_rows(&mut b.b_o);
        center_rows(&mut b.w_out);
        center_rows(&mut b.b_out);
    }
    center_rows(&mut w.w_e);
    center_rows(&mut w.w_pos);
    if let Some(ln) = w.ln_f.take() {
        fold_norm_into(&ln, &mut w.w_u, &mut w.b_u)?;
    }
    // Per-position constant logit shifts leave the softmax unchanged.
    center_rows(&mut w.w_u);
    center_rows(&mut w.b_u);
    Ok(w)
}
